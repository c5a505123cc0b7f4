"""The twelve acceptance criteria, each at its stated tolerance.

Test names start with ``test_cNN_`` so the summary lines sort by criterion.
"""

import json
import time

import numpy as np
import pytest

from trmlab.bounds import classical_bound, mixed_bound, pinsker_marginal_bound
from trmlab.cli import run
from trmlab.counterexamples import concentrated_sweep
from trmlab.divergence import EQ_TOL, INEQ_SLACK, kl_token
from trmlab.objectives import gradient_check
from trmlab.sweep import MARTINGALE_TOL, PAIR_KINDS, acceptance_cells, dominance_sweep
from trmlab.tabular import (
    ProblemShape,
    RewardTable,
    TabularPolicy,
    all_trajectories,
    build_context_tree,
    random_rewards,
    random_softmax_policy,
)
from trmlab.trm import (
    TRMConfig,
    apply_masks,
    estimator_expectation,
    estimator_values,
    masked_surrogate_gradient,
    ppo_clip_value_and_grad,
    prepare_batch,
    trm_training_loop,
)


@pytest.fixture(scope="module")
def sweep():
    cells = acceptance_cells()
    start = time.perf_counter()
    summary = dominance_sweep(cells, workers=1)
    return cells, summary, time.perf_counter() - start


@pytest.fixture(scope="module")
def trm_traces():
    return [trm_training_loop(TRMConfig(vocab_size=2, horizon=4, steps=100, seed=s)) for s in range(20)]


def test_c01_bounds_table(record_property, capsys):
    start = time.perf_counter()
    assert run(["bounds-table", "--horizon", "4096", "--kl-tok-max", "1e-4", "--kl-seq", "0.01", "--format", "json"]) == 0
    elapsed = time.perf_counter() - start
    rows = {r["bound"]: r["value"] for r in json.loads(capsys.readouterr().out)["rows"]}
    record_property("detail", f"{rows['Classical']:.4f} / {rows['Pinsker-Marginal']:.4f} / {rows['Mixed']:.4f} in {elapsed:.3f}s")
    assert abs(rows["Classical"] - 1677.3) <= 0.05
    assert abs(rows["Pinsker-Marginal"] - 35.0) <= 0.05
    assert abs(rows["Mixed"] - 8.2) <= 0.05
    assert (round(rows["Classical"]), round(rows["Pinsker-Marginal"], 1), round(rows["Mixed"], 1)) == (1677, 35.0, 8.2)
    assert elapsed < 1.0


def test_c02_bound_dominance(sweep, record_property):
    cells, summary, elapsed = sweep
    softmax = sum(c.n_pairs for c in cells if c.kind == "softmax")
    per_kind = {k: sum(c.n_pairs for c in cells if c.kind == k) for k in PAIR_KINDS[1:]}
    grid = {(c.vocab_size, c.horizon, c.scale) for c in cells if c.kind == "softmax"}
    record_property(
        "detail",
        f"{summary.n_pairs} pairs ({softmax} softmax, {per_kind}), {len(summary.violations)} violations, "
        f"max ratios {', '.join(f'{k}={v:.3f}' for k, v in summary.max_ratio.items())}, {elapsed:.1f}s",
    )
    assert grid == {(V, T, s) for V in (2, 3) for T in (2, 3, 4, 5) for s in (0.1, 0.3, 1.0)}
    assert softmax >= 5000 and all(n >= 100 for n in per_kind.values())
    dominance = [v for v in summary.violations if {"classical", "pinsker_marginal", "mixed"} & set(v["failures"])]
    assert dominance == []
    assert summary.ok
    assert elapsed < 300


def test_c03_chain_rule_equality(sweep, record_property):
    _, summary, _ = sweep
    record_property("detail", f"max residual {summary.max_chain_residual:.2e} over {summary.n_pairs} pairs")
    assert summary.max_chain_residual <= EQ_TOL
    assert all("chain_rule" not in r["failures"] for r in summary.rows)


def test_c04_martingale_and_advantage_bound(sweep, record_property):
    _, summary, _ = sweep
    record_property(
        "detail",
        f"max |E A| {summary.max_martingale_residual:.2e}, min 2TV-|g| {summary.min_advantage_slack:.2e}",
    )
    assert summary.max_martingale_residual <= MARTINGALE_TOL
    assert summary.min_advantage_slack >= -INEQ_SLACK


def test_c05_gradient_tangency(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    n = 0
    for i in range(60):
        V = int(rng.integers(2, 4))
        T = int(rng.integers(1, 5 if V == 2 else 4))
        P = int(rng.integers(1, 3))
        tree = build_context_tree(ProblemShape(V, T, tuple(np.full(P, 1.0 / P))))
        roll = random_softmax_policy(tree, float(rng.uniform(0.2, 2.0)), 5000 + i)
        rep = gradient_check(roll, random_rewards(tree, 6000 + i), step=1e-4)
        worst = max(worst, rep.max_abs_diff)
        n += 1
    record_property("detail", f"{n} instances, max |dL - dJ| = {worst:.2e}")
    assert n >= 50
    assert worst <= 1e-6


def test_c06_concentrated_counterexample(record_property):
    rows = concentrated_sweep((0.1, 0.01, 0.001), hot_kl=1.0)
    record_property("detail", "; ".join(f"eps={r['epsilon']}: ({r['seq_kl']:.12f}, {r['kl_tok_max']:.12f})" for r in rows))
    for r in rows:
        assert abs(r["seq_kl"] - r["epsilon"]) <= 1e-9
        assert abs(r["kl_tok_max"] - 1.0) <= 1e-9
    assert rows[0]["seq_kl"] > rows[1]["seq_kl"] > rows[2]["seq_kl"]


def test_c07_monotonic_improvement(trm_traces, record_property):
    steps = sum(len(t) for t in trm_traces)
    positive = sum(r["minorizer"] > 0 for t in trm_traces for r in t)
    bad = sum(r["minorizer"] > 0 and not r["J_theta"] > r["J_roll"] for t in trm_traces for r in t)
    record_property("detail", f"{len(trm_traces)} seeds x 100 steps = {steps}; {positive} minorizer-positive, {bad} without improvement")
    assert len(trm_traces) >= 20 and all(len(t) == 100 for t in trm_traces)
    assert positive > 0
    assert bad == 0


def test_c08_mask_soundness(trm_traces, record_property):
    accepted = sum(r["n_accepted"] for t in trm_traces for r in t)
    violations = sum(r["soundness_violations"] for t in trm_traces for r in t)
    over = sum(r["max_kl_accepted"] > 1e-2 for t in trm_traces for r in t)
    record_property("detail", f"{accepted} accepted sequences re-checked, {violations} violations")
    assert accepted > 0
    assert violations == 0 and over == 0


# reference (value, decimals) pairs; each entry is compared at its own precision
REFERENCE = {
    0.5: (("0.69", 2), ("0.19", 2)),
    1.0: (("0", 0), ("0", 0)),
    2.0: (("-0.69", 2), ("0.31", 2)),
    10.0: (("-2.30", 2), ("6.70", 2)),
    100.0: (("-4.61", 2), ("94.4", 1)),
}


def test_c09_estimators(record_property, capsys):
    assert run(["estimators", "--format", "json"]) == 0
    rows = {r["rho"]: r for r in json.loads(capsys.readouterr().out)["rows"]}
    matched = 0
    for rho, ((k1, d1), (k3, d3)) in REFERENCE.items():
        assert round(rows[rho]["k1"], d1) == float(k1)
        assert round(rows[rho]["k3"], d3) == float(k3)
        matched += 2
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(10_000):
        V = int(rng.integers(2, 6))
        p, q = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
        kl = kl_token(p, q)
        worst = max(worst, abs(estimator_expectation(p, q, "k1") - kl), abs(estimator_expectation(p, q, "k3") - kl))
    ratio = estimator_values(100.0).k3 / estimator_values(0.01).k3
    record_property("detail", f"{matched}/10 entries, max |E[k]-KL| {worst:.1e}, k3 ratio {ratio:.2f}")
    assert matched == 10
    assert worst <= 1e-12
    assert abs(ratio - 26) / 26 <= 0.05


def test_c10_ppo_leakage(record_property):
    cells = {
        (1.5, 1.0): ("clipped", 0.0),
        (0.5, -1.0): ("clipped", 0.0),
        (1.5, -1.0): ("unclipped", -1.0),
        (0.5, 1.0): ("unclipped", 1.0),
    }
    for (rho, A), (cls, grad) in cells.items():
        r = ppo_clip_value_and_grad(rho, A, 0.2)
        assert (r.leak_class, r.gradient) == (cls, grad)
    leaks = [ppo_clip_value_and_grad(rho, -1.0, 0.2).gradient for rho in np.geomspace(1.21, 1e3, 50)]
    assert all(g != 0 for g in leaks)
    # the same high-ratio, negative-advantage trajectory under TRM
    tree = build_context_tree(ProblemShape(2, 1))
    roll = TabularPolicy.from_logits(tree, [np.log(np.array([[[1 - 1e-3, 1e-3]]]))])
    theta = TabularPolicy.from_logits(tree, [np.log(np.array([[[0.0, 1.0]]]) * (1 - 2e-6) + 1e-6)])
    batch = prepare_batch(roll, theta, all_trajectories(tree), RewardTable(tree, np.array([[1.0, 0.0]])))
    delta = 0.01
    masked = apply_masks(batch, delta)
    grad = masked_surrogate_gradient(masked, theta)
    record_property("detail", f"rho={batch.rho[1, 0]:.0f}, A={batch.advantages[1]:.3f}, KL={batch.per_position_kl[1, 0]:.2f} > delta -> TRM gradient 0")
    assert batch.rho[1, 0] > 900 and batch.advantages[1] < 0
    assert batch.per_position_kl[1, 0] > delta
    assert all(np.all(g == 0) for g in grad)


def test_c11_scaling_exponents(record_property):
    T = 2.0 ** np.arange(4, 15)
    slopes = [
        np.polyfit(np.log(T), np.log(f(T)), 1)[0]
        for f in (
            lambda t: classical_bound(t, 1e-4),
            lambda t: pinsker_marginal_bound(t, 1e-4),
            lambda t: np.array([mixed_bound(x, 1e-4, 0.01) for x in t]),
        )
    ]
    record_property("detail", " / ".join(f"{s:.4f}" for s in slopes))
    assert T[0] == 16 and T[-1] == 16384
    for s, target in zip(slopes, (2.0, 1.5, 1.0)):
        assert abs(s - target) <= 0.01


def test_c12_determinism(tmp_path, record_property):
    verify = ["verify", "--grid", "single", "--pairs", "150", "--vocab", "3", "--horizon", "4", "--scale", "1.0", "--seed", "11"]
    trm = ["trm-run", "--steps", "20", "--seed", "5", "--delta-avg", "0.005"]
    outputs = {}
    for tag, workers in (("a", "1"), ("b", "1"), ("c", "2"), ("d", "4")):
        assert run(verify + ["--workers", workers, "-o", str(tmp_path / tag)]) == 0
        assert run(trm + ["-o", str(tmp_path / tag)]) == 0
        outputs[tag] = {n: (tmp_path / tag / n).read_bytes() for n in ("summary.json", "pairs.csv", "trace.jsonl")}
    same = all(outputs[t] == outputs["a"] for t in outputs)
    record_property("detail", f"{len(outputs)} runs (workers 1,1,2,4), data files identical: {same}")
    assert same
