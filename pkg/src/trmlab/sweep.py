"""Brute-force certification of the error bounds and the lemmas behind them.

Pair ``i`` of a cell with root seed ``s`` uses ``SeedSequence([s, i])``,
spawned into (roll, theta, rewards) streams. Results therefore do not depend
on how pairs are spread over worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundReport, bounds_from
from .divergence import EQ_TOL, INEQ_SLACK, divergence_report
from .objectives import (
    PDI_TOL,
    advantage_bound_slack,
    advantage_table,
    error_decomposition,
    martingale_residual,
)
from .perturbation import PerturbationSpec, perturb
from .serialization import pair_to_dict
from .tabular import (
    ProblemShape,
    RewardTable,
    TabularPolicy,
    build_context_tree,
    random_rewards,
    random_softmax_policy,
)

MARTINGALE_TOL = 1e-12
PAIR_KINDS = ("softmax", "logit_noise", "routing_flip", "staleness")


@dataclass(frozen=True)
class SweepCell:
    """One block of pairs. ``scale`` is the theta-minus-roll logit noise for
    ``softmax`` pairs and ``sigma`` for ``logit_noise`` pairs."""

    vocab_size: int
    horizon: int
    scale: float
    n_pairs: int
    seed: int
    kind: str = "softmax"
    n_prompts: int = 1
    roll_scale: float = 1.0
    flip_prob: float = 0.3
    collapse_factor: float = 0.9
    hard: bool = False
    k_steps: int = 3
    learning_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}; choose from {PAIR_KINDS}")


def _seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def make_pair(cell: SweepCell, index: int) -> tuple[TabularPolicy, TabularPolicy, RewardTable]:
    probs = tuple(np.full(cell.n_prompts, 1.0 / cell.n_prompts))
    tree = build_context_tree(ProblemShape(cell.vocab_size, cell.horizon, probs))
    s_roll, s_theta, s_rew = np.random.SeedSequence([cell.seed, index]).spawn(3)
    roll = random_softmax_policy(tree, cell.roll_scale, _seed(s_roll))
    rewards = random_rewards(tree, _seed(s_rew))
    if cell.kind == "softmax":
        noise = random_softmax_policy(tree, cell.scale, _seed(s_theta))
        theta = TabularPolicy.from_flat_logits(tree, roll.flat_logits() + noise.flat_logits())
    else:
        spec = PerturbationSpec(
            kind=cell.kind,
            sigma=cell.scale,
            flip_prob=cell.flip_prob,
            collapse_factor=cell.collapse_factor,
            hard=cell.hard,
            k_steps=cell.k_steps,
            learning_rate=cell.learning_rate,
            seed=_seed(s_theta),
        )
        theta = perturb(roll, spec, rewards)
    return roll, theta, rewards


@dataclass
class PairResult:
    cell: int
    index: int
    bounds: BoundReport
    chain_residual: float
    pdi_residual: float
    martingale_residual: float
    advantage_slack: float
    marginal_kl_slack: float
    simulation_slack: float
    failures: list[str] = field(default_factory=list)

    def row(self) -> dict:
        b = self.bounds
        r = b.ratios()
        return {
            "cell": self.cell,
            "index": self.index,
            "kl_tok_max": b.kl_tok_max,
            "kl_seq": b.kl_seq,
            "actual_error": b.actual_error,
            "classical": b.classical,
            "pinsker_marginal": b.pinsker_marginal,
            "mixed": b.mixed,
            "minorizer": b.minorizer,
            "ratio_classical": r.get("classical", ""),
            "ratio_pinsker_marginal": r.get("pinsker_marginal", ""),
            "ratio_mixed": r.get("mixed", ""),
            "chain_residual": self.chain_residual,
            "pdi_residual": self.pdi_residual,
            "martingale_residual": self.martingale_residual,
            "advantage_slack": self.advantage_slack,
            "failures": ";".join(self.failures),
        }


def check_pair(roll: TabularPolicy, theta: TabularPolicy, rewards: RewardTable, cell: int = 0, index: int = 0) -> PairResult:
    """Every bound, identity and lemma on one exactly enumerated pair."""
    div = divergence_report(roll, theta)
    obj = error_decomposition(roll, theta, rewards)
    adv = advantage_table(roll, theta, rewards)
    rep = bounds_from(div, obj)

    failures = list(rep.violations(INEQ_SLACK))
    chain = div.chain_rule_residual()
    if not chain <= EQ_TOL:
        failures.append("chain_rule")
    pdi = obj.identity_residual
    if not pdi <= PDI_TOL:
        failures.append("pdi_identity")
    mart = martingale_residual(roll, adv)
    if not mart <= MARTINGALE_TOL:
        failures.append("martingale")
    slack = advantage_bound_slack(roll, theta, adv)
    if not slack >= -INEQ_SLACK:
        failures.append("advantage_bound")
    steps = np.arange(div.horizon)
    with np.errstate(invalid="ignore"):
        mk_slack = float(np.min(steps * div.kl_tok_max - div.marginal_kl)) if div.finite else 0.0
    if not mk_slack >= -INEQ_SLACK:
        failures.append("marginal_kl_bound")
    sim_slack = float(np.min(steps * div.tv_tok_max - div.marginal_tv))
    if not sim_slack >= -INEQ_SLACK:
        failures.append("simulation_lemma")
    if rep.minorizer > 0 and not obj.j_theta > obj.j_roll:
        failures.append("monotonic_improvement")
    return PairResult(cell, index, rep, chain, pdi, mart, slack, mk_slack, sim_slack, failures)


def _run_one(task):
    ci, cell, i = task
    roll, theta, rewards = make_pair(cell, i)
    res = check_pair(roll, theta, rewards, ci, i)
    bundle = None
    if res.failures:
        bundle = pair_to_dict(
            roll, theta, rewards, cell=cell.__dict__, index=i, failures=res.failures, report=res.row()
        )
    return res, bundle


@dataclass
class SweepSummary:
    n_pairs: int
    n_checked_ratios: dict
    max_ratio: dict
    max_chain_residual: float
    max_pdi_residual: float
    max_martingale_residual: float
    min_advantage_slack: float
    n_minorizer_positive: int
    violations: list
    rows: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self, include_rows: bool = False) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "rows"}
        d["violations"] = [v["failures"] for v in self.violations]
        d["n_violations"] = len(self.violations)
        if include_rows:
            d["rows"] = self.rows
        return d


def dominance_sweep(cells: list[SweepCell], workers: int = 1) -> SweepSummary:
    """Enumerate every pair of every cell and check dominance plus the supporting lemmas."""
    tasks = [(ci, cell, i) for ci, cell in enumerate(cells) for i in range(cell.n_pairs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        results = [_run_one(t) for t in tasks]

    names = ("classical", "pinsker_marginal", "mixed")
    max_ratio = {n: 0.0 for n in names}
    n_ratio = {n: 0 for n in names}
    rows, violations = [], []
    n_pos = 0
    max_chain = max_pdi = max_mart = 0.0
    min_slack = math.inf
    for res, bundle in results:
        for n, r in res.bounds.ratios().items():
            max_ratio[n] = max(max_ratio[n], r)
            n_ratio[n] += 1
        max_chain = max(max_chain, res.chain_residual)
        max_pdi = max(max_pdi, res.pdi_residual)
        max_mart = max(max_mart, res.martingale_residual)
        min_slack = min(min_slack, res.advantage_slack)
        n_pos += res.bounds.minorizer > 0
        rows.append(res.row())
        if bundle is not None:
            violations.append(bundle)
    return SweepSummary(
        n_pairs=len(results),
        n_checked_ratios=n_ratio,
        max_ratio=max_ratio,
        max_chain_residual=max_chain,
        max_pdi_residual=max_pdi,
        max_martingale_residual=max_mart,
        min_advantage_slack=min_slack,
        n_minorizer_positive=int(n_pos),
        violations=violations,
        rows=rows,
    )


def acceptance_cells(seed: int = 7, pairs_per_cell: int = 210, perturbation_pairs: int = 120) -> list[SweepCell]:
    """Softmax pairs over V in {2,3}, T in {2..5}, scale in {0.1, 0.3, 1.0}, plus each perturbation kind."""
    cells = []
    k = 0
    for V in (2, 3):
        for T in (2, 3, 4, 5):
            for scale in (0.1, 0.3, 1.0):
                cells.append(SweepCell(V, T, scale, pairs_per_cell, seed=seed * 1000 + k))
                k += 1
    per = perturbation_pairs // 4
    for V, T in ((2, 3), (2, 5), (3, 3), (3, 4)):
        cells.append(SweepCell(V, T, 0.3, per, seed=seed * 1000 + k, kind="logit_noise"))
        cells.append(SweepCell(V, T, 0.0, per, seed=seed * 1000 + k + 1, kind="routing_flip"))
        cells.append(SweepCell(V, T, 0.0, per, seed=seed * 1000 + k + 2, kind="staleness"))
        k += 3
    return cells
