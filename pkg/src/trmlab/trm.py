"""Trust Region Masking: sequence-level masks from exact per-token KL, and its training loop.

A sampled sequence is kept only if every visited context satisfies
KL(pi_roll(.|c_t) || pi_theta(.|c_t)) <= delta. Kept sequences enter the
surrogate gradient with weight 1/N, N being the full batch size.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .bounds import adaptive_bound
from .divergence import divergence_report, kl_rows, kl_token
from .objectives import surrogate, surrogate_gradient, true_objective
from .tabular import (
    ProblemShape,
    RewardTable,
    TabularPolicy,
    Trajectory,
    TrajectoryBatch,
    all_trajectories,
    build_context_tree,
    leaf_distribution,
    make_trajectory,
    random_rewards,
    random_softmax_policy,
    sample_trajectories,
)

MODES = ("exact", "exact-avg-only", "sample-abslog-max", "sample-k3-avg")
APPROXIMATE_MODES = ("sample-abslog-max", "sample-k3-avg")


# -- single-sample KL estimators ------------------------------------------------


class EstimatorSample(NamedTuple):
    rho: float
    k1: float
    k3: float
    abs_log: float


def _k3(log_rho: np.ndarray) -> np.ndarray:
    x = np.asarray(log_rho, dtype=np.float64)
    small = np.abs(x) < 1e-3
    series = x * x * (0.5 + x * (1 / 6 + x * (1 / 24 + x * (1 / 120 + x / 720))))
    with np.errstate(over="ignore"):
        direct = np.expm1(x) - x
    return np.where(small, series, direct)


def estimator_values(rho: float) -> EstimatorSample:
    """k1 = -log rho, k3 = rho - 1 - log rho, and |log rho| at one ratio."""
    if not rho > 0:
        raise ValueError(f"importance ratio must be positive, got {rho}")
    x = math.log(rho)
    return EstimatorSample(float(rho), 0.0 - x, float(_k3(x)), abs(x))


ESTIMATORS = ("k1", "k3", "abs_log")


def estimator_expectation(roll_row, theta_row, which: str) -> float:
    """Exact E_{y ~ roll}[f(rho(y))] with rho = theta/roll."""
    p = np.asarray(roll_row, dtype=np.float64)
    q = np.asarray(theta_row, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("length mismatch")
    if which not in ESTIMATORS:
        raise ValueError(f"unknown estimator {which!r}; choose from {ESTIMATORS}")
    support = p > 0
    if np.any(support & (q <= 0)):
        return math.inf
    x = np.log(q[support]) - np.log(p[support])
    f = {"k1": -x, "k3": _k3(x), "abs_log": np.abs(x)}[which]
    return float(np.sum(p[support] * f))


def estimator_table(rhos=(0.5, 1.0, 2.0, 10.0, 100.0)) -> list[dict]:
    return [estimator_values(r)._asdict() for r in rhos]


# -- PPO clipping comparison -----------------------------------------------------


class ClipResult(NamedTuple):
    value: float
    gradient: float
    leak_class: str
    cell: str


def ppo_clip_value_and_grad(rho: float, advantage: float, epsilon: float) -> ClipResult:
    """min(rho A, clip(rho, 1-eps, 1+eps) A), its derivative in rho, and which branch won.

    ``cell`` names the row of the gradient-leakage table: ``"high+"``,
    ``"low-"`` (clipped), ``"high-"``, ``"low+"`` (unclipped, gradient A) or
    ``"interior"``.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    lo, hi = 1 - epsilon, 1 + epsilon
    unclipped = rho * advantage
    clipped = min(max(rho, lo), hi) * advantage
    if lo <= rho <= hi:
        return ClipResult(unclipped, advantage, "unclipped", "interior")
    side = "high" if rho > hi else "low"
    sign = "+" if advantage > 0 else "-"
    if clipped < unclipped:
        return ClipResult(clipped, 0.0, "clipped", side + sign)
    return ClipResult(unclipped, advantage, "unclipped", side + sign)


# -- masking -------------------------------------------------------------------


def per_position_kls(roll: TabularPolicy, theta: TabularPolicy, traj: Trajectory) -> np.ndarray:
    """Exact full-vocabulary KL at each context the trajectory visits."""
    roll.tree.check_same(theta.tree)
    expected = make_trajectory(roll.tree, traj.prompt, traj.tokens)
    if expected.context_ids != tuple(traj.context_ids):
        raise ValueError("trajectory does not belong to this tree")
    idx = roll.tree.path_indices(traj.tokens)
    return np.array(
        [kl_rows(roll.rows[t][traj.prompt, j], theta.rows[t][traj.prompt, j]) for t, j in enumerate(idx)],
        dtype=np.float64,
    )


def batch_position_kls(roll: TabularPolicy, theta: TabularPolicy, batch: TrajectoryBatch) -> np.ndarray:
    kl = tuple(kl_rows(a, b) for a, b in zip(roll.rows, theta.rows))
    return batch.gather_contexts(kl)


@dataclass(frozen=True)
class MaskedBatch:
    trajectories: TrajectoryBatch
    advantages: np.ndarray
    roll_token_probs: np.ndarray
    theta_token_probs: np.ndarray
    per_position_kl: np.ndarray
    mask_max: np.ndarray
    mask_avg: np.ndarray | None
    mask: np.ndarray
    delta: float
    delta_avg: float | None
    mode: str

    @property
    def n_total(self) -> int:
        return len(self.trajectories)

    @property
    def n_accepted(self) -> int:
        return int(self.mask.sum())

    @property
    def mask_rate(self) -> float:
        return self.n_accepted / self.n_total

    @property
    def approximate(self) -> bool:
        return self.mode in APPROXIMATE_MODES

    @property
    def rho(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.theta_token_probs / self.roll_token_probs

    def max_kl_accepted(self) -> float:
        if not self.mask.any():
            return 0.0
        return float(self.per_position_kl[self.mask].max())

    def surrogate_estimate(self) -> float:
        """(1/N) sum_i M_i A_i sum_t rho_t."""
        contrib = np.where(self.mask, self.advantages * self.rho.sum(axis=1), 0.0)
        return float(contrib.sum() / self.n_total)


def prepare_batch(
    roll: TabularPolicy,
    theta: TabularPolicy,
    trajectories: TrajectoryBatch,
    rewards: RewardTable,
    baseline: float | None = None,
) -> MaskedBatch:
    """Attach advantages, token probabilities and exact per-position KLs; every mask starts at 1."""
    b = true_objective(roll, rewards) if baseline is None else float(baseline)
    adv = rewards.values[trajectories.prompts, trajectories.leaf_index()] - b
    ones = np.ones(len(trajectories), dtype=bool)
    return MaskedBatch(
        trajectories=trajectories,
        advantages=adv,
        roll_token_probs=trajectories.gather(roll.rows),
        theta_token_probs=trajectories.gather(theta.rows),
        per_position_kl=batch_position_kls(roll, theta, trajectories),
        mask_max=ones,
        mask_avg=None,
        mask=ones,
        delta=math.inf,
        delta_avg=None,
        mode="exact",
    )


def _mask_rule(kl: np.ndarray, rho: np.ndarray, delta: float, delta_avg: float | None, mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_rho = np.log(rho)
    if mode.startswith("sample"):
        max_stat = np.abs(log_rho).max(axis=1)
        avg_stat = _k3(log_rho).mean(axis=1)
    else:
        max_stat = kl.max(axis=1)
        avg_stat = kl.mean(axis=1)
    # a flagged (infinite / nan) statistic never passes
    mask_max = np.isfinite(max_stat) & (max_stat <= delta)
    mask_avg = None
    if mode in ("exact-avg-only", "sample-k3-avg"):
        threshold = delta if delta_avg is None else delta_avg
        mask_avg = np.isfinite(avg_stat) & (avg_stat <= threshold)
        return mask_max, mask_avg, mask_avg.copy()
    if delta_avg is not None:
        mask_avg = np.isfinite(avg_stat) & (avg_stat <= delta_avg)
        return mask_max, mask_avg, mask_max & mask_avg
    return mask_max, None, mask_max.copy()


def apply_masks(
    batch: MaskedBatch,
    delta: float,
    delta_avg: float | None = None,
    mode: str = "exact",
) -> MaskedBatch:
    """Sequence masks. With both thresholds in an exact/max mode a sequence must pass both."""
    mask_max, mask_avg, mask = _mask_rule(batch.per_position_kl, batch.rho, delta, delta_avg, mode)
    return dataclasses.replace(
        batch, mask_max=mask_max, mask_avg=mask_avg, mask=mask, delta=delta, delta_avg=delta_avg, mode=mode
    )


def masked_surrogate_gradient(batch: MaskedBatch, theta: TabularPolicy) -> tuple[np.ndarray, ...]:
    """(1/N) sum_i M_i A_i sum_t rho_t grad log pi_theta(y_t|c_t), per-depth logit gradients."""
    traj = batch.trajectories
    tree = traj.tree
    N = batch.n_total
    keep = np.flatnonzero(batch.mask)
    grads = [np.zeros_like(r) for r in theta.rows]
    if keep.size == 0:
        return tuple(grads)
    rho = batch.rho[keep]
    coef = (batch.advantages[keep][:, None] * rho) / N
    prompts = traj.prompts[keep]
    for t in range(tree.horizon):
        ctx = traj.context_index[keep, t]
        rows = theta.rows[t][prompts, ctx]
        onehot = np.zeros_like(rows)
        onehot[np.arange(keep.size), traj.tokens[keep, t]] = 1.0
        # np.add.at accumulates in index order: fixed reduction order
        np.add.at(grads[t], (prompts, ctx), coef[:, t, None] * (onehot - rows))
    return tuple(grads)


def verify_mask_soundness(roll: TabularPolicy, theta: TabularPolicy, batch: MaskedBatch) -> int:
    """Recompute KL position by position for every accepted sequence; count those above delta."""
    bad = 0
    for i in np.flatnonzero(batch.mask):
        prompt = int(batch.trajectories.prompts[i])
        tokens = batch.trajectories.tokens[i]
        ctx = 0
        worst = 0.0
        for t, y in enumerate(tokens):
            worst = max(worst, kl_token(roll.rows[t][prompt, ctx], theta.rows[t][prompt, ctx]))
            ctx = ctx * roll.tree.vocab_size + int(y)
        if not worst <= batch.delta:
            bad += 1
    return bad


def exact_masked_surrogate(
    roll: TabularPolicy,
    theta: TabularPolicy,
    rewards: RewardTable,
    delta: float,
    delta_avg: float | None = None,
    mode: str = "exact",
    baseline: float | None = None,
) -> tuple[float, float]:
    """E_roll[M A sum_t rho_t] over every leaf, and the roll-probability of M = 1."""
    leaves = all_trajectories(roll.tree)
    b = true_objective(roll, rewards) if baseline is None else float(baseline)
    full = prepare_batch(roll, theta, leaves, rewards, b)
    masked = apply_masks(full, delta, delta_avg, mode)
    w = leaf_distribution(roll).ravel()
    rejected = ~masked.mask & (w > 0)
    # L minus the rejected sequences' share, so L_masked == L exactly when nothing is masked
    rho = np.where(rejected[:, None], full.rho, 0.0)
    dropped = float(np.sum(np.where(rejected, w * full.advantages * rho.sum(axis=1), 0.0)))
    return surrogate(roll, theta, rewards, baseline=b) - dropped, float(np.sum(w[masked.mask]))


def sgd_step(theta: TabularPolicy, grads, learning_rate: float) -> TabularPolicy:
    """Plain gradient ascent on logits."""
    if not theta.has_logits:
        raise ValueError("SGD needs a softmax-parameterized policy")
    return TabularPolicy.from_logits(
        theta.tree, [l + learning_rate * g for l, g in zip(theta.logits, grads)]
    )


def exact_ascent(roll: TabularPolicy, rewards: RewardTable, steps: int, learning_rate: float) -> TabularPolicy:
    """``steps`` exact surrogate-gradient ascent steps starting from roll."""
    theta = roll
    for _ in range(steps):
        theta = sgd_step(theta, surrogate_gradient(roll, theta, rewards), learning_rate)
    return theta


# -- training loop -------------------------------------------------------------


@dataclass(frozen=True)
class TRMConfig:
    vocab_size: int = 2
    horizon: int = 4
    n_prompts: int = 1
    roll_scale: float = 1.0
    init_sigma: float = 0.0
    delta: float = 1e-2
    delta_avg: float | None = None
    mode: str = "exact"
    learning_rate: float = 0.05
    steps: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.delta < 0 or (self.delta_avg is not None and self.delta_avg < 0):
            raise ValueError("thresholds must be >= 0")


def config_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Named child seeds of the root seed; batch ``k`` uses ``SeedSequence([seed, 1000 + k])``."""
    roll, rewards, init = np.random.SeedSequence(seed).spawn(3)
    return {"roll": roll, "rewards": rewards, "init": init}


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def make_problem(config: TRMConfig) -> tuple[TabularPolicy, RewardTable, TabularPolicy]:
    probs = tuple(np.full(config.n_prompts, 1.0 / config.n_prompts))
    tree = build_context_tree(ProblemShape(config.vocab_size, config.horizon, probs))
    streams = config_streams(config.seed)
    roll = random_softmax_policy(tree, config.roll_scale, _seed_int(streams["roll"]))
    rewards = random_rewards(tree, _seed_int(streams["rewards"]))
    theta = roll
    if config.init_sigma > 0:
        noise = random_softmax_policy(tree, config.init_sigma, _seed_int(streams["init"]))
        theta = TabularPolicy.from_flat_logits(tree, roll.flat_logits() + noise.flat_logits())
    return roll, rewards, theta


def trm_training_loop(config: TRMConfig) -> list[dict]:
    """Run TRM from ``make_problem(config)``; one record per step, taken before that step's update.

    Each record carries the sampled masked surrogate, exact L / L_masked /
    J values, the exact minorizer ``L - adaptive bound`` and a
    ``violation`` flag that is set when the minorizer is positive but J did
    not improve. ``masked_cert_*`` fields evaluate the masked-surrogate certificate
    with delta and with the realized max KL of the accepted sequences.
    """
    roll, rewards, theta = make_problem(config)
    T = config.horizon
    j_roll = true_objective(roll, rewards)
    trace = []
    for step in range(config.steps):
        batch_traj = sample_trajectories(roll, config.batch_size, [config.seed, 1000 + step])
        batch = prepare_batch(roll, theta, batch_traj, rewards, baseline=j_roll)
        batch = apply_masks(batch, config.delta, config.delta_avg, config.mode)

        div = divergence_report(roll, theta)
        j_theta = true_objective(theta, rewards)
        L = surrogate(roll, theta, rewards, baseline=j_roll)
        bound = adaptive_bound(T, div.kl_tok_max, div.seq_kl)
        minorizer = L - bound
        l_masked, accept_prob = exact_masked_surrogate(
            roll, theta, rewards, config.delta, config.delta_avg, config.mode, baseline=j_roll
        )
        realized = batch.max_kl_accepted()
        masked_cert_delta = adaptive_bound(T, config.delta, div.seq_kl)
        masked_cert_real = adaptive_bound(T, realized, div.seq_kl)
        soundness = 0 if batch.approximate else verify_mask_soundness(roll, theta, batch)
        trace.append(
            {
                "step": step,
                "mode": config.mode,
                "approximate": batch.approximate,
                "L_masked_sample": batch.surrogate_estimate(),
                "L_masked_exact": l_masked,
                "L_exact": L,
                "J_theta": j_theta,
                "J_roll": j_roll,
                "kl_tok_max": div.kl_tok_max,
                "seq_kl": div.seq_kl,
                "adaptive_bound": bound,
                "minorizer": minorizer,
                "mask_rate": batch.mask_rate,
                "accept_prob_exact": accept_prob,
                "n_accepted": batch.n_accepted,
                "max_kl_accepted": realized,
                "masked_cert_bound_delta": masked_cert_delta,
                "masked_cert_bound_realized": masked_cert_real,
                "masked_cert_certified_delta": l_masked > masked_cert_delta,
                "masked_cert_certified_realized": l_masked > masked_cert_real,
                "soundness_violations": soundness,
                "violation": bool(minorizer > 0 and not j_theta > j_roll),
            }
        )
        if config.learning_rate != 0:
            theta = sgd_step(theta, masked_surrogate_gradient(batch, theta), config.learning_rate)
    return trace
