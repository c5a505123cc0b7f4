"""True objective, sum-of-ratios surrogate, per-step advantages and the error identity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .divergence import tv_rows
from .tabular import (
    RewardTable,
    TabularPolicy,
    leaf_distribution,
    path_token_probs,
    visitation_levels,
)

PDI_TOL = 1e-9


def _check(policy: TabularPolicy, rewards: RewardTable) -> None:
    policy.tree.check_same(rewards.tree)


def true_objective(policy: TabularPolicy, rewards: RewardTable) -> float:
    """J(pi) = E_x E_{y ~ pi(.|x)} R(x, y), summed over every leaf."""
    _check(policy, rewards)
    return float(np.sum(leaf_distribution(policy) * rewards.values))


def _resolve_baseline(roll: TabularPolicy, rewards: RewardTable, baseline: float | None) -> float:
    if baseline is not None:
        return float(baseline)
    if rewards.baseline is not None:
        return float(rewards.baseline)
    return true_objective(roll, rewards)


def ratio_sums(roll: TabularPolicy, theta: TabularPolicy) -> np.ndarray:
    """sum_t rho_t for every leaf, shape ``(P, V**T)``; 0 on leaves outside roll's support."""
    tree = roll.tree
    total = np.zeros((tree.n_prompts, tree.leaves_per_prompt))
    for t, (r, q) in enumerate(zip(roll.rows, theta.rows), start=1):
        rho = np.divide(q, r, out=np.zeros_like(q), where=r > 0)
        total += tree.expand_to_leaves(rho.reshape(tree.n_prompts, -1), t)
    return total


def _leaks_outside_roll_support(roll: TabularPolicy, theta: TabularPolicy) -> bool:
    d = visitation_levels(roll)
    for t, (r, q) in enumerate(zip(roll.rows, theta.rows)):
        leak = np.any((r <= 0) & (q > 0), axis=-1) & (d[t] > 0)
        if np.any(leak):
            return True
    return False


def surrogate(
    roll: TabularPolicy,
    theta: TabularPolicy,
    rewards: RewardTable,
    baseline: float | None = None,
) -> float:
    """L(theta) = E_roll[(R - b) * sum_t rho_t], exact over all leaves.

    ``baseline=None`` falls back to ``rewards.baseline`` and then to J(roll).
    Returns ``inf`` when theta puts mass on a token roll never emits at a
    reachable context, where the importance ratio is unbounded.
    """
    roll.tree.check_same(theta.tree)
    _check(roll, rewards)
    if _leaks_outside_roll_support(roll, theta):
        return math.inf
    b = _resolve_baseline(roll, rewards, baseline)
    w = leaf_distribution(roll)
    T = roll.tree.horizon
    # centered ratios: exactly 0 at theta == roll when b == J(roll), instead of rounding noise
    excess = np.where(w > 0, ratio_sums(roll, theta) - T, 0.0)
    shift = T * (float(np.sum(w * rewards.values)) - b)
    return float(np.sum(w * (rewards.values - b) * excess)) + shift


@dataclass(frozen=True)
class AdvantageTable:
    """Per-depth tables: ``q``/``a`` are ``(P, V**(t-1), V)``, ``v``/``g`` are ``(P, V**(t-1))``."""

    q: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    a: tuple[np.ndarray, ...]
    g: tuple[np.ndarray, ...]


def roll_q_values(roll: TabularPolicy, rewards: RewardTable) -> tuple[np.ndarray, ...]:
    """Q(c_t, y_t) = E_roll[R | c_t, y_t] by backward induction."""
    _check(roll, rewards)
    tree = roll.tree
    P, V = tree.n_prompts, tree.vocab_size
    value = rewards.values
    qs = []
    for t in range(tree.horizon, 0, -1):
        q = value.reshape(P, -1, V)
        qs.append(q)
        value = np.sum(roll.rows[t - 1] * q, axis=-1)
    return tuple(reversed(qs))


def q_by_enumeration(roll: TabularPolicy, rewards: RewardTable) -> tuple[np.ndarray, ...]:
    """Q(c_t, y_t) by summing suffix-probability-weighted rewards over each subtree."""
    tree = roll.tree
    P, V, T = tree.n_prompts, tree.vocab_size, tree.horizon
    probs = path_token_probs(roll).reshape(P, tree.leaves_per_prompt, T)
    r = rewards.values
    out = []
    for t in range(1, T + 1):
        suffix = np.prod(probs[:, :, t:], axis=-1)
        q = (suffix * r).reshape(P, V**t, V ** (T - t)).sum(axis=-1)
        out.append(q.reshape(P, V ** (t - 1), V))
    return tuple(out)


def advantage_table(roll: TabularPolicy, theta: TabularPolicy, rewards: RewardTable) -> AdvantageTable:
    roll.tree.check_same(theta.tree)
    qs = roll_q_values(roll, rewards)
    vs, As, gs = [], [], []
    for q, r, th in zip(qs, roll.rows, theta.rows):
        v = np.sum(r * q, axis=-1)
        a = q - v[..., None]
        vs.append(v)
        As.append(a)
        gs.append(np.sum(th * a, axis=-1))
    return AdvantageTable(qs, tuple(vs), tuple(As), tuple(gs))


@dataclass(frozen=True)
class ObjectiveReport:
    j_roll: float
    j_theta: float
    surrogate_l: float
    baseline: float
    error: float
    pdi_terms: np.ndarray
    pdi_error: float

    @property
    def identity_residual(self) -> float:
        return abs(self.error - self.pdi_error)


def error_decomposition(roll: TabularPolicy, theta: TabularPolicy, rewards: RewardTable) -> ObjectiveReport:
    """Direct J - J - L next to the per-step performance-difference sum (baseline J(roll))."""
    j_roll = true_objective(roll, rewards)
    j_theta = true_objective(theta, rewards)
    L = surrogate(roll, theta, rewards, baseline=j_roll)
    adv = advantage_table(roll, theta, rewards)
    d_roll = visitation_levels(roll)
    d_theta = visitation_levels(theta)
    terms = np.array(
        [float(np.sum(dt * g) - np.sum(dr * g)) for dt, dr, g in zip(d_theta, d_roll, adv.g)]
    )
    return ObjectiveReport(
        j_roll=j_roll,
        j_theta=j_theta,
        surrogate_l=L,
        baseline=j_roll,
        error=j_theta - j_roll - L,
        pdi_terms=terms,
        pdi_error=float(terms.sum()),
    )


def surrogate_gradient(
    roll: TabularPolicy,
    theta: TabularPolicy,
    rewards: RewardTable,
    position_mask=None,
) -> tuple[np.ndarray, ...]:
    """Exact gradient of L with respect to theta's logits, per depth.

    Each ratio contributes rho_t * grad log pi_theta(y_t|c_t); summing over
    the subtree gives ``d_t^roll(c) * theta(v|c) * (Q(c,v) - E_theta Q(c,.))``.
    The baseline cancels. ``position_mask[t-1] = False`` drops step ``t``.
    """
    roll.tree.check_same(theta.tree)
    qs = roll_q_values(roll, rewards)
    d_roll = visitation_levels(roll)
    grads = []
    for t, (q, th) in enumerate(zip(qs, theta.rows)):
        centered = q - np.sum(th * q, axis=-1, keepdims=True)
        g = d_roll[t][..., None] * th * centered
        if position_mask is not None and not position_mask[t]:
            g = np.zeros_like(g)
        grads.append(g)
    return tuple(grads)


@dataclass
class GradientCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_diff: float
    tolerance: float
    curvature_constant: float
    passed: bool
    richardson: bool = False
    cancellation_suspected: bool = False
    worst: list = field(default_factory=list)


def _objective_at(roll: TabularPolicy, rewards: RewardTable, flat: np.ndarray) -> float:
    return true_objective(TabularPolicy.from_flat_logits(roll.tree, flat), rewards)


def _central(f, x0: np.ndarray, h: float) -> np.ndarray:
    grad = np.empty(x0.size)
    flat = x0.ravel()
    for j in range(flat.size):
        x = flat.copy()
        x[j] = flat[j] + h
        fp = f(x.reshape(x0.shape))
        x[j] = flat[j] - h
        fm = f(x.reshape(x0.shape))
        grad[j] = (fp - fm) / (2 * h)
    return grad


def _third_differences(f, x0: np.ndarray, H: float) -> np.ndarray:
    out = np.empty(x0.size)
    flat = x0.ravel()
    for j in range(flat.size):
        vals = []
        for k in (2, 1, -1, -2):
            x = flat.copy()
            x[j] = flat[j] + k * H
            vals.append(f(x.reshape(x0.shape)))
        out[j] = (vals[0] - 2 * vals[1] + 2 * vals[2] - vals[3]) / (2 * H**3)
    return out


def gradient_check(
    roll: TabularPolicy,
    rewards: RewardTable,
    theta_logits: np.ndarray | None = None,
    step: float = 1e-4,
    top: int = 5,
) -> GradientCheckReport:
    """Compare the analytic surrogate gradient with central differences of J.

    The two agree only at theta = roll (the default). The pass threshold is
    ``C h^2 + 1e-8`` with ``C = max|f'''| / 6`` from third differences at a
    coarser step; a Richardson pass is tried before declaring failure.
    """
    if not roll.has_logits:
        raise ValueError("gradient checks need a softmax-parameterized roll policy")
    x0 = roll.flat_logits() if theta_logits is None else np.asarray(theta_logits, dtype=np.float64)
    theta = TabularPolicy.from_flat_logits(roll.tree, x0)
    analytic = roll.tree.join_levels(surrogate_gradient(roll, theta, rewards)).ravel()

    f = lambda x: _objective_at(roll, rewards, x)  # noqa: E731
    numeric = _central(f, x0, step)
    C = float(np.max(np.abs(_third_differences(f, x0, max(1e-2, 10 * step))))) / 6.0
    tol = C * step**2 + 1e-8

    half = _central(f, x0, step / 2)
    quarter = _central(f, x0, step / 4)
    d1 = np.max(np.abs(numeric - half))
    d2 = np.max(np.abs(half - quarter))
    # truncation error shrinks ~4x per halving; growth means round-off dominates
    cancellation = bool(d2 > d1 and d2 > 1e-12)

    diff = np.abs(analytic - numeric)
    richardson = False
    if diff.max() > tol:
        numeric = (4 * half - numeric) / 3
        diff = np.abs(analytic - numeric)
        richardson = True
    order = np.argsort(-diff)[:top]
    worst = [
        {
            "component": int(j),
            "node": int(j // roll.tree.vocab_size),
            "token": int(j % roll.tree.vocab_size),
            "analytic": float(analytic[j]),
            "numeric": float(numeric[j]),
            "abs_diff": float(diff[j]),
        }
        for j in order
    ]
    return GradientCheckReport(
        analytic=analytic,
        numeric=numeric,
        max_abs_diff=float(diff.max()),
        tolerance=tol,
        curvature_constant=C,
        passed=bool(diff.max() <= tol),
        richardson=richardson,
        cancellation_suspected=cancellation,
        worst=worst,
    )


def advantage_bound_slack(roll: TabularPolicy, theta: TabularPolicy, adv: AdvantageTable) -> float:
    """min over contexts of 2 TV(c) - |g_t(c)| (nonnegative when the lemma holds)."""
    return float(
        min(np.min(2 * tv_rows(r, q) - np.abs(g)) for r, q, g in zip(roll.rows, theta.rows, adv.g))
    )


def martingale_residual(roll: TabularPolicy, adv: AdvantageTable) -> float:
    """max over contexts of |E_{y ~ roll}[A_t(c, y)]|."""
    return float(max(np.max(np.abs(np.sum(r * a, axis=-1))) for r, a in zip(roll.rows, adv.a)))
