"""Adversarial instances: divergence concentrated on one rare context, and token masking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import bisect

from .bounds import adaptive_bound, bound_report
from .divergence import divergence_report, kl_token
from .objectives import surrogate_gradient
from .tabular import ProblemShape, RewardTable, TabularPolicy, build_context_tree, random_rewards

CONTRAST_FLOOR = 1e-12
HOT_DEPTH = 2


@dataclass(frozen=True)
class ConcentratedPairSpec:
    epsilon: float
    hot_kl: float = 1.0
    shape: ProblemShape = field(default_factory=lambda: ProblemShape(2, 3))

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if not self.hot_kl > 0:
            raise ValueError("hot_kl must be positive")
        if self.shape.horizon < HOT_DEPTH:
            raise ValueError("the hot context sits at depth 2; horizon must be >= 2")


def contrast_row(vocab_size: int) -> np.ndarray:
    q = np.full(vocab_size, CONTRAST_FLOOR)
    q[0] = 1.0 - (vocab_size - 1) * CONTRAST_FLOOR
    return q


def solve_hot_row(base: np.ndarray, hot_kl: float) -> np.ndarray:
    """Row on the segment from ``base`` toward a near-one-hot row with KL(base || row) = hot_kl."""
    q = contrast_row(base.size)
    kl_at = lambda lam: kl_token(base, (1 - lam) * base + lam * q) - hot_kl  # noqa: E731
    top = kl_at(1.0) + hot_kl
    if hot_kl >= top:
        raise ValueError(f"hot_kl={hot_kl} not reachable for V={base.size}; achievable range is (0, {top:.6g})")
    lam = bisect(kl_at, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return (1 - lam) * base + lam * q


def build_concentrated_pair(spec: ConcentratedPairSpec) -> tuple[TabularPolicy, TabularPolicy]:
    """Identical uniform policies except at one depth-2 context visited with probability epsilon.

    The root row of the first prompt sends ``epsilon / P(x0)`` of its mass to
    token 0; the hot context is ``(x0, y_1 = 0)``.
    """
    tree = build_context_tree(spec.shape)
    V, P = tree.vocab_size, tree.n_prompts
    branch = spec.epsilon / tree.prompt_probs[0]
    if branch > 1 + 1e-15:
        raise ValueError(f"epsilon={spec.epsilon} exceeds the first prompt's probability")
    branch = min(branch, 1.0)
    rows = [np.full((P, n, V), 1.0 / V) for n in tree.level_sizes]
    root = np.full(V, (1.0 - branch) / (V - 1))
    root[0] = branch
    rows[0][0, 0] = root
    theta_rows = [r.copy() for r in rows]
    theta_rows[HOT_DEPTH - 1][0, 0] = solve_hot_row(rows[HOT_DEPTH - 1][0, 0], spec.hot_kl)
    if np.all(root > 0):
        return (
            TabularPolicy(tree, tuple(rows), tuple(np.log(r) for r in rows)),
            TabularPolicy(tree, tuple(theta_rows), tuple(np.log(r) for r in theta_rows)),
        )
    return TabularPolicy.degenerate(tree, rows), TabularPolicy.degenerate(tree, theta_rows)


def concentrated_sweep(
    epsilons: Iterable[float] = (0.1, 0.01, 0.001),
    hot_kl: float = 1.0,
    shape: ProblemShape | None = None,
    reward_seed: int = 0,
) -> list[dict]:
    """One row per epsilon: divergences, the three bounds, and the exact error."""
    shape = ProblemShape(2, 3) if shape is None else shape
    rows = []
    for eps in epsilons:
        roll, theta = build_concentrated_pair(ConcentratedPairSpec(eps, hot_kl, shape))
        rep = bound_report(roll, theta, random_rewards(roll.tree, reward_seed))
        rows.append(
            {
                "epsilon": eps,
                "seq_kl": rep.kl_seq,
                "kl_tok_max": rep.kl_tok_max,
                "classical": rep.classical,
                "pinsker_marginal": rep.pinsker_marginal,
                "mixed": rep.mixed,
                "actual_error": rep.actual_error,
            }
        )
    return rows


def non_boundability_witness(
    f: Callable[[float], float],
    epsilons: Iterable[float],
    hot_kl: float = 1.0,
    shape: ProblemShape | None = None,
) -> float | None:
    """First epsilon whose pair has ``f(seq_kl) < kl_tok_max``; None if f survives the sweep."""
    shape = ProblemShape(2, 3) if shape is None else shape
    for eps in epsilons:
        div = divergence_report(*build_concentrated_pair(ConcentratedPairSpec(eps, hot_kl, shape)))
        if f(div.seq_kl) < div.kl_tok_max:
            return eps
    return None


@dataclass(frozen=True)
class TokenMaskingReport:
    masked_positions: tuple[int, ...]
    grad_masked: np.ndarray
    grad_unmasked: np.ndarray
    kl_tok_max_before: float
    kl_tok_max_after: float
    bound_before: float
    bound_after: float

    @property
    def gradient_changed(self) -> bool:
        return not np.array_equal(self.grad_masked, self.grad_unmasked)


def token_masking_demo(
    roll: TabularPolicy,
    theta: TabularPolicy,
    masked_positions: Iterable[int],
    rewards: RewardTable,
) -> TokenMaskingReport:
    """Exact expected gradient with steps ``masked_positions`` (1-based) dropped, next to the full one.

    The divergences are recomputed after masking; they take no mask input,
    so masking tokens leaves the token-max KL and the bound where they were.
    """
    T = roll.tree.horizon
    masked = tuple(sorted(set(int(t) for t in masked_positions)))
    if any(not 1 <= t <= T for t in masked):
        raise ValueError(f"positions must lie in 1..{T}")
    keep = [t + 1 not in masked for t in range(T)]
    before = divergence_report(roll, theta)
    g_full = roll.tree.join_levels(surrogate_gradient(roll, theta, rewards))
    g_mask = roll.tree.join_levels(surrogate_gradient(roll, theta, rewards, position_mask=keep))
    after = divergence_report(roll, theta)
    return TokenMaskingReport(
        masked_positions=masked,
        grad_masked=g_mask,
        grad_unmasked=g_full,
        kl_tok_max_before=before.kl_tok_max,
        kl_tok_max_after=after.kl_tok_max,
        bound_before=adaptive_bound(T, before.kl_tok_max, before.seq_kl),
        bound_after=adaptive_bound(T, after.kl_tok_max, after.seq_kl),
    )
