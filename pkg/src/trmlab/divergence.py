"""Exact token-, marginal- and sequence-level divergences between two tabular policies.

All KLs use the natural log and default to KL(pi_roll || pi_theta). An
absolute-continuity failure yields ``math.inf`` rather than an exception, so
TV-based checks keep running on support-collapsed pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tabular import TabularPolicy, visitation_levels

# equalities are asserted at EQ_TOL, inequalities get INEQ_SLACK of float noise
EQ_TOL = 1e-10
INEQ_SLACK = 1e-12


def _as_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def tv_rows(p, q) -> np.ndarray:
    p, q = _as_pair(p, q)
    return 0.5 * np.abs(p - q).sum(axis=-1)


def kl_rows(p, q) -> np.ndarray:
    """Row-wise KL(p || q) over the last axis; ``inf`` where p puts mass outside q's support."""
    p, q = _as_pair(p, q)
    support = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    out = np.where(np.any(support & (q <= 0), axis=-1), np.inf, out)
    # float noise can push identical-ish rows a hair below zero
    return np.maximum(out, 0.0)


def tv_token(p, q) -> float:
    """Total variation between two token distributions."""
    return float(tv_rows(p, q))


def kl_token(p_roll, p_theta) -> float:
    return float(kl_rows(p_roll, p_theta))


class PinskerGap(NamedTuple):
    tv_sq: float
    half_kl: float
    gap: float
    half_kl_rev: float
    gap_rev: float


def pinsker_gap(p, q) -> PinskerGap:
    """Slack in TV^2 <= KL/2 for KL(p||q) and for the reverse direction."""
    tv_sq = tv_token(p, q) ** 2
    half = 0.5 * kl_token(p, q)
    half_rev = 0.5 * kl_token(q, p)
    return PinskerGap(tv_sq, half, half - tv_sq, half_rev, half_rev - tv_sq)


def _weighted_sum(weights: np.ndarray, values: np.ndarray) -> float:
    # 0 * inf counts as 0: unreached contexts do not contribute
    mask = weights > 0
    return float(np.sum(weights[mask] * values[mask]))


@dataclass(frozen=True)
class DivergenceReport:
    per_context_tv: tuple[np.ndarray, ...]
    per_context_kl: tuple[np.ndarray, ...]
    per_context_kl_rev: tuple[np.ndarray, ...]
    tv_tok_max: float
    kl_tok_max: float
    kl_tok_max_rev: float
    expected_kl: np.ndarray
    marginal_kl: np.ndarray
    marginal_kl_chain: np.ndarray
    marginal_tv: np.ndarray
    seq_kl: float
    seq_kl_direct: float

    @property
    def horizon(self) -> int:
        return len(self.expected_kl)

    @property
    def kl_tok_max_sym(self) -> float:
        return min(self.kl_tok_max, self.kl_tok_max_rev)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.kl_tok_max)

    def chain_rule_residual(self) -> float:
        """Largest disagreement between direct and chain-rule marginal/sequence KLs."""
        if not (math.isfinite(self.seq_kl) and math.isfinite(self.seq_kl_direct)):
            return 0.0 if self.seq_kl == self.seq_kl_direct else math.inf
        res = np.abs(self.marginal_kl - self.marginal_kl_chain)
        return float(max(res.max(), abs(self.seq_kl - self.seq_kl_direct)))


def marginal_kl_direct(d_roll: np.ndarray, d_theta: np.ndarray) -> float:
    return float(kl_rows(d_roll.ravel(), d_theta.ravel()))


def divergence_report(roll: TabularPolicy, theta: TabularPolicy) -> DivergenceReport:
    roll.tree.check_same(theta.tree)
    tv = tuple(tv_rows(a, b) for a, b in zip(roll.rows, theta.rows))
    kl = tuple(kl_rows(a, b) for a, b in zip(roll.rows, theta.rows))
    kl_rev = tuple(kl_rows(b, a) for a, b in zip(roll.rows, theta.rows))

    d_roll = visitation_levels(roll)
    d_theta = visitation_levels(theta)
    T = roll.tree.horizon

    expected = np.array([_weighted_sum(d_roll[t], kl[t]) for t in range(T)])
    chain = np.concatenate([[0.0], np.cumsum(expected)[:-1]])
    direct = np.array([marginal_kl_direct(d_roll[t], d_theta[t]) for t in range(T)])
    mtv = np.array([float(tv_rows(d_roll[t].ravel(), d_theta[t].ravel())) for t in range(T)])

    return DivergenceReport(
        per_context_tv=tv,
        per_context_kl=kl,
        per_context_kl_rev=kl_rev,
        tv_tok_max=float(max(a.max() for a in tv)),
        kl_tok_max=float(max(a.max() for a in kl)),
        kl_tok_max_rev=float(max(a.max() for a in kl_rev)),
        expected_kl=expected,
        marginal_kl=direct,
        marginal_kl_chain=chain,
        marginal_tv=mtv,
        seq_kl=float(expected.sum()),
        seq_kl_direct=marginal_kl_direct(d_roll[T], d_theta[T]),
    )
