"""Error bounds on |J(theta) - J(roll) - L(theta)| and the minorizer built from them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .divergence import INEQ_SLACK, DivergenceReport, divergence_report
from .objectives import ObjectiveReport, error_decomposition
from .tabular import RewardTable, TabularPolicy


def classical_bound(t: float, kl_tok_max: float) -> float:
    """T(T-1) * KL_tok_max, the TRPO-style bound."""
    return t * (t - 1) * kl_tok_max


def pinsker_marginal_bound(t: float, kl_tok_max: float) -> float:
    return (4.0 / 3.0) * t**1.5 * kl_tok_max


def mixed_bound(t: float, kl_tok_max: float, kl_seq: float) -> float:
    if kl_tok_max == 0 or kl_seq == 0:
        return 0.0
    return 2.0 * t * math.sqrt(kl_tok_max * kl_seq)


def adaptive_bound(t: float, kl_tok_max: float, kl_seq: float) -> float:
    return min(pinsker_marginal_bound(t, kl_tok_max), mixed_bound(t, kl_tok_max, kl_seq))


TABLE_ROWS = (
    ("Classical", "T(T-1) KL_tok_max", "O(T^2)", 2.0),
    ("Pinsker-Marginal", "(4/3) T^(3/2) KL_tok_max", "O(T^(3/2))", 1.5),
    ("Mixed", "2T sqrt(KL_tok_max KL_seq)", "O(T)", 1.0),
)


def bounds_table(t: int = 4096, kl_tok_max: float = 1e-4, kl_seq: float = 0.01) -> list[dict]:
    values = (
        classical_bound(t, kl_tok_max),
        pinsker_marginal_bound(t, kl_tok_max),
        mixed_bound(t, kl_tok_max, kl_seq),
    )
    return [
        {"bound": name, "formula": formula, "scaling": scaling, "exponent": exp, "value": v}
        for (name, formula, scaling, exp), v in zip(TABLE_ROWS, values)
    ]


@dataclass(frozen=True)
class BoundReport:
    t: int
    kl_tok_max: float
    kl_seq: float
    classical: float
    pinsker_marginal: float
    mixed: float
    adaptive: float
    surrogate_l: float
    minorizer: float
    actual_error: float | None = None
    j_roll: float | None = None
    j_theta: float | None = None
    # min over both KL directions of the token max, and the bounds it gives
    kl_tok_max_sym: float | None = None
    adaptive_sym: float | None = None

    def violations(self, slack: float = INEQ_SLACK) -> list[str]:
        if self.actual_error is None:
            return []
        e = abs(self.actual_error)
        return [
            name
            for name in ("classical", "pinsker_marginal", "mixed")
            if not e <= getattr(self, name) + slack
        ]

    def ratios(self) -> dict[str, float]:
        """|error| / bound per bound; 0/0 pairs are left out."""
        out = {}
        if self.actual_error is None:
            return out
        e = abs(self.actual_error)
        for name in ("classical", "pinsker_marginal", "mixed"):
            b = getattr(self, name)
            if b > 0 and math.isfinite(b):
                out[name] = e / b
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def bounds_from(
    div: DivergenceReport,
    obj: ObjectiveReport,
    symmetric: bool = False,
) -> BoundReport:
    T = div.horizon
    k, s = div.kl_tok_max, div.seq_kl
    adaptive = adaptive_bound(T, k, s)
    sym_k = sym_a = None
    if symmetric:
        sym_k = div.kl_tok_max_sym
        sym_a = adaptive_bound(T, sym_k, s)
    return BoundReport(
        t=T,
        kl_tok_max=k,
        kl_seq=s,
        classical=classical_bound(T, k),
        pinsker_marginal=pinsker_marginal_bound(T, k),
        mixed=mixed_bound(T, k, s),
        adaptive=adaptive,
        surrogate_l=obj.surrogate_l,
        minorizer=obj.surrogate_l - adaptive,
        actual_error=obj.error,
        j_roll=obj.j_roll,
        j_theta=obj.j_theta,
        kl_tok_max_sym=sym_k,
        adaptive_sym=sym_a,
    )


def bound_report(
    roll: TabularPolicy,
    theta: TabularPolicy,
    rewards: RewardTable,
    symmetric: bool = False,
) -> BoundReport:
    """Every bound for an enumerable pair, with the exact error alongside (baseline J(roll))."""
    return bounds_from(divergence_report(roll, theta), error_decomposition(roll, theta, rewards), symmetric)
