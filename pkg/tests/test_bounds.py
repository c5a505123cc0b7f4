import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pair
from trmlab.bounds import (
    adaptive_bound,
    bound_report,
    bounds_table,
    classical_bound,
    mixed_bound,
    pinsker_marginal_bound,
)
from trmlab.counterexamples import ConcentratedPairSpec, build_concentrated_pair
from trmlab.divergence import INEQ_SLACK
from trmlab.sweep import SweepCell, dominance_sweep
from trmlab.tabular import ProblemShape, random_rewards


def test_classical_examples():
    # commonly rounded to 1677
    assert classical_bound(4096, 1e-4) == pytest.approx(1677.3, abs=0.05)
    assert round(classical_bound(4096, 1e-4)) == 1677
    assert classical_bound(1, 0.3) == 0.0
    assert classical_bound(2, 0.5) == 1.0


def test_pinsker_marginal_examples():
    assert pinsker_marginal_bound(4096, 1e-4) == pytest.approx(34.95, abs=0.005)
    assert round(pinsker_marginal_bound(4096, 1e-4), 1) == 35.0
    assert pinsker_marginal_bound(0, 1.0) == 0.0
    assert pinsker_marginal_bound(9, 1.0) == pytest.approx(36.0, abs=1e-12)


def test_mixed_examples():
    assert mixed_bound(4096, 1e-4, 0.01) == pytest.approx(8.192, abs=1e-12)
    assert round(mixed_bound(4096, 1e-4, 0.01), 1) == 8.2
    assert mixed_bound(100, 0.3, 0.0) == 0.0
    assert mixed_bound(10, 0.01, 0.01) == pytest.approx(0.2, abs=1e-15)


def test_adaptive_is_min():
    assert adaptive_bound(4096, 1e-4, 0.01) == mixed_bound(4096, 1e-4, 0.01)
    assert adaptive_bound(4, 1e-4, 1.0) == pinsker_marginal_bound(4, 1e-4)


def test_table_rows():
    rows = bounds_table()
    assert [r["bound"] for r in rows] == ["Classical", "Pinsker-Marginal", "Mixed"]
    assert [r["exponent"] for r in rows] == [2.0, 1.5, 1.0]


def test_pinsker_marginal_below_classical_crossover():
    # (4/3) sqrt(T) <= T - 1 first holds at T = 4; at T = 3 it is 2.309 > 2
    T = np.arange(4, 100_001, dtype=float)
    assert np.all(pinsker_marginal_bound(T, 1.0) <= classical_bound(T, 1.0))
    assert pinsker_marginal_bound(3, 1.0) > classical_bound(3, 1.0)
    assert pinsker_marginal_bound(2, 1.0) > classical_bound(2, 1.0)


@given(st.floats(1e-8, 1.0), st.floats(1e-8, 1.0), st.integers(1, 10**5))
def test_formula_properties(k, s, T):
    assert mixed_bound(T, k, s) >= 0
    assert adaptive_bound(T, k, s) <= pinsker_marginal_bound(T, k)
    assert adaptive_bound(T, k, s) <= mixed_bound(T, k, s)
    assert classical_bound(T, k) == pytest.approx(T * (T - 1) * k, rel=1e-12)


def test_scaling_exponents():
    T = 2.0 ** np.arange(4, 15)
    for f, slope in (
        (lambda t: classical_bound(t, 1e-4), 2.0),
        (lambda t: pinsker_marginal_bound(t, 1e-4), 1.5),
        (lambda t: mixed_bound(t, 1e-4, 0.01), 1.0),
    ):
        fitted = np.polyfit(np.log(T), np.log([f(t) for t in T]), 1)[0]
        assert abs(fitted - slope) <= 0.01


def test_report_at_roll_is_zero():
    roll, _, rewards = random_pair(3, 3, 0.0, 1)
    rep = bound_report(roll, roll, rewards)
    assert rep.classical == rep.pinsker_marginal == rep.mixed == rep.adaptive == 0.0
    assert rep.actual_error == 0.0 and rep.minorizer == 0.0
    assert rep.ratios() == {}
    assert rep.violations() == []


def test_report_pair_A(pair_A):
    rep = bound_report(*pair_A)
    assert abs(rep.actual_error) <= rep.adaptive + INEQ_SLACK
    assert rep.classical == pytest.approx(2 * rep.kl_tok_max, abs=1e-15)
    assert rep.minorizer == pytest.approx(rep.surrogate_l - rep.adaptive, abs=1e-15)
    assert rep.violations() == []


def test_symmetric_variant_reported_alongside(pair_A):
    rep = bound_report(*pair_A, symmetric=True)
    assert rep.kl_tok_max_sym <= rep.kl_tok_max
    assert rep.adaptive_sym <= rep.adaptive + 1e-15


def test_sparse_regime_mixed_is_tighter():
    shape = ProblemShape(2, 3)
    roll, theta = build_concentrated_pair(ConcentratedPairSpec(0.001, shape=shape))
    rep = bound_report(roll, theta, random_rewards(roll.tree, 0))
    assert rep.mixed < rep.pinsker_marginal
    assert rep.adaptive == rep.mixed
    assert abs(rep.actual_error) <= rep.mixed + INEQ_SLACK


def test_sweep_small_grid():
    summary = dominance_sweep([SweepCell(2, 4, 0.3, 1000, seed=1)])
    assert summary.ok
    assert summary.n_pairs == 1000
    assert 0 < summary.max_ratio["mixed"] <= 1


def test_sweep_zero_scale_skips_ratios():
    summary = dominance_sweep([SweepCell(2, 3, 0.0, 20, seed=1)])
    assert summary.ok
    assert summary.n_checked_ratios == {"classical": 0, "pinsker_marginal": 0, "mixed": 0}


def test_sweep_large_scale():
    summary = dominance_sweep([SweepCell(3, 5, 1.0, 200, seed=2)])
    assert summary.ok
    assert all(math.isfinite(v) for v in summary.max_ratio.values())


def test_sweep_monotonic_improvement_tracked():
    # small perturbations with many pairs should produce some positive minorizers
    summary = dominance_sweep([SweepCell(2, 2, 0.05, 300, seed=3, roll_scale=2.0)])
    assert summary.ok
    for row in summary.rows:
        assert "monotonic_improvement" not in row["failures"]
