"""Synthetic rollout/training mismatch: logit noise, routing flips, and stale parameters.

Each context draws from its own stream ``SeedSequence([seed, kind_tag, node_id])``
so the result does not depend on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergence import kl_rows
from .tabular import RewardTable, TabularPolicy, all_trajectories, leaf_distribution
from .trm import batch_position_kls, exact_ascent

KINDS = ("logit_noise", "routing_flip", "staleness")
_TAGS = {"logit_noise": 1, "routing_flip": 2}
MIN_MASS = 1e-6


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    sigma: float = 1e-3
    flip_prob: float = 0.0
    collapse_factor: float = 0.9
    hard: bool = False
    k_steps: int = 0
    learning_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; choose from {KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0 < self.collapse_factor < 1:
            raise ValueError("collapse_factor must lie in (0, 1)")
        if self.k_steps < 0:
            raise ValueError("k_steps must be >= 0")


def _node_rng(seed: int, kind: str, node: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _TAGS[kind], node]))


def _logit_noise(roll: TabularPolicy, spec: PerturbationSpec) -> TabularPolicy:
    if not roll.has_logits:
        raise ValueError("logit_noise needs a softmax-parameterized roll policy")
    if spec.sigma == 0:
        return roll
    tree = roll.tree
    flat = roll.flat_logits().copy()
    for n in range(tree.n_nodes):
        flat[n] += spec.sigma * _node_rng(spec.seed, spec.kind, n).standard_normal(tree.vocab_size)
    return TabularPolicy.from_flat_logits(tree, flat)


def flip_row(row: np.ndarray, target: int, collapse_factor: float, hard: bool = False) -> np.ndarray:
    """Move ``collapse_factor`` of the argmax token's mass onto ``target``.

    Soft flips keep at least ``MIN_MASS`` on every token; hard flips move all of it.
    """
    p = np.array(row, dtype=np.float64)
    a = int(np.argmax(p))
    moved = p[a] if hard else collapse_factor * p[a]
    p[a] -= moved
    p[target] += moved
    if not hard:
        p = np.maximum(p, MIN_MASS)
    return p / p.sum()


def _routing_flip(roll: TabularPolicy, spec: PerturbationSpec) -> TabularPolicy:
    if spec.flip_prob == 0:
        return roll
    tree = roll.tree
    V = tree.vocab_size
    rows = roll.flat_rows().copy()
    logits = roll.flat_logits().copy() if roll.has_logits else None
    for n in range(tree.n_nodes):
        rng = _node_rng(spec.seed, spec.kind, n)
        if rng.random() >= spec.flip_prob:
            continue
        a = int(np.argmax(rows[n]))
        target = int(rng.integers(V - 1))
        target += target >= a
        rows[n] = flip_row(rows[n], target, spec.collapse_factor, spec.hard)
        if logits is not None:
            with np.errstate(divide="ignore"):
                logits[n] = np.log(rows[n])
    levels = tree.split_flat(rows)
    if spec.hard or logits is None:
        return TabularPolicy.degenerate(tree, levels)
    # unflipped rows are copied verbatim so their KL to roll is exactly zero
    return TabularPolicy(tree, levels, tree.split_flat(logits))


def perturb(roll: TabularPolicy, spec: PerturbationSpec, rewards: RewardTable | None = None) -> TabularPolicy:
    """A training-side policy derived from ``roll`` by one mismatch mechanism."""
    if spec.kind == "logit_noise":
        return _logit_noise(roll, spec)
    if spec.kind == "routing_flip":
        return _routing_flip(roll, spec)
    if rewards is None:
        raise ValueError("staleness needs a reward table")
    if not roll.has_logits:
        raise ValueError("staleness needs a softmax-parameterized roll policy")
    return exact_ascent(roll, rewards, spec.k_steps, spec.learning_rate)


DEFAULT_DELTAS = tuple(np.concatenate([[0.0], np.logspace(-6, 1, 29)]))


@dataclass(frozen=True)
class MismatchProfile:
    kl_values: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    median_kl: float
    max_kl: float
    rho_max: float
    rho_min: float
    deltas: np.ndarray
    accept_rate: np.ndarray

    def histogram_rows(self) -> list[dict]:
        return [
            {"bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)}
            for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts)
        ]

    def curve_rows(self) -> list[dict]:
        return [{"delta": float(d), "accept_rate": float(a)} for d, a in zip(self.deltas, self.accept_rate)]


def mismatch_profile(
    roll: TabularPolicy,
    theta: TabularPolicy,
    deltas=DEFAULT_DELTAS,
    bins: int = 20,
) -> MismatchProfile:
    """Per-context KL histogram, ratio extremes, and the exact acceptance curve.

    ``accept_rate[k]`` is the roll-probability that a sequence passes the
    max-KL mask at ``deltas[k]``.
    """
    roll.tree.check_same(theta.tree)
    kl = np.concatenate([kl_rows(a, b).ravel() for a, b in zip(roll.rows, theta.rows)])
    finite = kl[np.isfinite(kl)]
    top = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    counts, edges = np.histogram(finite, bins=bins, range=(0.0, top))

    r = roll.flat_rows()
    q = theta.flat_rows()
    support = r > 0
    with np.errstate(divide="ignore"):
        rho = q[support] / r[support]

    leaves = all_trajectories(roll.tree)
    path_max = batch_position_kls(roll, theta, leaves).max(axis=1)
    w = leaf_distribution(roll).ravel()
    deltas = np.asarray(deltas, dtype=np.float64)
    accept = np.array([float(np.sum(w[path_max <= d])) for d in deltas])
    return MismatchProfile(
        kl_values=kl,
        hist_counts=counts,
        hist_edges=edges,
        median_kl=float(np.median(kl)),
        max_kl=float(kl.max()),
        rho_max=float(rho.max()),
        rho_min=float(rho.min()),
        deltas=deltas,
        accept_rate=accept,
    )
