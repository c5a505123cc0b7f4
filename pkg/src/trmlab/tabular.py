"""Exactly enumerable autoregressive policies over a fixed-horizon prefix tree.

A problem has ``P`` prompts, a vocabulary of ``V`` tokens and a horizon ``T``.
The contexts at depth ``t`` (1-based) are the pairs ``(x, y_<t)``; there are
``V**(t-1)`` of them per prompt. Per-depth arrays are laid out as
``(P, V**(t-1), ...)`` with the prefix encoded in base ``V`` (most significant
token first), so the children of context ``j`` at depth ``t`` are
``j*V .. j*V + V-1`` at depth ``t+1``.

Global node ids are prompt-major, then depth, then lexicographic prefix.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.special import softmax

DEFAULT_BUDGET = 10**7
BUDGET_ENV = "TRMLAB_MAX_TRAJECTORIES"

ROW_SUM_TOL = 1e-12


class BudgetExceeded(ValueError):
    """Raised when a problem shape enumerates more trajectories than allowed."""


class TreeMismatch(ValueError):
    """Raised when objects built on different context trees are combined."""


def enumeration_budget() -> int:
    raw = os.environ.get(BUDGET_ENV)
    return DEFAULT_BUDGET if raw is None else int(raw)


@dataclass(frozen=True)
class ProblemShape:
    vocab_size: int
    horizon: int
    prompt_probs: tuple[float, ...] = (1.0,)
    prompts: tuple[str, ...] | None = None

    def __post_init__(self):
        probs = tuple(float(p) for p in self.prompt_probs)
        object.__setattr__(self, "prompt_probs", probs)
        if self.prompts is None:
            object.__setattr__(self, "prompts", tuple(f"x{i}" for i in range(len(probs))))
        else:
            object.__setattr__(self, "prompts", tuple(self.prompts))
        if int(self.vocab_size) != self.vocab_size or self.vocab_size < 2:
            raise ValueError(f"vocab_size must be an integer >= 2, got {self.vocab_size}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError(f"horizon must be an integer >= 1, got {self.horizon}")
        if not probs:
            raise ValueError("at least one prompt is required")
        if len(self.prompts) != len(probs):
            raise ValueError("prompts and prompt_probs differ in length")
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"prompt probabilities must be nonnegative and sum to 1, got {probs}")

    @property
    def n_prompts(self) -> int:
        return len(self.prompt_probs)

    @property
    def n_trajectories(self) -> int:
        return self.n_prompts * self.vocab_size**self.horizon


class ContextTree:
    """All contexts ``(x, y_<t)`` for ``t = 1..T`` plus the complete-trajectory leaves."""

    def __init__(self, shape: ProblemShape, budget: int | None = None):
        budget = enumeration_budget() if budget is None else budget
        if shape.n_trajectories > budget:
            raise BudgetExceeded(
                f"{shape.n_prompts} prompt(s) x {shape.vocab_size}^{shape.horizon} = "
                f"{shape.n_trajectories} trajectories exceeds the budget of {budget}"
            )
        self.shape = shape
        V, T, P = shape.vocab_size, shape.horizon, shape.n_prompts
        self.vocab_size = V
        self.horizon = T
        self.n_prompts = P
        self.prompt_probs = np.array(shape.prompt_probs)
        self.level_sizes = tuple(V ** (t - 1) for t in range(1, T + 1))
        self.level_offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]]))
        self.nodes_per_prompt = int(sum(self.level_sizes))
        self.n_nodes = P * self.nodes_per_prompt
        self.leaves_per_prompt = V**T
        self.n_leaves = P * self.leaves_per_prompt

        prompt, depth, index, parent, token = [], [], [], [], []
        for p in range(P):
            for t in range(1, T + 1):
                j = np.arange(self.level_sizes[t - 1])
                prompt.append(np.full_like(j, p))
                depth.append(np.full_like(j, t))
                index.append(j)
                if t == 1:
                    parent.append(np.full_like(j, -1))
                    token.append(np.full_like(j, -1))
                else:
                    parent.append(p * self.nodes_per_prompt + self.level_offsets[t - 2] + j // V)
                    token.append(j % V)
        self.node_prompt = _frozen(np.concatenate(prompt))
        self.node_depth = _frozen(np.concatenate(depth))
        self.node_index = _frozen(np.concatenate(index))
        self.node_parent = _frozen(np.concatenate(parent))
        self.node_token = _frozen(np.concatenate(token))

    def __eq__(self, other):
        return isinstance(other, ContextTree) and self.shape == other.shape

    def __hash__(self):
        return hash(self.shape)

    def __repr__(self):
        s = self.shape
        return f"ContextTree(V={s.vocab_size}, T={s.horizon}, prompts={s.n_prompts})"

    def node_id(self, prompt: int, depth: int, index: int) -> int:
        return prompt * self.nodes_per_prompt + self.level_offsets[depth - 1] + index

    def leaf_tokens(self) -> np.ndarray:
        """Token sequences of every leaf of one prompt, shape ``(V**T, T)``, lexicographic."""
        V, T = self.vocab_size, self.horizon
        codes = np.arange(V**T)
        powers = V ** np.arange(T - 1, -1, -1)
        return (codes[:, None] // powers[None, :]) % V

    def path_indices(self, tokens) -> np.ndarray:
        """Within-depth context index at each position of token sequences ``(..., T)``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        idx = np.zeros(tokens.shape, dtype=np.int64)
        for t in range(1, self.horizon):
            idx[..., t] = idx[..., t - 1] * self.vocab_size + tokens[..., t - 1]
        return idx

    def split_flat(self, flat: np.ndarray) -> tuple[np.ndarray, ...]:
        """Global-order ``(n_nodes, ...)`` array to per-depth ``(P, V**(t-1), ...)`` arrays."""
        flat = np.asarray(flat)
        if flat.shape[0] != self.n_nodes:
            raise TreeMismatch(f"expected {self.n_nodes} rows, got {flat.shape[0]}")
        per_prompt = flat.reshape((self.n_prompts, self.nodes_per_prompt) + flat.shape[1:])
        return tuple(
            per_prompt[:, off : off + size].copy() for off, size in zip(self.level_offsets, self.level_sizes)
        )

    def join_levels(self, levels: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(a) for a in levels], axis=1).reshape(
            (self.n_nodes,) + np.asarray(levels[0]).shape[2:]
        )

    def expand_to_leaves(self, child_values: np.ndarray, t: int) -> np.ndarray:
        """Broadcast a per-(depth-t context, token) array ``(P, V**t)`` onto leaves ``(P, V**T)``."""
        return np.repeat(child_values, self.vocab_size ** (self.horizon - t), axis=1)

    def check_same(self, other: "ContextTree") -> None:
        if self != other:
            raise TreeMismatch(f"{self!r} != {other!r}")


def build_context_tree(shape: ProblemShape, budget: int | None = None) -> ContextTree:
    return ContextTree(shape, budget=budget)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _validate_rows(tree: ContextTree, rows, allow_zeros: bool) -> tuple[np.ndarray, ...]:
    if len(rows) != tree.horizon:
        raise TreeMismatch(f"expected {tree.horizon} depth levels, got {len(rows)}")
    out = []
    for t, r in enumerate(rows, start=1):
        r = np.asarray(r, dtype=np.float64)
        want = (tree.n_prompts, tree.level_sizes[t - 1], tree.vocab_size)
        if r.shape != want:
            raise TreeMismatch(f"depth {t}: expected rows of shape {want}, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError(f"depth {t}: non-finite probabilities")
        if allow_zeros:
            if np.any(r < 0):
                raise ValueError(f"depth {t}: negative probabilities")
        elif np.any(r <= 0):
            raise ValueError(f"depth {t}: zero probabilities need TabularPolicy.degenerate")
        if np.max(np.abs(r.sum(axis=-1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError(f"depth {t}: rows do not sum to 1")
        out.append(_frozen(r))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Conditional token distributions at every context of a tree.

    ``rows[t-1]`` has shape ``(P, V**(t-1), V)``. Build through
    :meth:`from_logits` (full support) or :meth:`degenerate` (zeros allowed).
    """

    tree: ContextTree
    rows: tuple[np.ndarray, ...]
    logits: tuple[np.ndarray, ...] | None = None
    is_degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rows", _validate_rows(self.tree, self.rows, self.is_degenerate))
        if self.logits is not None:
            logits = tuple(_frozen(np.asarray(l, dtype=np.float64)) for l in self.logits)
            for l, r in zip(logits, self.rows):
                if l.shape != r.shape:
                    raise TreeMismatch("logit and probability tables differ in shape")
            object.__setattr__(self, "logits", logits)

    @classmethod
    def from_logits(cls, tree: ContextTree, logits: Sequence[np.ndarray]) -> "TabularPolicy":
        logits = tuple(np.asarray(l, dtype=np.float64) for l in logits)
        return cls(tree, tuple(softmax(l, axis=-1) for l in logits), logits)

    @classmethod
    def from_flat_logits(cls, tree: ContextTree, flat: np.ndarray) -> "TabularPolicy":
        return cls.from_logits(tree, tree.split_flat(flat))

    @classmethod
    def degenerate(cls, tree: ContextTree, rows: Sequence[np.ndarray]) -> "TabularPolicy":
        """Probability tables that may contain exact zeros (no logits)."""
        return cls(tree, tuple(rows), None, is_degenerate=True)

    @classmethod
    def uniform(cls, tree: ContextTree) -> "TabularPolicy":
        return cls.from_logits(tree, [np.zeros((tree.n_prompts, n, tree.vocab_size)) for n in tree.level_sizes])

    @classmethod
    def deterministic(cls, tree: ContextTree, token: int = 0) -> "TabularPolicy":
        rows = []
        for n in tree.level_sizes:
            r = np.zeros((tree.n_prompts, n, tree.vocab_size))
            r[..., token] = 1.0
            rows.append(r)
        return cls.degenerate(tree, rows)

    @property
    def has_logits(self) -> bool:
        return self.logits is not None

    def flat_rows(self) -> np.ndarray:
        return self.tree.join_levels(self.rows)

    def flat_logits(self) -> np.ndarray:
        if self.logits is None:
            raise ValueError("policy has no logits")
        return self.tree.join_levels(self.logits)

    def row(self, prompt: int, depth: int, index: int) -> np.ndarray:
        return self.rows[depth - 1][prompt, index]

    def with_rows(self, depth: int, rows: np.ndarray) -> "TabularPolicy":
        """Copy with the depth-``depth`` probability table replaced (drops logits)."""
        new = list(self.rows)
        new[depth - 1] = rows
        return TabularPolicy.degenerate(self.tree, new)

    def extend(self, horizon: int, fill: np.ndarray | None = None) -> "TabularPolicy":
        """Same policy on a longer horizon; every new context gets the row ``fill`` (uniform by default)."""
        s = self.tree.shape
        tree = build_context_tree(ProblemShape(s.vocab_size, horizon, s.prompt_probs, s.prompts))
        V = s.vocab_size
        fill = np.full(V, 1.0 / V) if fill is None else np.asarray(fill, dtype=np.float64)
        rows = list(self.rows)
        for t in range(self.tree.horizon + 1, horizon + 1):
            rows.append(np.broadcast_to(fill, (s.n_prompts, V ** (t - 1), V)).copy())
        if self.logits is not None and np.all(fill > 0):
            logits = list(self.logits)
            fl = np.log(fill)
            for t in range(self.tree.horizon + 1, horizon + 1):
                logits.append(np.broadcast_to(fl, (s.n_prompts, V ** (t - 1), V)).copy())
            return TabularPolicy(tree, tuple(rows), tuple(logits))
        return TabularPolicy(tree, tuple(rows), None, is_degenerate=True)


@dataclass(frozen=True)
class RewardTable:
    """Reward in [0, 1] for every complete trajectory, shape ``(P, V**T)``.

    ``baseline=None`` means "use J(pi_roll)" wherever a surrogate is evaluated.
    """

    tree: ContextTree
    values: np.ndarray
    baseline: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        want = (self.tree.n_prompts, self.tree.leaves_per_prompt)
        if v.shape != want:
            raise TreeMismatch(f"reward table must have shape {want}, got {v.shape}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("rewards must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def constant(cls, tree: ContextTree, value: float = 1.0) -> "RewardTable":
        return cls(tree, np.full((tree.n_prompts, tree.leaves_per_prompt), float(value)))


def random_rewards(tree: ContextTree, seed: int) -> RewardTable:
    rng = np.random.default_rng(seed)
    return RewardTable(tree, rng.uniform(0.0, 1.0, size=(tree.n_prompts, tree.leaves_per_prompt)))


@dataclass(frozen=True)
class Trajectory:
    prompt: int
    tokens: tuple[int, ...]
    context_ids: tuple[int, ...]


def make_trajectory(tree: ContextTree, prompt: int, tokens: Sequence[int]) -> Trajectory:
    tokens = tuple(int(y) for y in tokens)
    if len(tokens) != tree.horizon:
        raise TreeMismatch(f"trajectory has {len(tokens)} tokens, horizon is {tree.horizon}")
    if not 0 <= prompt < tree.n_prompts or any(not 0 <= y < tree.vocab_size for y in tokens):
        raise TreeMismatch("prompt or token out of range for this tree")
    idx = tree.path_indices(tokens)
    ids = tuple(tree.node_id(prompt, t + 1, int(j)) for t, j in enumerate(idx))
    return Trajectory(int(prompt), tokens, ids)


class TrajectoryBatch:
    """Array-backed sequence of trajectories sharing one tree."""

    def __init__(self, tree: ContextTree, prompts: np.ndarray, tokens: np.ndarray):
        self.tree = tree
        self.prompts = _frozen(np.asarray(prompts, dtype=np.int64))
        self.tokens = _frozen(np.asarray(tokens, dtype=np.int64).reshape(len(self.prompts), tree.horizon))
        self.context_index = _frozen(tree.path_indices(self.tokens))

    def __len__(self) -> int:
        return len(self.prompts)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return TrajectoryBatch(self.tree, self.prompts[i], self.tokens[i])
        return make_trajectory(self.tree, int(self.prompts[i]), self.tokens[i])

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        return (
            isinstance(other, TrajectoryBatch)
            and self.tree == other.tree
            and np.array_equal(self.prompts, other.prompts)
            and np.array_equal(self.tokens, other.tokens)
        )

    def leaf_index(self) -> np.ndarray:
        """Lexicographic leaf code of each trajectory within its prompt."""
        return self.context_index[:, -1] * self.tree.vocab_size + self.tokens[:, -1]

    def gather(self, per_depth: Sequence[np.ndarray]) -> np.ndarray:
        """Pick ``per_depth[t-1][prompt, context, token]`` along every path, shape ``(n, T)``."""
        n = len(self)
        out = np.empty((n, self.tree.horizon))
        for t in range(self.tree.horizon):
            out[:, t] = per_depth[t][self.prompts, self.context_index[:, t], self.tokens[:, t]]
        return out

    def gather_contexts(self, per_depth: Sequence[np.ndarray]) -> np.ndarray:
        """Pick a per-context value ``per_depth[t-1][prompt, context]`` along every path."""
        out = np.empty((len(self), self.tree.horizon))
        for t in range(self.tree.horizon):
            out[:, t] = per_depth[t][self.prompts, self.context_index[:, t]]
        return out


def all_trajectories(tree: ContextTree) -> TrajectoryBatch:
    """Every leaf, prompt-major and lexicographic; index ``i`` matches the flattened leaf arrays."""
    leaves = tree.leaf_tokens()
    prompts = np.repeat(np.arange(tree.n_prompts), tree.leaves_per_prompt)
    return TrajectoryBatch(tree, prompts, np.tile(leaves, (tree.n_prompts, 1)))


def trajectory_probability(policy: TabularPolicy, traj: Trajectory) -> float:
    """P(y | x) as the product of the conditionals along the path."""
    expected = make_trajectory(policy.tree, traj.prompt, traj.tokens)
    if expected.context_ids != tuple(traj.context_ids):
        raise TreeMismatch("trajectory does not belong to this policy's tree")
    prob = 1.0
    idx = policy.tree.path_indices(traj.tokens)
    for t, (j, y) in enumerate(zip(idx, traj.tokens)):
        prob *= float(policy.rows[t][traj.prompt, j, y])
    return prob


def visitation_levels(policy: TabularPolicy) -> list[np.ndarray]:
    """Forward recursion ``d_1 .. d_{T+1}``; entry ``T`` is the joint leaf distribution."""
    tree = policy.tree
    mass = np.repeat(tree.prompt_probs[:, None], 1, axis=1)
    levels = [mass]
    for r in policy.rows:
        mass = (mass[..., None] * r).reshape(tree.n_prompts, -1)
        levels.append(mass)
    return levels


def context_visitation(policy: TabularPolicy, t: int) -> np.ndarray:
    """d_t over depth-``t`` contexts, shape ``(P, V**(t-1))``."""
    if not 1 <= t <= policy.tree.horizon:
        raise ValueError(f"step {t} outside 1..{policy.tree.horizon}")
    return visitation_levels(policy)[t - 1]


def leaf_distribution(policy: TabularPolicy) -> np.ndarray:
    """Joint P(x) P(y|x) over every leaf, shape ``(P, V**T)``."""
    return visitation_levels(policy)[-1]


def path_token_probs(policy: TabularPolicy) -> np.ndarray:
    """pi(y_t | c_t) for every leaf and position, shape ``(P * V**T, T)``; an independent path product."""
    return all_trajectories(policy.tree).gather(policy.rows)


def sample_trajectories(policy: TabularPolicy, n: int, seed: int) -> TrajectoryBatch:
    """Ancestral sampling; bit-reproducible for a given ``(policy, n, seed)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tree = policy.tree
    rng = np.random.default_rng(seed)
    prompts = rng.choice(tree.n_prompts, size=n, p=tree.prompt_probs)
    tokens = np.empty((n, tree.horizon), dtype=np.int64)
    idx = np.zeros(n, dtype=np.int64)
    for t in range(tree.horizon):
        rows = policy.rows[t][prompts, idx]
        u = rng.random(n)
        cdf = np.cumsum(rows, axis=1)
        # cdf[-1] may round below u; clamp to the last token with positive mass
        last_positive = tree.vocab_size - 1 - np.argmax(rows[:, ::-1] > 0, axis=1)
        y = np.minimum((cdf <= u[:, None]).sum(axis=1), last_positive)
        tokens[:, t] = y
        idx = idx * tree.vocab_size + y
    return TrajectoryBatch(tree, prompts, tokens)


def random_softmax_policy(tree: ContextTree, scale: float, seed: int) -> TabularPolicy:
    """Logits i.i.d. N(0, scale^2) in global node order, rows = softmax(logits)."""
    if scale < 0:
        raise ValueError("scale must be >= 0")
    rng = np.random.default_rng(seed)
    flat = scale * rng.standard_normal((tree.n_nodes, tree.vocab_size))
    return TabularPolicy.from_flat_logits(tree, flat)
