"""Versioned JSON documents for policies, reward tables, pairs and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .tabular import ProblemShape, RewardTable, TabularPolicy, build_context_tree

SCHEMA_VERSION = 1
NODE_ORDER = "prompt-major, then depth, then lexicographic token prefix"


class SchemaError(ValueError):
    """A JSON document does not match the expected schema."""


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become the strings 'inf', '-inf', 'nan'."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if hasattr(obj, "_asdict"):
        return {k: to_jsonable(v) for k, v in obj._asdict().items()}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=1)


def config_hash(config: dict) -> str:
    blob = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def shape_to_dict(shape: ProblemShape) -> dict:
    return {
        "vocab_size": shape.vocab_size,
        "horizon": shape.horizon,
        "prompts": list(shape.prompts),
        "prompt_probs": list(shape.prompt_probs),
    }


def shape_from_dict(d: dict) -> ProblemShape:
    try:
        return ProblemShape(int(d["vocab_size"]), int(d["horizon"]), tuple(d["prompt_probs"]), tuple(d["prompts"]))
    except KeyError as e:
        raise SchemaError(f"shape: missing field {e}") from None


def policy_to_dict(policy: TabularPolicy) -> dict:
    return {
        "schema": "trmlab.policy",
        "version": SCHEMA_VERSION,
        "shape": shape_to_dict(policy.tree.shape),
        "node_order": NODE_ORDER,
        "degenerate": policy.is_degenerate,
        "probabilities": policy.flat_rows().tolist(),
        "logits": policy.flat_logits().tolist() if policy.has_logits else None,
    }


def _expect(d: dict, schema: str) -> None:
    if d.get("schema") != schema:
        raise SchemaError(f"expected schema {schema!r}, got {d.get('schema')!r}")
    if d.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{schema}: unsupported version {d.get('version')!r}")


def policy_from_dict(d: dict) -> TabularPolicy:
    _expect(d, "trmlab.policy")
    tree = build_context_tree(shape_from_dict(d["shape"]))
    rows = tree.split_flat(np.array(d["probabilities"], dtype=np.float64))
    if d.get("logits") is not None:
        logits = tree.split_flat(np.array(d["logits"], dtype=np.float64))
        return TabularPolicy(tree, rows, logits, is_degenerate=bool(d.get("degenerate", False)))
    return TabularPolicy(tree, rows, None, is_degenerate=bool(d.get("degenerate", False)))


def rewards_to_dict(rewards: RewardTable) -> dict:
    return {
        "schema": "trmlab.rewards",
        "version": SCHEMA_VERSION,
        "shape": shape_to_dict(rewards.tree.shape),
        "leaf_order": "prompt-major, then lexicographic token sequence",
        "values": rewards.values.tolist(),
        "baseline": rewards.baseline,
    }


def rewards_from_dict(d: dict) -> RewardTable:
    _expect(d, "trmlab.rewards")
    tree = build_context_tree(shape_from_dict(d["shape"]))
    return RewardTable(tree, np.array(d["values"], dtype=np.float64), d.get("baseline"))


def pair_to_dict(roll: TabularPolicy, theta: TabularPolicy, rewards: RewardTable, **extra) -> dict:
    return {
        "schema": "trmlab.pair",
        "version": SCHEMA_VERSION,
        "roll": policy_to_dict(roll),
        "theta": policy_to_dict(theta),
        "rewards": rewards_to_dict(rewards),
        **extra,
    }


def pair_from_dict(d: dict) -> tuple[TabularPolicy, TabularPolicy, RewardTable]:
    _expect(d, "trmlab.pair")
    return policy_from_dict(d["roll"]), policy_from_dict(d["theta"]), rewards_from_dict(d["rewards"])


def save_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
