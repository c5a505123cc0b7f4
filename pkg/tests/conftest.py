import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trmlab.serialization import load_json, pair_from_dict  # noqa: E402
from trmlab.tabular import (  # noqa: E402
    ProblemShape,
    TabularPolicy,
    build_context_tree,
    random_rewards,
    random_softmax_policy,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def pair_A():
    """(roll, theta, rewards) from the committed fixture: V=2, T=2, one prompt."""
    return pair_from_dict(load_json(FIXTURES / "pair_A.json"))


def random_pair(V, T, scale, seed, prompts=1, roll_scale=1.0):
    probs = tuple(np.full(prompts, 1.0 / prompts))
    tree = build_context_tree(ProblemShape(V, T, probs))
    roll = random_softmax_policy(tree, roll_scale, seed)
    noise = random_softmax_policy(tree, scale, seed + 10_000)
    theta = TabularPolicy.from_flat_logits(tree, roll.flat_logits() + noise.flat_logits())
    return roll, theta, random_rewards(tree, seed + 20_000)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the capture settings."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}  {detail}")
