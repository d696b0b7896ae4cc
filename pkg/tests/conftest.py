import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mergegrid.tensor_store import from_arrays  # noqa: E402


def random_ckpt(rng: np.random.Generator, ckpt_id: str, shapes: dict, scale: float = 1.0, **meta):
    return from_arrays(ckpt_id, {n: rng.normal(0, scale, s) for n, s in shapes.items()}, **meta)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def trio(gen):
    """(base, a, b) sharing three tensors."""
    shapes = {"layer.w": (6, 5), "layer.b": (5,), "head": (3, 4, 2)}
    base = random_ckpt(gen, "base", shapes)
    a = from_arrays("a", {n: base[n].data + gen.normal(0, 0.1, s) for n, s in shapes.items()})
    b = from_arrays("b", {n: base[n].data + gen.normal(0, 0.1, s) for n, s in shapes.items()})
    return base, a, b


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
