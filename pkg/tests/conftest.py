import re

import numpy as np
import pytest
import torch

from rrr.model import ClassifierSpec, build_classifier, expand_head
from rrr.scenario import Split, TaskData

TINY_SPEC = ClassifierSpec(conv_blocks=((4, 3, 2), (6, 3, 2)), dtype="float64")


def tiny_model(seed=0, n_classes=3, input_size=(8, 8), spec=TINY_SPEC):
    """A <1k-parameter double-precision CNN with random (non-zero) head rows."""
    m = build_classifier(spec, input_size, seed)
    expand_head(m, range(n_classes))
    g = torch.Generator().manual_seed(seed + 1000)
    with torch.no_grad():
        m.head.weight.copy_(torch.randn(m.head.weight.shape, generator=g, dtype=m.dtype))
        m.head.bias.copy_(torch.randn(m.head.bias.shape, generator=g, dtype=m.dtype) * 0.1)
    return m


def make_task(task_id, classes, per_class=20, seed=0, size=8):
    """Random-pixel task on size x size images, train and test sharing one split."""
    rng = np.random.default_rng(seed + task_id)
    n = per_class * len(classes)
    images = rng.uniform(size=(n, size, size, 3)).astype(np.float32)
    labels = np.repeat(np.asarray(classes), per_class)
    split = Split(images, labels, None)
    return TaskData(task_id, tuple(classes), split, split)


@pytest.fixture
def model_factory():
    return tiny_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or (rep.when == "setup" and status != "passed")):
                lines.append((int(m.group(1)), m.group(2), "PASS" if status == "passed" else status.upper()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, name, verdict in sorted(set(lines)):
            terminalreporter.write_line(f"criterion {num:2d} {name:<45s} {verdict}")
