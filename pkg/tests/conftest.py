import numpy as np
import pytest

from sybilpoison.data import dirichlet_partition, make_synthetic, train_test_split
from sybilpoison.models import build_model


@pytest.fixture(scope="session")
def tiny_world():
    """Small synthetic federation: 4x4 images, 10 classes, 6 clients."""
    full = make_synthetic(10, 30, (1, 4, 4), 0, noise=0.1, spread=0.25)
    train, test = train_test_split(full, 10, 0)
    model = build_model("fc-mnist", (1, 4, 4))
    part = dirichlet_partition(train.labels, 6, 0.5, 0)
    clients = [train.subset(part.assignments[k]) for k in range(6)]
    return model, clients, test


def pytest_terminal_summary(terminalreporter):
    from tests.acceptance_report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
