import numpy as np
import pytest

from leniency_iv import Dataset, build_design, prune


def random_dataset(rng, n_cells=3, examiners=(2, 4), per_examiner=(3, 6), crossed=False, extra=None):
    """Examiners nested in cells with random case counts; ``crossed`` adds a
    second fixed-effect set that cuts across examiners."""
    ex, cell = [], []
    for c in range(n_cells):
        for k in range(rng.integers(examiners[0], examiners[1] + 1)):
            m = rng.integers(per_examiner[0], per_examiner[1] + 1)
            ex += [f"c{c}e{k}"] * m
            cell += [f"c{c}"] * m
    n = len(ex)
    x = (rng.random(n) < 0.5).astype(float)
    y = rng.standard_normal(n) + x
    fe = [np.array(cell)]
    if crossed:
        fe.append(np.array([f"t{t}" for t in rng.integers(0, 3, size=n)]))
    return Dataset.from_arrays(y, x, ex, fe if crossed else fe[0], extra=extra)


def pruned_context(ds):
    ds, report = prune(ds)
    return ds, build_design(ds), report


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def hand8():
    # 2 cells x 2 examiners x 2 cases
    y = np.array([1.0, 2.0, 0.5, 3.0, -1.0, 0.0, 2.5, 1.5])
    x = np.array([1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0])
    ex = ["a", "a", "b", "b", "c", "c", "d", "d"]
    cell = ["u", "u", "u", "u", "v", "v", "v", "v"]
    return Dataset.from_arrays(y, x, ex, cell)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
