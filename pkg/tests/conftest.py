import numpy as np
import pytest

from paneldml.first_stage import ResidualizedPanel
from paneldml.panel_core import PanelDataset


def make_residuals(D, y, n_items, n_periods, group=None):
    """Wrap stacked (item-major) residual arrays as a ResidualizedPanel."""
    D = np.asarray(D, dtype=float).reshape(n_items, n_periods, -1)
    y = np.asarray(y, dtype=float).reshape(n_items, n_periods)
    group = np.arange(n_items) if group is None else np.asarray(group)
    return ResidualizedPanel(y, D, np.zeros(n_periods, dtype=int), group)


def random_panel(rng, n_items=6, n_periods=4, d=2, p=3, n_groups=3):
    group = np.arange(n_items) % n_groups
    return PanelDataset(
        y=rng.standard_normal((n_items, n_periods)),
        treatments=rng.standard_normal((n_items, n_periods, d)),
        controls=rng.standard_normal((n_items, n_periods, p)),
        group=group,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ------------------------------------------------------- acceptance verdicts

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one PASS/FAIL line; a criterion may be
    reported from several tests, and fails if any of them fails."""
    store = request.config.stash[ACCEPTANCE]

    def record(n, ok, detail):
        prev_ok, prev = store.get(n, (True, []))
        store[n] = (prev_ok and bool(ok), prev + [detail])
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in store:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL (not evaluated)")
            continue
        ok, details = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} "
                                    f"({'; '.join(details)})")
