import numpy as np
import pytest

from foldcraft.actions import ActionDiscretization
from foldcraft.dataset import collect, load_dataset
from foldcraft.sim import WorkspaceConfig


@pytest.fixture(scope="session")
def cfg():
    return WorkspaceConfig()


@pytest.fixture(scope="session")
def disc():
    return ActionDiscretization.coarse()


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory, cfg, disc):
    """Forty transitions in four episodes, collected once per session."""
    root = tmp_path_factory.mktemp("ds")
    collect(cfg, disc, 40, seed=11, out_dir=root)
    return load_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """record(n, ok, detail) stores and prints one acceptance line."""
    def _record(n: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
