import numpy as np
import pytest

from mvp import model as M
from mvp import synthdata as D
from mvp import training as T
from mvp.numerics import Rng

SMALL_ARCH = "8x8-32-32(4)-32(4)-48-8x8[7]"


@pytest.fixture(scope="session")
def small_grid():
    """8x8 renders of six identities at the default views and illuminations."""
    return D.render_grid(ids=range(6), size=8, blob_std=0.6)


@pytest.fixture(scope="session")
def trained_tiny(small_grid):
    """Small discrete and continuous models after a few epochs."""
    out = {}
    for head in (M.DISCRETE, M.CONTINUOUS):
        pairs = D.build_pairs(small_grid, head=head)
        arch = M.Architecture.parse(SMALL_ARCH, head=head)
        # the continuous head's 1/sigma_v^2 curvature needs a wider sigma_v here
        sigma_v = 0.1 if head == M.DISCRETE else 0.3
        cfg = T.TrainConfig(samples=5, learning_rate=0.002, epochs=3, seed=1, sigma_v=sigma_v)
        params = T.initial_parameters(arch, cfg, small_grid.views)
        params, _, _ = T.train(pairs, params, cfg, Rng(1))
        out[head] = params
    return out


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


# ---- acceptance reporting ----------------------------------------------------------

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, title, ok, detail)`` prints one PASS/FAIL line and
    returns ``ok``; every line is repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(n, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} -- {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)
