import numpy as np
import pytest

from lqmfc.config import load_config, preset_path
from lqmfc.model import InitialLaw, MfcModel, catalog_make


def make_model(**kw):
    base = dict(A=0.0, B=1.0, sigma=1.0, sigma0=0.5, Q=1.0, R=1.0, G=1.0, T=1.0)
    base.update(kw)
    return MfcModel(**base)


def lq_model(A=0.2, Ab=0.3, B=1.0, Bb=0.5, Q=1.0, Qb=0.5, R=1.0, Rb=0.5, G=1.0, Gb=0.5, **kw):
    return make_model(
        A=A, B=B, Q=Q, R=R, G=G,
        a=catalog_make("affine", {"slope": Ab}),
        b=catalog_make("affine", {"slope": Bb}),
        q_fn=catalog_make("quadratic", {"coef": Qb}),
        r_fn=catalog_make("quadratic", {"coef": Rb}),
        g_fn=catalog_make("quadratic", {"coef": Gb}),
        **kw,
    )


@pytest.fixture(scope="session")
def nonconvex():
    return load_config(preset_path("nonconvex")).model


@pytest.fixture(scope="session")
def zero_lq():
    return load_config(preset_path("zero_lq")).model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_LINES].append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
