import numpy as np
import pytest


@pytest.fixture(scope="session")
def acceptance_rows():
    """All acceptance metrics, computed once per session by the eval engine.

    This is the expensive fixture behind test_acceptance.py; it trains
    the pinned avatars and reconstruction nets, so a full run takes over
    an hour.  Unit test files never request it.
    """
    from volcap import evalsuite as ev

    rows = ev.run_suite(log=lambda msg: print(f"[eval] {msg}", flush=True))
    return {r.name: r for r in rows}


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.PCG64(1234))
