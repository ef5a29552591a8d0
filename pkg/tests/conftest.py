import numpy as np
import pytest

from posecalib.synth import SceneSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def clean_scene():
    """Small noiseless three-camera scene with integer offsets."""
    return generate(SceneSpec(n_cameras=3, n_people=3, n_frames=80, offsets=(0, 3, -2), seed=7))


@pytest.fixture(scope="session")
def linear_scene():
    """Two cameras, linearly moving people, no articulation."""
    return generate(SceneSpec(n_cameras=2, n_people=2, n_frames=60, offsets=(0, 0),
                              motion="linear", seed=3))



def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
