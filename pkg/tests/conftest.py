import numpy as np
import pytest

from ulift.scene import Scene, look_at
from ulift.synthetic import SyntheticConfig, generate_scene


def make_scene(n, d=4, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Scene.from_arrays(
        positions=rng.normal(scale=spread, size=(n, 3)),
        scales=rng.uniform(0.1, 0.4, size=(n, 3)),
        rotations=q,
        opacities=rng.uniform(0.2, 0.95, size=n),
        colors=rng.uniform(size=(n, 3)),
        features=rng.normal(size=(n, d)),
        gt_instance_id=rng.integers(0, 3, size=n),
    )


def make_camera(size=32, seed=0, radius=5.0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi)
    eye = (radius * np.cos(theta), radius * np.sin(theta), rng.uniform(1.0, 3.0))
    return look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.9 * size, 0.9 * size, size, size)


@pytest.fixture
def small_scene():
    return make_scene(12, d=4, seed=1)


@pytest.fixture
def small_camera():
    return make_camera(24, seed=2)


@pytest.fixture(scope="session")
def tiny_synthetic():
    cfg = SyntheticConfig(n_objects=3, gaussians_per_object=(3, 5), n_views=4, heldout_views=2, image_size=48, d=8, seed=3)
    return cfg, generate_scene(cfg)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a criterion's outcome; the lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(lines[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
