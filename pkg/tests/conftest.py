import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from splatedit.camera import look_at
from splatedit.splats import SplatScene


def random_scene(rng, n, *, sh_bands=0, spread=0.6, scale_range=(-2.6, -1.4), background=None):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SplatScene(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=rng.uniform(*scale_range, (n, 3)),
        rotations=q,
        opacity_logits=rng.uniform(-1.0, 3.0, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        sh_rest=rng.normal(size=(n, sh_bands)).astype(np.float32) if sh_bands else None,
        background=rng.uniform(0, 1, 3) if background is None else background,
    )


def random_camera(rng, size=16, radius=(3.0, 5.0), fov=50.0, id="cam", target=(0.0, 0.0, 0.0)):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = np.asarray(target) + d * rng.uniform(*radius)
    up = (0.0, 0.0, 1.0) if abs(d[2]) < 0.95 else (0.0, 1.0, 0.0)
    if isinstance(size, int):
        size = (size, size)
    return look_at(eye, target, up, width=size[0], height=size[1], fov_deg=fov, id=id)


def rotated_box_case(rng, half=(0.25, 1.0, 0.4), n=10000):
    """Uniform box samples under a random rotation, plus ground points on the plane below it."""
    R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    local = rng.uniform(-1, 1, (n, 3)) * half
    center = rng.normal(size=3)
    obj = center + local @ R.T
    g_local = np.c_[rng.uniform(-3, 3, (500, 2)), np.full(500, -half[2])]
    ground = center + g_local @ R.T
    return R, obj, ground


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_token_config(rng, n_views=3, size=32, stride=4, dim=6, fg_prob=0.6):
    """Random cameras around the origin with random token grids and foreground masks."""
    from splatedit.tokens import TokenGrid

    views = [random_camera(rng, size=size, id=f"v{i}") for i in range(n_views)]
    g = size // stride
    grids = []
    for v in views:
        mask = rng.random((g, g)) < fg_prob
        mask[rng.integers(g), rng.integers(g)] = True
        grids.append(TokenGrid(rng.normal(size=(g, g, dim)), mask, stride, v.id))
    n_keys = int(rng.integers(1, n_views))
    keys = tuple(int(i) for i in rng.choice(n_views, n_keys, replace=False))
    return views, grids, keys


ACCEPTANCE_RESULTS: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; lines are echoed and summarized at the end."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_RESULTS[number] = line
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
