import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_camera, make_scene
from oracles import naive_pixel_weights
from ulift.rasterizer import (
    COV_FLOOR,
    AttributeMap,
    PixelWeightGrid,
    ProjectedGaussian,
    ProjectedGaussians,
    backward_attribute,
    compute_pixel_weights,
    project_gaussians,
    read_attribute_map,
    render_attribute,
    render_gt_instances,
    render_pixels,
    backward_pixels,
    view_weights,
    write_attribute_map,
    write_ppm,
)
from ulift.scene import CameraPose, Scene
from ulift.trainer import precompute_weights


def identity_camera(size=33, f=40.0):
    c = (size - 1) / 2
    return CameraPose(np.eye(3), np.zeros(3), f, f, c, c, size, size)


def point_scene(positions, scale=0.1, opacity=0.9):
    n = len(positions)
    return Scene.from_arrays(
        positions=np.asarray(positions, dtype=float),
        scales=np.full((n, 3), scale),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacities=np.full(n, opacity),
        colors=np.zeros((n, 3)),
        features=np.zeros((n, 2)),
    )


def one_pixel_grid(entries, transmittance, n_gaussians):
    idx = np.array([i for i, _ in entries], dtype=np.int64)
    w = np.array([v for _, v in entries], dtype=float)
    return PixelWeightGrid(1, 1, n_gaussians, np.array([0, len(entries)]), idx, w, np.array([transmittance]))


def pinned(opacities, depths, size=5):
    """Gaussians centred on pixel (2, 2) with tiny footprints."""
    items = [ProjectedGaussian(np.array([2.0, 2.0]), 0.3 * np.eye(2), d, o, k)
             for k, (o, d) in enumerate(zip(opacities, depths))]
    return compute_pixel_weights(ProjectedGaussians.from_list(items), size, size)


def test_on_axis_projection_closed_form():
    cam = identity_camera()
    s, z = 0.2, 4.0
    proj = project_gaussians(point_scene([[0, 0, z]], scale=s), cam)
    np.testing.assert_array_equal(proj.means[0], [cam.cx, cam.cy])
    np.testing.assert_allclose(proj.covs[0], ((cam.fx * s / z) ** 2 + COV_FLOOR) * np.eye(2), rtol=1e-12)


def test_behind_camera_dropped():
    proj = project_gaussians(point_scene([[0, 0, -1.0], [0, 0, 3.0]]), identity_camera())
    assert list(proj.source_index) == [1]


def test_single_gaussian_alpha_clamped():
    grid = pinned([1.0], [1.0])
    u = 2 * 5 + 2
    assert grid.pixel(u) == [(0, pytest.approx(0.99))]
    assert grid.transmittance[u] == pytest.approx(0.01)


def test_two_gaussian_blend_by_hand():
    grid = pinned([0.5, 1.0], [1.0, 2.0])
    u = 2 * 5 + 2
    (i0, w0), (i1, w1) = grid.pixel(u)
    assert (i0, i1) == (0, 1)
    assert w0 == pytest.approx(0.5) and w1 == pytest.approx(0.495)
    assert grid.transmittance[u] == pytest.approx(0.005)


def test_depth_order_not_input_order():
    grid = pinned([1.0, 0.5], [2.0, 1.0])
    assert [i for i, _ in grid.pixel(12)] == [1, 0]


def test_empty_projection():
    grid = compute_pixel_weights(ProjectedGaussians.from_list([]), 4, 3, n_gaussians=0)
    assert grid.indices.size == 0
    np.testing.assert_array_equal(grid.transmittance, np.ones(12))


@pytest.mark.parametrize("seed", range(4))
def test_matches_sequential_oracle(seed):
    scene = make_scene(10, seed=seed)
    cam = make_camera(14, seed=seed)
    proj = project_gaussians(scene, cam)
    grid = compute_pixel_weights(proj, cam.width, cam.height, scene.n)
    lists, trans = naive_pixel_weights(proj, cam.width, cam.height)
    for u, expect in lists.items():
        got = grid.pixel(u)
        assert [i for i, _ in got] == [i for i, _ in expect]
        np.testing.assert_allclose([w for _, w in got], [w for _, w in expect], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grid.transmittance, trans, rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 25))
def test_conservation_and_nonnegativity(seed, n):
    scene = make_scene(n, seed=seed, spread=0.5)
    cam = make_camera(20, seed=seed)
    grid = view_weights(scene, cam)
    assert np.all(grid.weights >= 0)
    np.testing.assert_allclose(grid.coverage() + grid.transmittance, 1.0, atol=1e-9)


def test_render_identity_and_mix():
    grid = one_pixel_grid([(0, 1.0)], 0.0, 1)
    f = np.array([[0.3, -2.0, 5.0]])
    np.testing.assert_array_equal(render_attribute(grid, f).data[0, 0], f[0])
    grid = one_pixel_grid([(0, 0.5), (1, 0.5)], 0.0, 2)
    f = np.array([[1.0, 2.0], [3.0, -4.0]])
    np.testing.assert_allclose(render_attribute(grid, f).data[0, 0], 0.5 * f[0] + 0.5 * f[1])


def test_render_is_linear(small_scene, small_camera):
    grid = view_weights(small_scene, small_camera)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, small_scene.n, 3))
    lhs = render_attribute(grid, 2.0 * a - 3.0 * b).data
    rhs = 2.0 * render_attribute(grid, a).data - 3.0 * render_attribute(grid, b).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_render_rejects_wrong_attribute_count(small_scene, small_camera):
    grid = view_weights(small_scene, small_camera)
    with pytest.raises(IndexError):
        render_attribute(grid, np.zeros((small_scene.n + 1, 2)))


def test_backward_hand_cases(small_scene, small_camera):
    grid = view_weights(small_scene, small_camera)
    zero = np.zeros((grid.height, grid.width, 2))
    np.testing.assert_array_equal(backward_attribute(grid, zero), 0.0)
    grid = one_pixel_grid([(0, 0.7)], 0.3, 1)
    g = np.array([[[1.5, -2.0]]])
    np.testing.assert_allclose(backward_attribute(grid, g)[0], 0.7 * g[0, 0])


def test_pixel_subset_adjoint(small_scene, small_camera):
    grid = view_weights(small_scene, small_camera)
    rng = np.random.default_rng(1)
    pix = np.sort(rng.choice(grid.n_pixels, 50, replace=False))
    a = rng.normal(size=(small_scene.n, 4))
    g = rng.normal(size=(50, 4))
    lhs = np.sum(render_pixels(grid, a, pix) * g)
    rhs = np.sum(a * backward_pixels(grid, g, pix))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)
    np.testing.assert_allclose(render_pixels(grid, a, pix), render_attribute(grid, a).data.reshape(-1, 4)[pix])


def test_gt_instances_hand_argmax():
    grid = one_pixel_grid([(0, 0.4), (1, 0.35)], 0.25, 2)
    assert render_gt_instances(grid, np.array([1, 2]))[0, 0] == 1
    grid = one_pixel_grid([(0, 0.5), (1, 0.3)], 0.2, 2)
    assert render_gt_instances(grid, np.array([3, 3]))[0, 0] == 3
    grid = one_pixel_grid([], 1.0, 2)
    assert render_gt_instances(grid, np.array([3, 3]))[0, 0] == 0


def test_gt_instances_tie_goes_to_lowest_id():
    grid = one_pixel_grid([(0, 0.3), (1, 0.3)], 0.4, 2)
    assert render_gt_instances(grid, np.array([5, 2]))[0, 0] == 2


def test_weights_independent_of_thread_count():
    scene = make_scene(15, seed=3)
    cams = [make_camera(20, seed=s) for s in range(5)]
    one = precompute_weights(scene, cams, threads=1)
    four = precompute_weights(scene, cams, threads=4)
    for a, b in zip(one, four):
        np.testing.assert_array_equal(a.indptr, b.indptr)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.transmittance, b.transmittance)


def test_attribute_map_file_round_trip(tmp_path):
    data = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32).astype(float)
    write_attribute_map(AttributeMap(4, 3, data), tmp_path / "a.ulfm")
    raw = (tmp_path / "a.ulfm").read_bytes()
    assert raw[:4] == b"ULFM" and len(raw) == 16 + 4 * data.size
    back = read_attribute_map(tmp_path / "a.ulfm")
    np.testing.assert_array_equal(back.data, data)


def test_ppm_header(tmp_path):
    rgb = np.zeros((2, 3, 3), dtype=np.uint8)
    write_ppm(rgb, tmp_path / "x.ppm")
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n3 2\n255\n") and len(raw) == len(b"P6\n3 2\n255\n") + 18
