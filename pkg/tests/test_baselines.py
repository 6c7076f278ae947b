import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulift.baselines import (
    ClusterParams,
    ablation_ladder,
    baseline_config,
    cluster_features,
    default_grid,
    label_all_gaussians,
    ladder_is_monotone,
    render_labels,
    run_baseline_strategy,
    sweep_cluster_params,
)
from ulift.inference import assign_gaussian_ids
from ulift.rasterizer import PixelWeightGrid
from ulift.scene import TrainConfig
from ulift.synthetic import CorruptionSpec, SyntheticConfig, generate_scene, render_gt_masks
from ulift.trainer import precompute_weights, run_training


def bundles(n_per=10, d=4, noise=0.02, seed=0, k=2):
    rng = np.random.default_rng(seed)
    axes = np.eye(d)[:k]
    return np.vstack([a + rng.normal(scale=noise, size=(n_per, d)) for a in axes])


def same_partition(a, b):
    return len(set(zip(a.tolist(), b.tolist()))) == len(set(a.tolist())) == len(set(b.tolist()))


def test_orthogonal_bundles_give_two_clusters():
    lab = cluster_features(bundles(), ClusterParams(0.1, 3))
    assert lab.n_clusters == 2 and not lab.fallback
    assert lab.labels[:10].tolist() == [0] * 10 and lab.labels[10:].tolist() == [1] * 10


def test_scale_does_not_matter():
    x = bundles()
    scaled = x * np.random.default_rng(1).uniform(0.5, 3.0, size=(x.shape[0], 1))
    np.testing.assert_array_equal(cluster_features(x, ClusterParams(0.1, 3)).labels,
                                  cluster_features(scaled, ClusterParams(0.1, 3)).labels)


def test_min_size_above_count_falls_back_to_one_cluster():
    lab = cluster_features(bundles(), ClusterParams(0.1, 50))
    assert lab.fallback and lab.n_clusters == 1 and not lab.labels.any()


def test_duplicated_points_keep_partition():
    x = bundles()
    lab = cluster_features(np.vstack([x, x]), ClusterParams(0.1, 3))
    assert lab.n_clusters == 2
    np.testing.assert_array_equal(lab.labels[:20], lab.labels[20:])


def test_noise_point_joins_nearest_cluster():
    x = np.vstack([bundles(), [[0.9, 0.45, 0.0, 0.0]]])
    lab = cluster_features(x, ClusterParams(0.05, 3))
    assert lab.n_clusters == 2 and lab.labels[-1] == lab.labels[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.1, 0.3]), st.integers(1, 6))
def test_partition_equivariant_under_permutation(seed, eps, m):
    x = bundles(n_per=6, d=5, noise=0.1, seed=seed, k=3)
    perm = np.random.default_rng(seed).permutation(x.shape[0])
    a = cluster_features(x, ClusterParams(eps, m)).labels
    b = cluster_features(x[perm], ClusterParams(eps, m)).labels
    assert same_partition(a[perm], b)


def test_invalid_params_and_inputs():
    with pytest.raises(ValueError, match="eps"):
        cluster_features(bundles(), ClusterParams(0.0, 3))
    with pytest.raises(ValueError, match="min_size"):
        cluster_features(bundles(), ClusterParams(0.1, 0))
    with pytest.raises(ValueError, match="finite"):
        cluster_features(np.array([[np.nan, 1.0]]), ClusterParams(0.1, 1))
    assert cluster_features(np.zeros((0, 3)), ClusterParams(0.1, 1)).n_clusters == 0


def test_faint_gaussians_follow_nearest_cluster():
    x = np.vstack([bundles(), [[0.02, 1.0, 0.0, 0.0]]])
    opac = np.r_[np.full(20, 0.9), 0.1]
    lab = label_all_gaussians(x, opac, ClusterParams(0.1, 3))
    assert lab.labels[-1] == lab.labels[10]


def test_render_labels_by_hand():
    w = PixelWeightGrid(3, 1, 2, np.array([0, 2, 3, 3]), np.array([0, 1, 1]),
                        np.array([0.3, 0.6, 0.2]), np.array([0.1, 0.8, 1.0]))
    out = render_labels(np.array([1, 0]), 2, w)
    assert out.tolist() == [[1, 0, 0]]


def test_sweep_best_dominates_and_single_point_grid():
    x = bundles(n_per=8)
    w = PixelWeightGrid(16, 1, 16, np.arange(17), np.arange(16), np.ones(16), np.zeros(16))
    gt = np.r_[np.ones(8, int), np.full(8, 2)].reshape(1, 16)
    grid = [ClusterParams(0.1, 3), ClusterParams(1.5, 1), ClusterParams(0.1, 40)]
    res = sweep_cluster_params(x, np.ones(16), grid, [w], [gt], threads=1)
    assert res.best.miou == max(r["miou"] for r in res.table) == 1.0
    assert res.best_params == grid[0] and res.spread == pytest.approx(0.75)  # one cluster: (0.5 + 0) / 2
    one = sweep_cluster_params(x, np.ones(16), grid[:1], [w], [gt], threads=2)
    assert len(one.table) == 1 and one.spread == 0.0
    with pytest.raises(ValueError):
        sweep_cluster_params(x, np.ones(16), [], [w], [gt])


def test_sweep_csv(tmp_path):
    x = bundles(n_per=8)
    w = PixelWeightGrid(16, 1, 16, np.arange(17), np.arange(16), np.ones(16), np.zeros(16))
    gt = np.r_[np.ones(8, int), np.full(8, 2)].reshape(1, 16)
    res = sweep_cluster_params(x, np.ones(16), default_grid()[:4], [w], [gt], threads=1)
    res.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "eps,min_size,miou,fscore,mbiou,n_clusters" and len(lines) == 5


def test_baseline_and_ladder_flags():
    cfg = TrainConfig(tau=0.7, iterations=5)
    base = baseline_config(cfg)
    assert (base.mapping, base.concentration, base.filtering) == ("normalized", False, False)
    assert base.tau == 0.7 and base.iterations == 5
    arms = ablation_ladder(cfg)
    flags = [(c.mapping, c.concentration, c.filtering) for _, c in arms]
    assert flags == [("normalized", False, False), ("normalized", True, False),
                     ("area_aware", True, False), ("area_aware", True, True)]
    assert len(default_grid()) == 35


def test_ladder_monotone_tolerance():
    assert ladder_is_monotone([0.3, 0.36, 0.355, 0.42])
    assert not ladder_is_monotone([0.3, 0.36, 0.34, 0.42])


def test_orthogonal_bundles_at_wider_radius():
    lab = cluster_features(bundles(noise=0.01), ClusterParams(0.3, 3))
    assert lab.n_clusters == 2
    # pairwise audit: within-bundle cosine distance is far below 0.3, across is about 1
    u = bundles(noise=0.01)
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    dist = 1 - u @ u.T
    assert dist[:10, :10].max() < 0.01 and dist[:10, 10:].min() > 0.9


def test_baseline_matches_full_method_on_clean_masks():
    cfg = SyntheticConfig(n_objects=4, n_views=8, heldout_views=0, image_size=64, d=8, seed=0,
                          corruption=CorruptionSpec())
    data = generate_scene(cfg)
    weights = precompute_weights(data.scene, data.cameras, threads=1)
    masks = render_gt_masks(data.scene, data.cameras)
    tc = TrainConfig(L=16, d=8, iterations=400, pixels_per_step=512, seed=0)
    full = run_training(data.scene, data.cameras, masks, tc, weights=weights)
    base = run_baseline_strategy(data.scene, data.cameras, masks, tc, weights=weights)
    a = assign_gaussian_ids(full.features, full.codebook)
    b = assign_gaussian_ids(base.features, base.codebook)
    assert same_partition(a, b)
    assert same_partition(a, data.scene.gt_instance_id)


def test_baseline_logs_its_flags(caplog, tiny_synthetic):
    _, data = tiny_synthetic
    masks = render_gt_masks(data.scene, data.cameras)
    with caplog.at_level("INFO", logger="ulift.baselines"):
        run_baseline_strategy(data.scene, data.cameras, masks, TrainConfig(L=8, d=8, iterations=0))
    assert "mapping=normalized concentration=False filtering=False" in caplog.text
