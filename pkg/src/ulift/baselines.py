"""Comparison methods: the plain codebook strategy and feature clustering.

:func:`run_baseline_strategy` is the training loop with per-segment mean
mapping and both regularizers switched off.  :func:`cluster_features` is a
DBSCAN-style density clustering on cosine distance, standing in for the
post-processing step of feature-field methods; its sensitivity to ``eps`` and
``min_size`` is what :func:`sweep_cluster_params` tabulates.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .evaluation import MetricsReport, compute_metrics
from .rasterizer import PixelWeightGrid
from .scene import CameraPose, Scene, TrainConfig
from .trainer import TrainState, resolve_threads, run_training

log = logging.getLogger(__name__)

OPACITY_CUTOFF = 0.5
BACKGROUND_T = 0.5
DEFAULT_EPS = (0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8)
DEFAULT_MIN_SIZE = (1, 3, 5, 10, 20)
SWEEP_FIELDS = ("eps", "min_size", "miou", "fscore", "mbiou", "n_clusters")


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Copy of ``config`` with mean mapping, no concentration and no filtering."""
    return dataclasses.replace(config, mapping="normalized", concentration=False, filtering=False)


def run_baseline_strategy(
    scene: Scene,
    cameras: Sequence[CameraPose],
    masks: Sequence[np.ndarray],
    config: TrainConfig,
    **kwargs,
) -> TrainState:
    cfg = baseline_config(config)
    log.info("baseline strategy: mapping=%s concentration=%s filtering=%s", cfg.mapping, cfg.concentration, cfg.filtering)
    return run_training(scene, cameras, masks, cfg, **kwargs)


LADDER_ARMS = (
    ("baseline", dict(mapping="normalized", concentration=False, filtering=False)),
    ("+concentration", dict(mapping="normalized", concentration=True, filtering=False)),
    ("+area_aware", dict(mapping="area_aware", concentration=True, filtering=False)),
    ("+filtering", dict(mapping="area_aware", concentration=True, filtering=True)),
)


def ablation_ladder(config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The four cumulative arms, each a copy of ``config`` with its flags applied."""
    return [(name, dataclasses.replace(config, **flags)) for name, flags in LADDER_ARMS]


def ladder_is_monotone(mious: Sequence[float], tolerance: float = 0.01) -> bool:
    return all(b >= a - tolerance for a, b in zip(mious, mious[1:]))


# ---------------------------------------------------------------------------
# density clustering


@dataclass(frozen=True)
class ClusterParams:
    eps: float
    min_size: int

    def validate(self) -> list[str]:
        problems = []
        if not 0.0 < self.eps < 2.0:
            problems.append(f"eps must lie in (0, 2), got {self.eps}")
        if self.min_size < 1:
            problems.append(f"min_size must be >= 1, got {self.min_size}")
        return problems


@dataclass
class GaussianLabeling:
    labels: np.ndarray  # (N,) cluster index per point
    n_clusters: int
    fallback: bool = False  # no core point existed; everything is one cluster


def _unit(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _relabel_by_first_seen(labels: np.ndarray) -> np.ndarray:
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(np.argsort(first))
    return order[np.unique(labels, return_inverse=True)[1]]


def cluster_features(features: np.ndarray, params: ClusterParams) -> GaussianLabeling:
    """DBSCAN on cosine distance; leftover noise joins the nearest cluster centroid.

    A point is core when at least ``min_size`` points (itself included) lie
    within ``eps``.  Clusters are the connected components of the core graph;
    non-core points inside a core's radius take the label of their nearest
    core.  Cluster indices are numbered in order of first appearance.
    """
    problems = params.validate()
    if problems:
        raise ValueError("; ".join(problems))
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    n = features.shape[0]
    if n == 0:
        return GaussianLabeling(np.zeros(0, dtype=np.int64), 0)
    unit = _unit(features)
    dist = 1.0 - unit @ unit.T
    near = dist <= params.eps
    core = near.sum(axis=1) >= params.min_size
    if not core.any():
        log.info("no core points at eps=%g min_size=%d; single cluster fallback", params.eps, params.min_size)
        return GaussianLabeling(np.zeros(n, dtype=np.int64), 1, fallback=True)

    core_idx = np.flatnonzero(core)
    graph = csr_matrix(near[np.ix_(core_idx, core_idx)])
    _, comp = connected_components(graph, directed=False)
    labels = np.full(n, -1, dtype=np.int64)
    labels[core_idx] = comp

    rest = np.flatnonzero(~core)
    if rest.size:
        d_core = np.where(near[np.ix_(rest, core_idx)], dist[np.ix_(rest, core_idx)], np.inf)
        nearest = np.argmin(d_core, axis=1)
        border = np.isfinite(d_core[np.arange(rest.size), nearest])
        labels[rest[border]] = comp[nearest[border]]

    noise = np.flatnonzero(labels < 0)
    if noise.size:
        k = int(labels.max()) + 1
        sums = np.zeros((k, features.shape[1]))
        np.add.at(sums, labels[labels >= 0], unit[labels >= 0])
        labels[noise] = np.argmax(unit[noise] @ _unit(sums).T, axis=1)

    labels = _relabel_by_first_seen(labels)
    return GaussianLabeling(labels, int(labels.max()) + 1)


def label_all_gaussians(
    features: np.ndarray, opacities: np.ndarray, params: ClusterParams
) -> GaussianLabeling:
    """Cluster the opaque Gaussians, then give each faint one its nearest cluster centroid."""
    features = np.asarray(features, dtype=np.float64)
    opaque = np.asarray(opacities) > OPACITY_CUTOFF
    if not opaque.any():
        opaque = np.ones(features.shape[0], dtype=bool)
    sub = cluster_features(features[opaque], params)
    labels = np.zeros(features.shape[0], dtype=np.int64)
    labels[opaque] = sub.labels
    faint = np.flatnonzero(~opaque)
    if faint.size:
        unit = _unit(features)
        sums = np.zeros((sub.n_clusters, features.shape[1]))
        np.add.at(sums, sub.labels, unit[opaque])
        labels[faint] = np.argmax(unit[faint] @ _unit(sums).T, axis=1)
    return GaussianLabeling(labels, sub.n_clusters, sub.fallback)


def render_labels(labels: np.ndarray, n_labels: int, weights: PixelWeightGrid) -> np.ndarray:
    """Instance mask (label + 1, 0 for empty pixels) from per-Gaussian labels."""
    onehot = np.zeros((labels.size, n_labels))
    onehot[np.arange(labels.size), labels] = 1.0
    votes = weights.matrix @ onehot
    mask = np.argmax(votes, axis=1) + 1
    mask[weights.transmittance > BACKGROUND_T] = 0
    return mask.reshape(weights.height, weights.width)


@dataclass
class SweepResult:
    best: MetricsReport
    best_params: ClusterParams
    table: list[dict]

    @property
    def spread(self) -> float:
        scores = [r["miou"] for r in self.table]
        return max(scores) - min(scores)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_FIELDS)
            for r in self.table:
                w.writerow([r["eps"], r["min_size"], f"{r['miou']:.6f}", f"{r['fscore']:.6f}",
                            f"{r['mbiou']:.6f}", r["n_clusters"]])


def default_grid() -> list[ClusterParams]:
    return [ClusterParams(e, m) for e in DEFAULT_EPS for m in DEFAULT_MIN_SIZE]


def sweep_cluster_params(
    features: np.ndarray,
    opacities: np.ndarray,
    grid: Sequence[ClusterParams],
    weights: Sequence[PixelWeightGrid],
    gt_masks: Sequence[np.ndarray],
    threads: int | None = None,
) -> SweepResult:
    """Score every grid point against ``gt_masks``; the best row is chosen by mIoU, first wins ties."""
    if not grid:
        raise ValueError("empty parameter grid")

    def evaluate(params: ClusterParams) -> tuple[dict, MetricsReport]:
        lab = label_all_gaussians(features, opacities, params)
        preds = [render_labels(lab.labels, lab.n_clusters, w) for w in weights]
        rep = compute_metrics(preds, gt_masks)
        row = {"eps": params.eps, "min_size": params.min_size, "miou": rep.miou, "fscore": rep.fscore,
               "mbiou": rep.mbiou, "n_clusters": lab.n_clusters}
        return row, rep

    threads = resolve_threads(threads)
    if threads == 1:
        results = [evaluate(p) for p in grid]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(evaluate, grid))
    table = [r for r, _ in results]
    best = int(np.argmax([r["miou"] for r in table]))
    return SweepResult(results[best][1], grid[best], table)
