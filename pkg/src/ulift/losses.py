"""Training losses over one view's pixel sample, with analytic gradients.

All functions take the rendered features ``F`` of the sampled pixels (M x d)
and their view-local segment ``labels`` (M,).  Gradients are returned with
respect to ``F`` and, where the codebook enters, the codebook (L x d).
Segment centroids and the uncertainty gate are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import (
    association_logits,
    build_score_matrix,
    log_softmax,
    softmax,
    softmax_and_log,
    solve_mapping,
)
from .scene import TrainConfig

LOG_CLAMP = np.log(1e-12)
NORM_EPS = 1e-8


@dataclass
class SegmentCentroids:
    segment_ids: np.ndarray  # (J,) sorted view-local ids
    centroids: np.ndarray  # (J, d)
    counts: np.ndarray  # (J,)
    index: np.ndarray  # (M,) row of each pixel's own segment

    def __len__(self) -> int:
        return len(self.segment_ids)


@dataclass
class GradientSet:
    d_pixel_features: np.ndarray
    d_codebook: np.ndarray

    @classmethod
    def zeros(cls, m: int, d: int, L: int) -> GradientSet:
        return cls(np.zeros((m, d)), np.zeros((L, d)))

    def __add__(self, other: GradientSet) -> GradientSet:
        return GradientSet(
            self.d_pixel_features + other.d_pixel_features, self.d_codebook + other.d_codebook
        )

    def scaled(self, w: float) -> GradientSet:
        return GradientSet(w * self.d_pixel_features, w * self.d_codebook)


@dataclass
class LossBreakdown:
    contrastive: float = 0.0
    sparsity: float = 0.0
    concentration: float = 0.0
    total_codebook: float = 0.0
    kept_fraction: float = 1.0
    n_clamped: int = 0
    n_skipped: int = 0
    single_segment: bool = False
    mapping: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.contrastive + self.total_codebook

    CSV_FIELDS = ("contrastive", "sparsity", "concentration", "total", "kept_fraction")

    def csv_row(self, iteration: int) -> list:
        return [iteration] + [repr(float(getattr(self, k))) for k in self.CSV_FIELDS]


def compute_centroids(features: np.ndarray, labels: np.ndarray) -> SegmentCentroids:
    labels = np.asarray(labels)
    ids, index, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((len(ids), features.shape[1]))
    np.add.at(sums, index, features)
    return SegmentCentroids(ids, sums / counts[:, None], counts, index)


def _own_rows(centroids: SegmentCentroids, labels: np.ndarray) -> np.ndarray:
    """Centroid row of each pixel's label, -1 where the label has no centroid."""
    labels = np.asarray(labels)
    if len(centroids) == 0:
        return np.full(labels.shape, -1)
    pos = np.clip(np.searchsorted(centroids.segment_ids, labels), 0, len(centroids) - 1)
    return np.where(centroids.segment_ids[pos] == labels, pos, -1)


def contrastive_loss_and_grad(
    features: np.ndarray, centroids: SegmentCentroids, labels: np.ndarray
) -> tuple[float, np.ndarray, bool]:
    """InfoNCE against segment centroids; returns ``(loss, dF, single_segment)``."""
    m = features.shape[0]
    if len(centroids) < 2 or m == 0:
        return 0.0, np.zeros_like(features), True
    own = _own_rows(centroids, labels)
    logits = features @ centroids.centroids.T
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(m), own].sum()) / m
    dlogits = np.exp(logp)
    dlogits[np.arange(m), own] -= 1.0
    return loss, (dlogits @ centroids.centroids) / m, False


def uncertainty_map(features: np.ndarray, centroids: SegmentCentroids, labels: np.ndarray) -> np.ndarray:
    """One minus the softmax weight of each pixel's own centroid."""
    m = features.shape[0]
    own = _own_rows(centroids, labels)
    w = np.ones(m)
    if len(centroids) == 0:
        return w
    probs = softmax(features @ centroids.centroids.T)
    has = own >= 0
    w[has] = 1.0 - probs[np.flatnonzero(has), own[has]]
    return w


def _targets(mapping: dict, labels: np.ndarray) -> np.ndarray:
    return np.array([mapping[int(k)] for k in labels], dtype=np.int64)


def sparsity_loss_and_grad(
    features: np.ndarray,
    codebook: np.ndarray,
    mapping: dict,
    labels: np.ndarray,
    keep: np.ndarray,
    temperature: float = 1.0,
    log_probs: np.ndarray | None = None,
) -> tuple[float, GradientSet, int]:
    """Cross-entropy of each kept pixel against its mapped codebook row.

    Returns ``(loss, grads, n_clamped)``; pixels whose target probability
    falls below 1e-12 are clamped there and pass no gradient.  ``log_probs``
    may carry the already computed association log-probabilities of all
    pixels.
    """
    m = features.shape[0]
    grads = GradientSet.zeros(m, features.shape[1], codebook.shape[0])
    keep = np.asarray(keep, dtype=bool)
    if m == 0 or not keep.any():
        return 0.0, grads, 0
    rows = np.flatnonzero(keep)
    target = _targets(mapping, np.asarray(labels)[rows])
    if log_probs is None:
        logp = log_softmax(association_logits(features[rows], codebook, temperature))
    else:
        logp = log_probs[rows]
    picked = logp[np.arange(rows.size), target]
    clamped = picked < LOG_CLAMP
    loss = -float(np.where(clamped, LOG_CLAMP, picked).sum()) / m

    dlogits = np.exp(logp)
    dlogits[np.arange(rows.size), target] -= 1.0
    dlogits[clamped] = 0.0
    dlogits /= m * temperature
    grads.d_pixel_features[rows] = dlogits @ codebook
    grads.d_codebook[:] = dlogits.T @ features[rows]
    return loss, grads, int(clamped.sum())


def concentration_loss_and_grad(
    features: np.ndarray,
    codebook: np.ndarray,
    mapping: dict,
    labels: np.ndarray,
    keep: np.ndarray,
) -> tuple[float, GradientSet, int]:
    """L1 gap between each kept pixel's mapped codebook row and its unit feature.

    Returns ``(loss, grads, n_skipped)`` where skipped pixels have a feature
    norm below 1e-8.
    """
    m = features.shape[0]
    grads = GradientSet.zeros(m, features.shape[1], codebook.shape[0])
    keep = np.asarray(keep, dtype=bool)
    norms = np.linalg.norm(features, axis=1)
    usable = keep & (norms > NORM_EPS)
    n_skipped = int((keep & ~usable).sum())
    if m == 0 or not usable.any():
        return 0.0, grads, n_skipped
    rows = np.flatnonzero(usable)
    target = _targets(mapping, np.asarray(labels)[rows])
    unit = features[rows] / norms[rows, None]
    diff = codebook[target] - unit
    loss = float(np.abs(diff).sum()) / m

    sign = np.sign(diff) / m
    np.add.at(grads.d_codebook, target, sign)
    d_unit = -sign
    # d(F/|F|)/dF = (I - n n^T) / |F|
    radial = np.sum(d_unit * unit, axis=1, keepdims=True)
    grads.d_pixel_features[rows] = (d_unit - radial * unit) / norms[rows, None]
    return loss, grads, n_skipped


def total_codebook_loss(
    features: np.ndarray,
    codebook: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    codebook_active: bool = True,
) -> tuple[LossBreakdown, GradientSet]:
    """Contrastive loss on every pixel plus the gated sparsity/concentration terms."""
    m, d = features.shape
    L = codebook.shape[0]
    labels = np.asarray(labels)
    cents = compute_centroids(features, labels)
    contra, d_contra, single = contrastive_loss_and_grad(features, cents, labels)
    grads = GradientSet(d_contra, np.zeros((L, d)))
    out = LossBreakdown(contrastive=contra, single_segment=single)

    w_unc = uncertainty_map(features, cents, labels)
    keep = w_unc <= config.tau if config.filtering else np.ones(m, dtype=bool)
    out.kept_fraction = float(keep.mean()) if m else 1.0

    if not codebook_active or m == 0 or (config.w_class == 0 and config.w_concen == 0):
        return out, grads

    probs, logp = softmax_and_log(association_logits(features, codebook, config.temperature))
    mapping = solve_mapping(build_score_matrix(probs, labels, config.mapping))
    out.mapping = mapping

    if config.w_class > 0:
        out.sparsity, g, out.n_clamped = sparsity_loss_and_grad(
            features, codebook, mapping, labels, keep, config.temperature, log_probs=logp
        )
        grads = grads + g.scaled(config.w_class)
    if config.concentration and config.w_concen > 0:
        out.concentration, g, out.n_skipped = concentration_loss_and_grad(
            features, codebook, mapping, labels, keep
        )
        grads = grads + g.scaled(config.w_concen)
    out.total_codebook = config.w_class * out.sparsity + (
        config.w_concen * out.concentration if config.concentration else 0.0
    )
    return out, grads
