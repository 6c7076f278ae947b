"""CPU splatting of per-Gaussian attributes with frozen geometry.

Because positions, covariances and opacities never change during training, the
blending weights ``w[u, i] = alpha_i * prod_{t<i} (1 - alpha_t)`` are computed
once per view and stored as a sparse (pixels x gaussians) matrix.  Rendering
any attribute is then a sparse matmul and its backward pass is the transpose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .scene import CameraPose, Scene, quat_to_matrix

NEAR_PLANE = 0.01
COV_FLOOR = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
SIGMA_CUTOFF = 3.0

ATTR_MAGIC = b"ULFM"


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    source_index: int


@dataclass
class ProjectedGaussians:
    """Struct-of-arrays form of a list of :class:`ProjectedGaussian`."""

    means: np.ndarray  # (M, 2)
    covs: np.ndarray  # (M, 2, 2)
    depths: np.ndarray  # (M,)
    opacities: np.ndarray  # (M,)
    source_index: np.ndarray  # (M,) int

    def __len__(self) -> int:
        return len(self.depths)

    def __getitem__(self, k: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            self.means[k], self.covs[k], float(self.depths[k]), float(self.opacities[k]), int(self.source_index[k])
        )

    @classmethod
    def from_list(cls, items: list[ProjectedGaussian]) -> ProjectedGaussians:
        if not items:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))
        return cls(
            np.array([p.mean2d for p in items], dtype=np.float64),
            np.array([p.cov2d for p in items], dtype=np.float64),
            np.array([p.depth for p in items], dtype=np.float64),
            np.array([p.opacity for p in items], dtype=np.float64),
            np.array([p.source_index for p in items], dtype=np.int64),
        )


@dataclass
class PixelWeightGrid:
    """Front-to-back blending weights for one view in CSR layout.

    Row ``u = y * width + x`` lists ``(indices[k], weights[k])`` for
    ``k in indptr[u]:indptr[u+1]`` ordered by depth; ``transmittance[u]`` is
    the light left over after the last evaluated Gaussian.
    """

    width: int
    height: int
    n_gaussians: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray

    def __post_init__(self) -> None:
        self._matrix: sp.csr_matrix | None = None
        self._matrix_t: sp.csr_matrix | None = None

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = sp.csr_matrix(
                (self.weights, self.indices, self.indptr), shape=(self.n_pixels, self.n_gaussians)
            )
        return self._matrix

    def pixel(self, u: int) -> list[tuple[int, float]]:
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return [(int(i), float(w)) for i, w in zip(self.indices[lo:hi], self.weights[lo:hi])]

    def coverage(self) -> np.ndarray:
        """Sum of weights per pixel (equals ``1 - T``)."""
        rows = np.repeat(np.arange(self.n_pixels), np.diff(self.indptr))
        return np.bincount(rows, weights=self.weights, minlength=self.n_pixels)


@dataclass
class AttributeMap:
    width: int
    height: int
    data: np.ndarray  # (height, width, channels)

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# projection


def project_gaussians(scene: Scene, cam: CameraPose) -> ProjectedGaussians:
    """EWA projection of every Gaussian in front of the near plane."""
    if scene.n == 0:
        return ProjectedGaussians.from_list([])
    pos = scene.positions
    p_cam = pos @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    keep = np.flatnonzero(z > NEAR_PLANE)
    if keep.size == 0:
        return ProjectedGaussians.from_list([])
    p_cam = p_cam[keep]
    x, y, z = p_cam.T

    rot = quat_to_matrix(scene.rotations[keep])
    s2 = scene.scales[keep] ** 2
    cov_world = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    cov_cam = np.einsum("ij,njk,lk->nil", cam.rotation, cov_world, cam.rotation)

    jac = np.zeros((len(keep), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z**2
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1))) + COV_FLOOR * np.eye(2)

    means = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    return ProjectedGaussians(
        means=means,
        covs=cov2d,
        depths=z.copy(),
        opacities=scene.opacities[keep],
        source_index=keep.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# blending weights


def _splat_footprints(projected: ProjectedGaussians, width: int, height: int):
    """(pixel, alpha, depth, source) for every pixel inside each 3-sigma ellipse."""
    pix_parts, alpha_parts, depth_parts, src_parts = [], [], [], []
    for k in range(len(projected)):
        mx, my = projected.means[k]
        cov = projected.covs[k]
        rx = SIGMA_CUTOFF * np.sqrt(cov[0, 0])
        ry = SIGMA_CUTOFF * np.sqrt(cov[1, 1])
        x0, x1 = max(int(np.ceil(mx - rx)), 0), min(int(np.floor(mx + rx)), width - 1)
        y0, y1 = max(int(np.ceil(my - ry)), 0), min(int(np.floor(my + ry)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        dx = xs[None, :] - mx
        dy = ys[:, None] - my
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        a, b, c = cov[1, 1] / det, -cov[0, 1] / det, cov[0, 0] / det
        maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        inside = maha <= SIGMA_CUTOFF**2
        if not inside.any():
            continue
        alpha = np.minimum(projected.opacities[k] * np.exp(-0.5 * maha[inside]), ALPHA_MAX)
        iy, ix = np.nonzero(inside)
        pix = (iy + y0) * width + (ix + x0)
        pix_parts.append(pix.astype(np.int64))
        alpha_parts.append(alpha)
        depth_parts.append(np.full(pix.size, projected.depths[k]))
        src_parts.append(np.full(pix.size, projected.source_index[k], dtype=np.int64))
    if not pix_parts:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty, empty, empty.astype(np.int64)
    return (
        np.concatenate(pix_parts),
        np.concatenate(alpha_parts),
        np.concatenate(depth_parts),
        np.concatenate(src_parts),
    )


def compute_pixel_weights(
    projected: ProjectedGaussians, width: int, height: int, n_gaussians: int | None = None
) -> PixelWeightGrid:
    """Depth-sorted alpha blending weights for every pixel of a ``width x height`` view."""
    if n_gaussians is None:
        n_gaussians = int(projected.source_index.max()) + 1 if len(projected) else 0
    n_pix = width * height
    pix, alpha, depth, src = _splat_footprints(projected, width, height)
    transmittance = np.ones(n_pix)
    if pix.size == 0:
        return PixelWeightGrid(
            width, height, n_gaussians, np.zeros(n_pix + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64), np.zeros(0), transmittance,
        )

    order = np.lexsort((src, depth, pix))
    pix, alpha, src = pix[order], alpha[order], src[order]
    counts = np.bincount(pix, minlength=n_pix)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(pix.size) - starts[pix]

    # Sweep depth layers; each pixel has at most one entry per rank, so the
    # scatter below never collides and reproduces the sequential recursion.
    weights = np.zeros(pix.size)
    evaluated = np.zeros(pix.size, dtype=bool)
    by_rank = np.argsort(rank, kind="stable")
    layer_bounds = np.searchsorted(rank[by_rank], np.arange(rank.max() + 2))
    for r in range(rank.max() + 1):
        sel = by_rank[layer_bounds[r] : layer_bounds[r + 1]]
        rows = pix[sel]
        t_before = transmittance[rows]
        alive = t_before >= T_MIN
        sel, rows, t_before = sel[alive], rows[alive], t_before[alive]
        a = alpha[sel]
        weights[sel] = a * t_before
        evaluated[sel] = True
        transmittance[rows] = t_before * (1.0 - a)

    kept_counts = np.bincount(pix[evaluated], minlength=n_pix)
    indptr = np.concatenate([[0], np.cumsum(kept_counts)]).astype(np.int64)
    return PixelWeightGrid(
        width=width,
        height=height,
        n_gaussians=n_gaussians,
        indptr=indptr,
        indices=src[evaluated],
        weights=weights[evaluated],
        transmittance=transmittance,
    )


def view_weights(scene: Scene, cam: CameraPose) -> PixelWeightGrid:
    return compute_pixel_weights(project_gaussians(scene, cam), cam.width, cam.height, scene.n)


# ---------------------------------------------------------------------------
# linear render / adjoint


def render_attribute(weights: PixelWeightGrid, attrs: np.ndarray) -> AttributeMap:
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    if attrs.shape[0] != weights.n_gaussians:
        raise IndexError(f"attrs has {attrs.shape[0]} rows but the grid references {weights.n_gaussians} gaussians")
    out = np.asarray(weights.matrix @ attrs)
    return AttributeMap(weights.width, weights.height, out.reshape(weights.height, weights.width, -1))


def backward_attribute(weights: PixelWeightGrid, grad_map: AttributeMap | np.ndarray) -> np.ndarray:
    """Per-Gaussian gradient ``sum_u w[u, i] * grad_map[u]``."""
    g = grad_map.data if isinstance(grad_map, AttributeMap) else np.asarray(grad_map)
    g = g.reshape(weights.n_pixels, -1)
    return np.asarray(weights.matrix.T @ g)


def render_pixels(weights: PixelWeightGrid, attrs: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Rendered attribute at selected flat pixel indices, shape (len(pixels), c)."""
    return np.asarray(weights.matrix[pixels] @ attrs)


def backward_pixels(weights: PixelWeightGrid, grad: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`render_pixels`."""
    return np.asarray(weights.matrix[pixels].T @ grad)


def render_gt_instances(weights: PixelWeightGrid, gt_ids: np.ndarray) -> np.ndarray:
    """Per-pixel id with the largest accumulated weight; ``0`` where T > 0.5.

    ``gt_ids`` are used verbatim as label values, so callers that need an
    object labelled 0 to survive must shift ids before calling.
    """
    gt_ids = np.asarray(gt_ids, dtype=np.int64)
    n_pix = weights.n_pixels
    out = np.zeros(n_pix, dtype=np.int64)
    if weights.weights.size:
        n_ids = int(gt_ids.max()) + 1
        rows = np.repeat(np.arange(n_pix), np.diff(weights.indptr))
        acc = np.bincount(rows * n_ids + gt_ids[weights.indices], weights=weights.weights, minlength=n_pix * n_ids)
        out = np.argmax(acc.reshape(n_pix, n_ids), axis=1)
    out[weights.transmittance > 0.5] = 0
    return out.reshape(weights.height, weights.width)


# ---------------------------------------------------------------------------
# export


def write_attribute_map(amap: AttributeMap, path: str | Path) -> None:
    data = np.ascontiguousarray(amap.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(ATTR_MAGIC)
        fh.write(struct.pack("<III", amap.width, amap.height, amap.channels))
        fh.write(data.tobytes())


def read_attribute_map(path: str | Path) -> AttributeMap:
    raw = Path(path).read_bytes()
    if raw[:4] != ATTR_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not an attribute map")
    w, h, c = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * w * h * c:
        raise ValueError(f"{path}: truncated attribute map")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)
    return AttributeMap(w, h, data)


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) array in [0, 1] as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())
