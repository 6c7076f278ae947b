"""Synthetic multi-view scenes with ground-truth and corrupted instance masks.

Objects are small clusters of anisotropic Gaussians laid out on the ground
plane and observed from an orbit of cameras.  Ground-truth masks come from
rendering the per-Gaussian object id; corrupted masks then imitate the
failure modes of a per-image segmenter: inconsistent ids across views, over-
and under-segmentation, ragged boundaries and tiny spurious segments.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rasterizer import render_gt_instances, view_weights
from .scene import CameraPose, Scene, look_at, random_unit_quaternions

MASK_MAGIC = b"ULMK"


@dataclass
class CorruptionSpec:
    permute_ids: bool = False
    split_prob: float = 0.0
    merge_prob: float = 0.0
    boundary_flip_prob: float = 0.0
    spurious_segment_rate: float = 0.0

    def is_identity(self) -> bool:
        return not (
            self.permute_ids
            or self.split_prob
            or self.merge_prob
            or self.boundary_flip_prob
            or self.spurious_segment_rate
        )

    def validate(self) -> list[str]:
        out = []
        for name in ("split_prob", "merge_prob", "boundary_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} must lie in [0, 1], got {v}")
        if self.spurious_segment_rate < 0:
            out.append("spurious_segment_rate must be >= 0")
        return out


FULL_CORRUPTION = CorruptionSpec(
    permute_ids=True, split_prob=0.3, merge_prob=0.1, boundary_flip_prob=0.1, spurious_segment_rate=2.0
)


@dataclass
class SyntheticConfig:
    n_objects: int = 12
    gaussians_per_object: tuple[int, int] = (5, 20)
    layout: str = "grid"  # "grid" | "random"
    extent: float = 2.0
    object_radius: float = 0.35
    n_views: int = 30
    heldout_views: int = 6
    orbit_radius: float = 6.0
    orbit_height: float = 3.5
    image_size: int = 256
    fov_degrees: float = 40.0
    d: int = 16
    corruption: CorruptionSpec = field(default_factory=lambda: CorruptionSpec(permute_ids=True))
    seed: int = 0

    def validate(self) -> list[str]:
        out = []
        if self.n_objects < 2:
            out.append(f"need at least 2 objects, got {self.n_objects}")
        if self.n_views < 2:
            out.append(f"need at least 2 views, got {self.n_views}")
        lo, hi = self.gaussians_per_object
        if lo < 1 or hi < lo:
            out.append(f"invalid gaussians_per_object range {self.gaussians_per_object}")
        if self.layout not in ("grid", "random"):
            out.append(f"unknown layout {self.layout!r}")
        if self.image_size < 8:
            out.append("image_size must be >= 8")
        if self.heldout_views < 0:
            out.append("heldout_views must be >= 0")
        return out + self.corruption.validate()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gaussians_per_object"] = list(self.gaussians_per_object)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticConfig:
        data = dict(data)
        if "corruption" in data:
            data["corruption"] = CorruptionSpec(**data["corruption"])
        if "gaussians_per_object" in data:
            data["gaussians_per_object"] = tuple(data["gaussians_per_object"])
        return cls(**data)


@dataclass
class SyntheticData:
    scene: Scene
    cameras: list[CameraPose]
    heldout_cameras: list[CameraPose]


# ---------------------------------------------------------------------------
# scene


def _object_centers(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    k = cfg.n_objects
    if cfg.layout == "grid":
        cols = int(np.ceil(np.sqrt(k * 4 / 3)))
        rows = int(np.ceil(k / cols))
        xs = np.linspace(-cfg.extent, cfg.extent, cols)
        ys = np.linspace(-cfg.extent * rows / cols, cfg.extent * rows / cols, rows)
        grid = np.array([(x, y) for y in ys for x in xs])[:k]
        spacing = 2 * cfg.extent / max(cols - 1, 1)
        xy = grid + rng.uniform(-0.15, 0.15, size=grid.shape) * spacing
    else:
        xy = rng.uniform(-cfg.extent, cfg.extent, size=(k, 2))
    z = rng.uniform(0.0, 0.5, size=(k, 1)) + cfg.object_radius
    return np.hstack([xy, z])


def _palette(k: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / k, 0.75, 0.9) for i in range(k)])


def generate_scene(cfg: SyntheticConfig) -> SyntheticData:
    problems = cfg.validate()
    if problems:
        raise ValueError("; ".join(problems))
    rng = np.random.default_rng(cfg.seed)
    centers = _object_centers(cfg, rng)
    colors = _palette(cfg.n_objects)
    lo, hi = cfg.gaussians_per_object
    pos, scl, rot, opa, col, gid = [], [], [], [], [], []
    for k in range(cfg.n_objects):
        n = int(rng.integers(lo, hi + 1))
        radius = cfg.object_radius * rng.uniform(0.7, 1.3)
        pos.append(centers[k] + rng.normal(scale=0.45 * radius, size=(n, 3)))
        scl.append(radius * rng.uniform(0.25, 0.6, size=(n, 3)))
        rot.append(random_unit_quaternions(rng, n))
        opa.append(rng.uniform(0.3, 0.95, size=n))
        col.append(np.clip(colors[k] + rng.normal(scale=0.03, size=(n, 3)), 0.0, 1.0))
        gid.append(np.full(n, k, dtype=np.int64))
    positions = np.concatenate(pos)
    scene = Scene.from_arrays(
        positions=positions,
        scales=np.concatenate(scl),
        rotations=np.concatenate(rot),
        opacities=np.concatenate(opa),
        colors=np.concatenate(col),
        features=np.zeros((positions.shape[0], cfg.d)),
        gt_instance_id=np.concatenate(gid),
    )
    return SyntheticData(scene, orbit_cameras(cfg, cfg.n_views, 0.0), orbit_cameras(cfg, cfg.heldout_views, 0.5))


def orbit_cameras(cfg: SyntheticConfig, count: int, phase: float) -> list[CameraPose]:
    """``count`` cameras evenly spaced on the orbit, offset by ``phase`` steps."""
    size = cfg.image_size
    focal = 0.5 * size / np.tan(np.radians(cfg.fov_degrees) / 2)
    target = (0.0, 0.0, cfg.object_radius)
    cams = []
    for i in range(count):
        theta = 2 * np.pi * (i + phase) / max(count, 1)
        # heldout views sit slightly lower to differ in elevation as well
        height = cfg.orbit_height * (0.8 if phase else 1.0) * (1.0 + 0.15 * np.sin(3 * theta))
        eye = (cfg.orbit_radius * np.cos(theta), cfg.orbit_radius * np.sin(theta), height)
        cams.append(look_at(eye, target, (0.0, 0.0, 1.0), focal, focal, size, size))
    return cams


# ---------------------------------------------------------------------------
# masks


def render_gt_masks(scene: Scene, cameras: Sequence[CameraPose]) -> list[np.ndarray]:
    """Per-view masks with ids ``gt_id + 1`` and 0 for background."""
    masks = []
    for cam in cameras:
        if scene.n == 0:
            masks.append(np.zeros((cam.height, cam.width), dtype=np.int64))
            continue
        if scene.gt_instance_id is None:
            raise ValueError("scene carries no ground-truth ids")
        masks.append(render_gt_instances(view_weights(scene, cam), scene.gt_instance_id + 1))
    return masks


def _neighbors(mask: np.ndarray):
    """Yield (shifted labels, valid) for the four axis neighbours."""
    h, w = mask.shape
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        shifted = np.zeros_like(mask)
        valid = np.zeros(mask.shape, dtype=bool)
        ys = slice(max(dy, 0), h + min(dy, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        xd = slice(max(-dx, 0), w + min(-dx, 0))
        shifted[yd, xd] = mask[ys, xs]
        valid[yd, xd] = True
        yield shifted, valid


def _split(mask: np.ndarray, rng: np.random.Generator, next_id: int) -> bool:
    ids, counts = np.unique(mask[mask > 0], return_counts=True)
    ids = ids[counts >= 20]
    if ids.size == 0:
        return False
    target = rng.choice(ids)
    ys, xs = np.nonzero(mask == target)
    angle = rng.uniform(0, np.pi)
    side = (xs - xs.mean()) * np.cos(angle) + (ys - ys.mean()) * np.sin(angle) > 0
    if side.all() or not side.any():
        return False
    mask[ys[side], xs[side]] = next_id
    return True


def _merge(mask: np.ndarray, rng: np.random.Generator) -> bool:
    pairs = set()
    for shifted, valid in _neighbors(mask):
        touch = valid & (mask > 0) & (shifted > 0) & (shifted != mask)
        pairs.update(zip(mask[touch].tolist(), shifted[touch].tolist()))
    if not pairs:
        return False
    pairs = sorted(pairs)
    src, dst = pairs[int(rng.integers(len(pairs)))]
    mask[mask == src] = dst
    return True


def _boundary_flip(mask: np.ndarray, rng: np.random.Generator, prob: float) -> None:
    candidates = np.zeros(mask.shape, dtype=np.int64)
    for shifted, valid in _neighbors(mask):
        other = valid & (mask > 0) & (shifted > 0) & (shifted != mask) & (candidates == 0)
        candidates[other] = shifted[other]
    ys, xs = np.nonzero(candidates)
    flip = rng.random(ys.size) < prob
    mask[ys[flip], xs[flip]] = candidates[ys[flip], xs[flip]]


def _spurious(mask: np.ndarray, rng: np.random.Generator, rate: float, next_id: int) -> int:
    count = int(np.floor(rate)) + int(rng.random() < rate - np.floor(rate))
    fg_y, fg_x = np.nonzero(mask > 0)
    if fg_y.size == 0:
        return next_id
    h, w = mask.shape
    max_area = 0.002 * h * w
    for _ in range(count):
        k = int(rng.integers(fg_y.size))
        cy, cx = fg_y[k], fg_x[k]
        area = rng.uniform(0.25, 1.0) * max_area
        aspect = rng.uniform(0.5, 2.0)
        a = np.sqrt(area * aspect / np.pi)
        b = np.sqrt(area / (aspect * np.pi))
        theta = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        blob = ((u / a) ** 2 + (v / b) ** 2 <= 1.0) & (mask > 0)
        if blob.sum() > max_area:
            keep = np.flatnonzero(blob)[: int(max_area)]
            blob = np.zeros(mask.shape, dtype=bool)
            blob.flat[keep] = True
        if blob.any():
            mask[blob] = next_id
            next_id += 1
    return next_id


def _mislabelled(mask: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pixels whose segment is dominated by a different ground-truth object."""
    fg = mask > 0
    n_gt = int(gt.max()) + 1
    joint = np.bincount(mask[fg] * n_gt + gt[fg], minlength=(int(mask.max()) + 1) * n_gt)
    owner = joint.reshape(-1, n_gt).argmax(axis=1)
    return fg & (owner[mask] != gt)


def corrupt_view(gt: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One corrupted view plus a map of pixels whose label no longer names their object."""
    if spec.is_identity():
        return gt.copy(), np.zeros(gt.shape, dtype=bool)
    mask = gt.astype(np.int64).copy()
    next_id = int(mask.max()) + 1
    if spec.split_prob and rng.random() < spec.split_prob:
        if _split(mask, rng, next_id):
            next_id += 1
    if spec.merge_prob and rng.random() < spec.merge_prob:
        _merge(mask, rng)
    if spec.boundary_flip_prob:
        _boundary_flip(mask, rng, spec.boundary_flip_prob)
    if spec.spurious_segment_rate:
        next_id = _spurious(mask, rng, spec.spurious_segment_rate, next_id)
    corrupted = _mislabelled(mask, gt)

    present = np.unique(mask[mask > 0])
    new_ids = np.arange(1, present.size + 1)
    if spec.permute_ids:
        new_ids = rng.permutation(new_ids)
    lut = np.zeros(int(mask.max()) + 1, dtype=np.int64)
    lut[present] = new_ids
    return lut[mask], corrupted


def corrupt_masks_traced(
    gt_masks: Sequence[np.ndarray], spec: CorruptionSpec, seed: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    masks, traces = [], []
    for v, gt in enumerate(gt_masks):
        rng = np.random.default_rng([seed, v])
        m, t = corrupt_view(np.asarray(gt), spec, rng)
        masks.append(m)
        traces.append(t)
    return masks, traces


def corrupt_masks(gt_masks: Sequence[np.ndarray], spec: CorruptionSpec, seed: int) -> list[np.ndarray]:
    return corrupt_masks_traced(gt_masks, spec, seed)[0]


# ---------------------------------------------------------------------------
# mask files


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 0xFFFF:
        raise ValueError("mask ids must fit in u16")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(mask, dtype="<u2").tobytes())


def read_mask(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC or len(raw) < 12:
        raise ValueError(f"{path}: not an instance mask file")
    w, h = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 2 * w * h:
        raise ValueError(f"{path}: truncated mask ({len(body)} bytes for {w}x{h})")
    return np.frombuffer(body, dtype="<u2").reshape(h, w).astype(np.int64)
