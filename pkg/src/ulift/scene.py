"""Gaussian scene, camera and training configuration types plus their text formats.

Scenes are stored as a single JSON document::

    {"version": 1, "d": 16, "n": 2,
     "gaussians": [{"pos": [..3], "scale": [..3], "quat": [w, x, y, z],
                    "opacity": 0.9, "color": [..3], "feature": [..d],
                    "gt_id": 0}, ...]}

Cameras live in a sibling document holding one record per view with
``fx, fy, cx, cy, width, height`` and ``world_to_camera`` (12 numbers, a
row-major 3x4 matrix).  Python's float repr round-trips exactly, so every
stored double survives save/load unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

SCENE_VERSION = 1
QUAT_TOL = 1e-6


class SceneFormatError(ValueError):
    """Raised when a scene or camera document cannot be parsed."""


class SceneValidationError(ValueError):
    """Raised when a parsed scene violates a type invariant."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class GaussianPoint:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    opacity: float
    color: np.ndarray
    feature: np.ndarray


@dataclass
class Scene:
    """A set of Gaussians sharing one feature dimension ``d``.

    Geometry is treated as frozen; training only ever touches copies of the
    feature (and optionally color) arrays.
    """

    gaussians: list[GaussianPoint]
    d: int
    gt_instance_id: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.gaussians)

    @property
    def n(self) -> int:
        return len(self.gaussians)

    def _stack(self, name: str, width: int) -> np.ndarray:
        if not self.gaussians:
            return np.zeros((0, width))
        return np.stack([np.asarray(getattr(g, name), dtype=np.float64) for g in self.gaussians])

    @property
    def positions(self) -> np.ndarray:
        return self._stack("position", 3)

    @property
    def scales(self) -> np.ndarray:
        return self._stack("scale", 3)

    @property
    def rotations(self) -> np.ndarray:
        return self._stack("rotation", 4)

    @property
    def opacities(self) -> np.ndarray:
        return np.array([g.opacity for g in self.gaussians], dtype=np.float64)

    @property
    def colors(self) -> np.ndarray:
        return self._stack("color", 3)

    @property
    def features(self) -> np.ndarray:
        return self._stack("feature", self.d)

    @classmethod
    def from_arrays(
        cls,
        positions: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        opacities: np.ndarray,
        colors: np.ndarray,
        features: np.ndarray,
        gt_instance_id: np.ndarray | None = None,
    ) -> Scene:
        features = np.asarray(features, dtype=np.float64)
        d = features.shape[1]
        gaussians = [
            GaussianPoint(
                position=np.asarray(positions[i], dtype=np.float64),
                scale=np.asarray(scales[i], dtype=np.float64),
                rotation=np.asarray(rotations[i], dtype=np.float64),
                opacity=float(opacities[i]),
                color=np.asarray(colors[i], dtype=np.float64),
                feature=features[i].copy(),
            )
            for i in range(features.shape[0])
        ]
        gt = None if gt_instance_id is None else np.asarray(gt_instance_id, dtype=np.int64)
        return cls(gaussians=gaussians, d=d, gt_instance_id=gt)

    def with_features(self, features: np.ndarray) -> Scene:
        """Copy of the scene with every Gaussian feature replaced."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.n, features.shape[1]):
            raise ValueError(f"expected {self.n} feature rows, got {features.shape}")
        gaussians = [
            GaussianPoint(g.position, g.scale, g.rotation, g.opacity, g.color, features[i].copy())
            for i, g in enumerate(self.gaussians)
        ]
        return Scene(gaussians, features.shape[1], self.gt_instance_id)


@dataclass
class CameraPose:
    rotation: np.ndarray  # world -> camera, 3x3
    translation: np.ndarray  # world -> camera, 3
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def world_to_camera(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_record(self) -> dict[str, Any]:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> CameraPose:
        m = np.asarray(rec["world_to_camera"], dtype=np.float64)
        if m.size != 12:
            raise SceneFormatError(f"world_to_camera needs 12 numbers, got {m.size}")
        m = m.reshape(3, 4)
        return cls(
            rotation=m[:, :3].copy(),
            translation=m[:, 3].copy(),
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
        )

    def validate(self) -> list[str]:
        out = []
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            out.append("camera rotation is not a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            out.append("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            out.append("image size must be positive")
        return out


def look_at(
    eye: Sequence[float],
    target: Sequence[float],
    up: Sequence[float],
    fx: float,
    fy: float,
    width: int,
    height: int,
) -> CameraPose:
    """Pinhole camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return CameraPose(
        rotation=rot,
        translation=-rot @ eye,
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


@dataclass
class TrainConfig:
    L: int = 256
    d: int = 16
    tau: float = 0.8
    w_class: float = 1e-3
    w_concen: float = 1e-1
    iterations: int = 30000
    lr_feature: float = 2.5e-3
    lr_codebook: float = 1e-3
    pixels_per_step: int = 4096
    warmup: int | None = None  # None -> 10% of iterations
    seed: int = 0
    mapping: str = "area_aware"  # "normalized" | "area_aware"
    filtering: bool = True
    concentration: bool = True
    temperature: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 0

    @property
    def warmup_iterations(self) -> int:
        if self.warmup is None:
            return self.iterations // 10
        return self.warmup

    def validate(self) -> list[str]:
        out = []
        # tau = 1 is accepted as "filter nothing"
        if not 0.0 < self.tau <= 1.0:
            out.append(f"tau must lie in (0, 1], got {self.tau}")
        if self.L < 1:
            out.append("L must be >= 1")
        if self.d < 2:
            out.append("d must be >= 2")
        for name in ("w_class", "w_concen", "lr_feature", "lr_codebook"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.mapping not in ("normalized", "area_aware"):
            out.append(f"unknown mapping mode {self.mapping!r}")
        if self.pixels_per_step < 1:
            out.append("pixels_per_step must be >= 1")
        if self.temperature <= 0:
            out.append("temperature must be positive")
        return out

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: Scene) -> list[str]:
    """Every violated invariant, one message per (Gaussian, field)."""
    violations: list[str] = []
    for i, g in enumerate(scene.gaussians):
        for name, size in (("position", 3), ("scale", 3), ("rotation", 4), ("color", 3)):
            v = np.asarray(getattr(g, name), dtype=np.float64)
            if v.shape != (size,):
                violations.append(f"gaussian {i}: {name} must have {size} components, got {v.shape}")
            elif not np.all(np.isfinite(v)):
                violations.append(f"gaussian {i}: {name} has non-finite values")
        scale = np.asarray(g.scale, dtype=np.float64)
        if scale.shape == (3,) and np.any(scale <= 0):
            violations.append(f"gaussian {i}: scale components must be > 0")
        quat = np.asarray(g.rotation, dtype=np.float64)
        if quat.shape == (4,) and abs(np.linalg.norm(quat) - 1.0) > QUAT_TOL:
            violations.append(f"gaussian {i}: rotation quaternion norm {np.linalg.norm(quat):.6g} != 1")
        if not (0.0 <= g.opacity <= 1.0):
            violations.append(f"gaussian {i}: opacity {g.opacity} outside [0, 1]")
        color = np.asarray(g.color, dtype=np.float64)
        if color.shape == (3,) and np.any((color < 0) | (color > 1)):
            violations.append(f"gaussian {i}: color outside [0, 1]")
        feat = np.asarray(g.feature, dtype=np.float64)
        if feat.ndim != 1 or feat.shape[0] != scene.d:
            violations.append(f"gaussian {i}: feature dimension {feat.shape} does not match d={scene.d}")
        elif not np.all(np.isfinite(feat)):
            violations.append(f"gaussian {i}: feature has non-finite values")
    if scene.gt_instance_id is not None:
        gt = np.asarray(scene.gt_instance_id)
        if gt.shape != (scene.n,):
            violations.append(f"gt_instance_id has {gt.shape} entries for {scene.n} gaussians")
        elif np.any(gt < 0):
            bad = int(np.flatnonzero(gt < 0)[0])
            violations.append(f"gaussian {bad}: gt_id must be >= 0")
    return violations


# ---------------------------------------------------------------------------
# serialization


def _floats(rec: dict, key: str, size: int | None, index: int) -> np.ndarray:
    if key not in rec:
        raise SceneFormatError(f"gaussian {index}: missing field {key!r}")
    try:
        arr = np.asarray(rec[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"gaussian {index}: field {key!r} is not numeric") from exc
    if arr.ndim != 1 or (size is not None and arr.shape[0] != size):
        raise SceneFormatError(f"gaussian {index}: field {key!r} must be a list of {size} numbers")
    return arr


def scene_to_document(scene: Scene) -> dict[str, Any]:
    records = []
    gt = scene.gt_instance_id
    for i, g in enumerate(scene.gaussians):
        rec = {
            "pos": [float(v) for v in g.position],
            "scale": [float(v) for v in g.scale],
            "quat": [float(v) for v in g.rotation],
            "opacity": float(g.opacity),
            "color": [float(v) for v in g.color],
            "feature": [float(v) for v in g.feature],
        }
        if gt is not None:
            rec["gt_id"] = int(gt[i])
        records.append(rec)
    return {"version": SCENE_VERSION, "d": int(scene.d), "n": scene.n, "gaussians": records}


def scene_from_document(doc: dict[str, Any]) -> Scene:
    for key in ("version", "d", "n", "gaussians"):
        if key not in doc:
            raise SceneFormatError(f"scene document missing field {key!r}")
    if doc["version"] != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {doc['version']}")
    d = int(doc["d"])
    records = doc["gaussians"]
    if len(records) != int(doc["n"]):
        raise SceneFormatError(f"header says n={doc['n']} but {len(records)} gaussians follow")
    gaussians = []
    gt_ids = []
    for i, rec in enumerate(records):
        if "opacity" not in rec:
            raise SceneFormatError(f"gaussian {i}: missing field 'opacity'")
        try:
            opacity = float(rec["opacity"])
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(f"gaussian {i}: field 'opacity' is not numeric") from exc
        gaussians.append(
            GaussianPoint(
                position=_floats(rec, "pos", 3, i),
                scale=_floats(rec, "scale", 3, i),
                rotation=_floats(rec, "quat", 4, i),
                opacity=opacity,
                color=_floats(rec, "color", 3, i),
                feature=_floats(rec, "feature", None, i),
            )
        )
        gt_ids.append(rec.get("gt_id"))
    has_gt = [g is not None for g in gt_ids]
    if any(has_gt) and not all(has_gt):
        missing = has_gt.index(False)
        raise SceneFormatError(f"gaussian {missing}: gt_id missing while other records carry one")
    gt = np.asarray(gt_ids, dtype=np.int64) if records and all(has_gt) else None
    return Scene(gaussians=gaussians, d=d, gt_instance_id=gt)


def save_scene(scene: Scene, path: str | Path) -> None:
    path = Path(path)
    text = json.dumps(scene_to_document(scene))
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write scene to {path}: {exc}") from exc


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: not a valid scene document ({exc})") from exc
    scene = scene_from_document(doc)
    violations = validate_scene(scene)
    if violations:
        raise SceneValidationError(violations)
    return scene


def save_cameras(cameras: Sequence[CameraPose], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_record() for c in cameras]}))


def load_cameras(path: str | Path) -> list[CameraPose]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: not a valid camera document ({exc})") from exc
    cams = []
    for i, rec in enumerate(doc.get("cameras", [])):
        try:
            cam = CameraPose.from_record(rec)
        except KeyError as exc:
            raise SceneFormatError(f"camera {i}: missing field {exc.args[0]!r}") from exc
        problems = cam.validate()
        if problems:
            raise SceneValidationError([f"camera {i}: {p}" for p in problems])
        cams.append(cam)
    return cams


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for a batch of (w, x, y, z) quaternions, shape (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)
