"""Joint optimization of per-Gaussian features and the object codebook."""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .association import init_codebook
from .losses import LossBreakdown, total_codebook_loss
from .rasterizer import PixelWeightGrid, backward_pixels, render_pixels, view_weights
from .scene import CameraPose, Scene, TrainConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ULCK"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
FEATURE_INIT_SCALE = 1e-2


class NumericalError(RuntimeError):
    """A training step produced a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or from an unsupported version."""


@dataclass
class TrainState:
    features: np.ndarray  # (N, d)
    codebook: np.ndarray  # (L, d)
    m_features: np.ndarray
    v_features: np.ndarray
    m_codebook: np.ndarray
    v_codebook: np.ndarray
    iteration: int
    codebook_steps: int
    rng: np.random.Generator

    @classmethod
    def initial(cls, n: int, config: TrainConfig) -> TrainState:
        rng = np.random.default_rng(config.seed)
        features = rng.normal(size=(n, config.d)) * FEATURE_INIT_SCALE
        codebook = init_codebook(rng, config.L, config.d)
        return cls(
            features=features,
            codebook=codebook,
            m_features=np.zeros_like(features),
            v_features=np.zeros_like(features),
            m_codebook=np.zeros_like(codebook),
            v_codebook=np.zeros_like(codebook),
            iteration=0,
            codebook_steps=0,
            rng=rng,
        )

    def copy(self) -> TrainState:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return TrainState(
            self.features.copy(),
            self.codebook.copy(),
            self.m_features.copy(),
            self.v_features.copy(),
            self.m_codebook.copy(),
            self.v_codebook.copy(),
            self.iteration,
            self.codebook_steps,
            rng,
        )


@dataclass
class ViewBatch:
    view_index: int
    pixels: np.ndarray  # flat pixel indices, sorted
    labels: np.ndarray  # view-local segment id per sampled pixel
    weights: PixelWeightGrid


def sample_pixels(
    view_index: int,
    mask: np.ndarray,
    count: int,
    rng: np.random.Generator,
    weights: PixelWeightGrid | None = None,
) -> ViewBatch:
    """Uniform sample without replacement over the labelled (non-zero) pixels."""
    if count < 1:
        raise ValueError("count must be >= 1")
    flat = np.asarray(mask).reshape(-1)
    labelled = np.flatnonzero(flat > 0)
    if count >= labelled.size:
        pixels = labelled
    else:
        pixels = np.sort(rng.choice(labelled, size=count, replace=False))
    return ViewBatch(view_index, pixels, flat[pixels], weights)


def _adam(param, grad, m, v, lr, step):
    m *= ADAM_BETA1
    m += (1 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1 - ADAM_BETA2) * grad * grad
    m_hat = m / (1 - ADAM_BETA1**step)
    v_hat = v / (1 - ADAM_BETA2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train_step(state: TrainState, batch: ViewBatch, config: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """One optimizer step on one view's pixel sample (updates ``state`` in place)."""
    feats = render_pixels(batch.weights, state.features, batch.pixels)
    active = state.iteration >= config.warmup_iterations
    breakdown, grads = total_codebook_loss(feats, state.codebook, batch.labels, config, codebook_active=active)
    if not (np.isfinite(breakdown.total) and np.all(np.isfinite(grads.d_pixel_features))):
        raise NumericalError(
            f"non-finite loss at iteration {state.iteration} (view {batch.view_index}, "
            f"{batch.pixels.size} pixels, labels {np.unique(batch.labels).tolist()}, "
            f"feature norm range [{np.linalg.norm(feats, axis=1).min():.3g}, "
            f"{np.linalg.norm(feats, axis=1).max():.3g}], breakdown {breakdown})"
        )
    g_features = backward_pixels(batch.weights, grads.d_pixel_features, batch.pixels)
    _adam(state.features, g_features, state.m_features, state.v_features, config.lr_feature, state.iteration + 1)
    if active:
        state.codebook_steps += 1
        _adam(
            state.codebook,
            grads.d_codebook,
            state.m_codebook,
            state.v_codebook,
            config.lr_codebook,
            state.codebook_steps,
        )
    state.iteration += 1
    return state, breakdown


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("ULIFT_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def precompute_weights(scene: Scene, cameras: Sequence[CameraPose], threads: int | None = None) -> list[PixelWeightGrid]:
    """Blending weights for every camera; results are ordered like ``cameras``."""
    threads = resolve_threads(threads)
    if threads == 1 or len(cameras) < 2:
        return [view_weights(scene, cam) for cam in cameras]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda cam: view_weights(scene, cam), cameras))


def run_training(
    scene: Scene,
    cameras: Sequence[CameraPose],
    masks: Sequence[np.ndarray],
    config: TrainConfig,
    state: TrainState | None = None,
    weights: Sequence[PixelWeightGrid] | None = None,
    checkpoint_path: str | Path | None = None,
    loss_csv: str | Path | None = None,
    threads: int | None = None,
    callback: Callable[[TrainState, LossBreakdown], None] | None = None,
) -> TrainState:
    """Round-robin over views until ``config.iterations`` steps have run.

    Passing a ``state`` resumes from its iteration counter and RNG stream.
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if len(cameras) != len(masks):
        raise ValueError(f"{len(cameras)} cameras but {len(masks)} masks")
    if weights is None:
        weights = precompute_weights(scene, cameras, threads)
    if state is None:
        state = TrainState.initial(scene.n, config)
    flat_masks = [np.asarray(m).reshape(-1) for m in masks]

    csv_file = None
    writer = None
    if loss_csv is not None:
        resume = state.iteration > 0 and Path(loss_csv).exists()
        csv_file = open(loss_csv, "a" if resume else "w", newline="")
        writer = csv.writer(csv_file)
        if not resume:
            writer.writerow(["iteration", *LossBreakdown.CSV_FIELDS])
    try:
        while state.iteration < config.iterations:
            v = state.iteration % len(cameras)
            batch = sample_pixels(v, flat_masks[v], config.pixels_per_step, state.rng, weights[v])
            it = state.iteration
            state, breakdown = train_step(state, batch, config)
            if writer is not None:
                writer.writerow(breakdown.csv_row(it))
            if config.log_every and it % config.log_every == 0:
                log.info(
                    "it %d view %d contra %.4f class %.4f concen %.4f kept %.3f",
                    it, v, breakdown.contrastive, breakdown.sparsity,
                    breakdown.concentration, breakdown.kept_fraction,
                )
            if callback is not None:
                callback(state, breakdown)
            if checkpoint_path and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if csv_file is not None:
            csv_file.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    n, d = state.features.shape
    L = state.codebook.shape[0]
    rng_blob = json.dumps(state.rng.bit_generator.state).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, n, d, L))
        for arr in (state.features, state.m_features, state.v_features):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for arr in (state.codebook, state.m_codebook, state.v_codebook):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<QQI", state.iteration, state.codebook_steps, len(rng_blob)))
        fh.write(rng_blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, n, d, L = struct.unpack_from("<IIII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 20
    blocks = []
    for shape in [(n, d)] * 3 + [(L, d)] * 3:
        size = 8 * shape[0] * shape[1]
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint (parameter block)")
        blocks.append(np.frombuffer(raw, dtype="<f8", count=shape[0] * shape[1], offset=off).reshape(shape).copy())
        off += size
    if off + 20 > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint (counters)")
    iteration, cb_steps, rng_len = struct.unpack_from("<QQI", raw, off)
    off += 20
    if off + rng_len != len(raw):
        raise CheckpointError(f"{path}: truncated or oversized checkpoint (rng state)")
    try:
        rng_state = json.loads(raw[off:].decode("utf-8"))
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable rng state") from exc
    feats, m_f, v_f, cb, m_c, v_c = blocks
    return TrainState(feats, cb, m_f, v_f, m_c, v_c, int(iteration), int(cb_steps), rng)
