"""Command-line entry point: ``ulift {gen,train,infer,eval,ablate,cluster-baseline}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .association import write_codebook
from .baselines import (
    ablation_ladder,
    default_grid,
    ladder_is_monotone,
    sweep_cluster_params,
)
from .evaluation import compute_metrics
from .inference import assign_gaussian_ids, export_segmentation, render_segmentation
from .scene import (
    SceneFormatError,
    SceneValidationError,
    TrainConfig,
    load_cameras,
    load_scene,
    save_cameras,
    save_scene,
)
from .synthetic import (
    FULL_CORRUPTION,
    CorruptionSpec,
    SyntheticConfig,
    corrupt_masks,
    generate_scene,
    read_mask,
    render_gt_masks,
    write_mask,
)
from .trainer import (
    CheckpointError,
    NumericalError,
    load_checkpoint,
    precompute_weights,
    run_training,
)

log = logging.getLogger("ulift")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Bad flags or missing/invalid inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# manifest


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)  # phase -> seconds

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(str(path))

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path: str | Path) -> None:
        """Write as JSON; output paths are stored relative to the manifest's directory."""
        data = self.to_dict()
        base = Path(path).parent
        data["outputs"] = [os.path.relpath(p, base) for p in self.outputs]
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# run directory layout

SCENE_FILE = "scene.json"
CAMERAS_FILE = "cameras.json"
HELDOUT_FILE = "heldout_cameras.json"
SYNTH_CONFIG_FILE = "synthetic.json"
MANIFEST_FILE = "manifest.json"


def _mask_name(v: int) -> str:
    return f"view_{v:03d}.ulmk"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _read_json(path: Path) -> dict:
    try:
        return json.loads(_require(path, "config file").read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def _read_masks(folder: Path, count: int, manifest: RunManifest | None = None) -> list[np.ndarray]:
    masks = []
    for v in range(count):
        p = _require(folder / _mask_name(v), "mask")
        if manifest is not None:
            manifest.add_input(p)
        masks.append(read_mask(p))
    return masks


def _write_masks(masks, folder: Path, manifest: RunManifest) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for v, m in enumerate(masks):
        p = folder / _mask_name(v)
        write_mask(m, p)
        manifest.add_output(p)


@dataclass
class RunInputs:
    scene: object
    cameras: list
    heldout: list
    masks: list
    heldout_gt: list


def _load_run(run: Path, manifest: RunManifest, need_masks: bool = True) -> RunInputs:
    scene_path = _require(run / SCENE_FILE, "scene")
    cams_path = _require(run / CAMERAS_FILE, "cameras")
    manifest.add_input(scene_path)
    manifest.add_input(cams_path)
    scene = load_scene(scene_path)
    cameras = load_cameras(cams_path)
    heldout = []
    if (run / HELDOUT_FILE).exists():
        manifest.add_input(run / HELDOUT_FILE)
        heldout = load_cameras(run / HELDOUT_FILE)
    masks = _read_masks(run / "masks", len(cameras), manifest) if need_masks else []
    heldout_gt = _read_masks(run / "heldout_gt", len(heldout), manifest) if heldout and need_masks else []
    return RunInputs(scene, cameras, heldout, masks, heldout_gt)


# ---------------------------------------------------------------------------
# config merging


def _train_config(args) -> TrainConfig:
    base = TrainConfig().to_dict()
    if args.config:
        base.update(_read_json(Path(args.config)))
    overrides = {
        "iterations": args.iters,
        "seed": args.seed,
        "tau": args.tau,
        "pixels_per_step": args.pixels,
        "log_every": args.log_every,
        "checkpoint_every": args.checkpoint_every,
    }
    if args.mapping is not None:
        overrides["mapping"] = "area_aware" if args.mapping == "area" else "normalized"
    if args.no_concen:
        overrides["concentration"] = False
    if args.no_filter:
        overrides["filtering"] = False
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = TrainConfig.from_dict(base)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    problems = cfg.validate()
    if problems:
        raise UsageError("; ".join(problems))
    return cfg


def _synthetic_config(args) -> SyntheticConfig:
    base = SyntheticConfig().to_dict()
    if args.config:
        base.update(_read_json(Path(args.config)))
    overrides = {
        "n_objects": args.objects,
        "n_views": args.views,
        "heldout_views": args.heldout,
        "image_size": args.size,
        "seed": args.seed,
        "d": args.dim,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    corruption = dict(base.get("corruption", {}))
    presets = {"permute": CorruptionSpec(permute_ids=True), "full": FULL_CORRUPTION, "none": CorruptionSpec()}
    if args.corruption:
        corruption = dataclasses.asdict(presets[args.corruption])
    for key in ("split_prob", "merge_prob", "boundary_flip_prob", "spurious_segment_rate"):
        value = getattr(args, key)
        if value is not None:
            corruption[key] = value
    if args.no_permute:
        corruption["permute_ids"] = False
    base["corruption"] = corruption
    try:
        cfg = SyntheticConfig.from_dict(base)
    except TypeError as exc:
        raise UsageError(f"bad synthetic config: {exc}") from exc
    problems = cfg.validate()
    if problems:
        raise UsageError("; ".join(problems))
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _synthetic_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("gen", cfg.to_dict(), cfg.seed)
    with manifest.phase("generate"):
        data = generate_scene(cfg)
    with manifest.phase("render"):
        gt = render_gt_masks(data.scene, data.cameras)
        heldout_gt = render_gt_masks(data.scene, data.heldout_cameras)
    with manifest.phase("corrupt"):
        masks = corrupt_masks(gt, cfg.corruption, cfg.seed)
    save_scene(data.scene, out / SCENE_FILE)
    save_cameras(data.cameras, out / CAMERAS_FILE)
    save_cameras(data.heldout_cameras, out / HELDOUT_FILE)
    (out / SYNTH_CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for name in (SCENE_FILE, CAMERAS_FILE, HELDOUT_FILE, SYNTH_CONFIG_FILE):
        manifest.add_output(out / name)
    _write_masks(gt, out / "gt", manifest)
    _write_masks(masks, out / "masks", manifest)
    _write_masks(heldout_gt, out / "heldout_gt", manifest)
    manifest.timings = {}  # keep gen output byte-identical across runs
    manifest.write(out / MANIFEST_FILE)
    print(f"wrote {len(masks)} views, {len(heldout_gt)} held-out views to {out}")
    return EXIT_OK


def _train_dir(args) -> Path:
    return Path(args.out) if args.out else Path(args.run) / "train"


def cmd_train(args) -> int:
    cfg = _train_config(args)
    run = Path(args.run)
    out = _train_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed)
    inputs = _load_run(run, manifest)
    with manifest.phase("weights"):
        weights = precompute_weights(inputs.scene, inputs.cameras, args.threads)
    ckpt = out / "checkpoint.ulck"
    loss_csv = out / "loss.csv"
    state = None
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
    with manifest.phase("train"):
        state = run_training(
            inputs.scene, inputs.cameras, inputs.masks, cfg,
            state=state, weights=weights, checkpoint_path=ckpt, loss_csv=loss_csv,
        )
    write_codebook(state.codebook, out / "codebook.ulcb")
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for p in (ckpt, loss_csv, out / "codebook.ulcb", out / "train_config.json"):
        manifest.add_output(p)
    manifest.write(out / MANIFEST_FILE)
    print(f"trained {state.iteration} iterations; checkpoint {ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    run = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "train" / "checkpoint.ulck"
    _require(ckpt, "checkpoint")
    out = Path(args.out) if args.out else run / "pred"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("infer", {"checkpoint": str(ckpt), "split": args.split}, 0)
    manifest.add_input(ckpt)
    state = load_checkpoint(ckpt)
    inputs = _load_run(run, manifest, need_masks=False)
    cameras = inputs.heldout if args.split == "heldout" else inputs.cameras
    if args.cameras:
        cams_path = _require(Path(args.cameras), "cameras")
        manifest.add_input(cams_path)
        cameras = load_cameras(cams_path)
    if args.views:
        picked = [int(v) for v in args.views.split(",")]
        if any(v < 0 or v >= len(cameras) for v in picked):
            raise UsageError(f"view index out of range 0..{len(cameras) - 1}")
    else:
        picked = list(range(len(cameras)))
    if state.features.shape[0] != inputs.scene.n:
        raise UsageError(f"checkpoint has {state.features.shape[0]} Gaussians, scene has {inputs.scene.n}")
    with manifest.phase("render"):
        weights = precompute_weights(inputs.scene, [cameras[v] for v in picked], args.threads)
        for v, w in zip(picked, weights):
            seg = render_segmentation(state.features, state.codebook, w)
            for p in export_segmentation(seg, out / f"view_{v:03d}", args.palette_seed):
                manifest.add_output(p)
    if args.gaussians:
        ids = assign_gaussian_ids(state.features, state.codebook)
        path = out / "gaussian_ids.txt"
        path.write_text("".join(f"{int(i)}\n" for i in ids))
        manifest.add_output(path)
    manifest.timings = {}
    manifest.write(out / MANIFEST_FILE)
    print(f"wrote {len(picked)} segmentations to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_files = sorted(_require(gt_dir, "ground-truth directory").glob("view_*.ulmk"))
    if not gt_files:
        raise UsageError(f"no masks in {gt_dir}")
    preds, gts = [], []
    for g in gt_files:
        p = _require(pred_dir / g.name, "prediction")
        preds.append(read_mask(p))
        gts.append(read_mask(g))
    try:
        report = compute_metrics(preds, gts, boundary_width=args.boundary_width, per_view=args.per_view)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(report.to_text())
    if args.csv:
        report.write_csv(args.csv)
    return EXIT_OK


def _heldout_metrics(inputs: RunInputs, state, threads) -> object:
    weights = precompute_weights(inputs.scene, inputs.heldout, threads)
    preds = [render_segmentation(state.features, state.codebook, w) for w in weights]
    return compute_metrics(preds, inputs.heldout_gt)


def _eval_inputs(inputs: RunInputs) -> RunInputs:
    if not inputs.heldout:
        raise UsageError("run directory has no held-out views to score against")
    return inputs


def _cluster_sweep(inputs: RunInputs, cfg: TrainConfig, threads):
    contrastive = dataclasses.replace(cfg, w_class=0.0, w_concen=0.0)
    weights = precompute_weights(inputs.scene, inputs.cameras, threads)
    state = run_training(inputs.scene, inputs.cameras, inputs.masks, contrastive, weights=weights)
    hw = precompute_weights(inputs.scene, inputs.heldout, threads)
    return sweep_cluster_params(state.features, inputs.scene.opacities, default_grid(), hw, inputs.heldout_gt, threads)


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("ablate", cfg.to_dict(), cfg.seed)
    inputs = _eval_inputs(_load_run(run, manifest))
    weights = precompute_weights(inputs.scene, inputs.cameras, args.threads)
    rows = []
    for name, arm in ablation_ladder(cfg):
        with manifest.phase(name):
            state = run_training(inputs.scene, inputs.cameras, inputs.masks, arm, weights=weights)
            rep = _heldout_metrics(inputs, state, args.threads)
        rows.append([name, arm.mapping, int(arm.concentration), int(arm.filtering),
                     f"{rep.miou:.6f}", f"{rep.fscore:.6f}", f"{rep.mbiou:.6f}"])
        print(f"{name:16s} miou={rep.miou:.4f} fscore={rep.fscore:.4f} mbiou={rep.mbiou:.4f}", flush=True)
    mious = [float(r[4]) for r in rows]
    verdict = "PASS" if ladder_is_monotone(mious) else "FAIL"
    if args.with_cluster_baseline:
        with manifest.phase("cluster_baseline"):
            sweep = _cluster_sweep(inputs, cfg, args.threads)
        b = sweep.best
        rows.append([f"cluster(eps={sweep.best_params.eps},m={sweep.best_params.min_size})",
                     "", "", "", f"{b.miou:.6f}", f"{b.fscore:.6f}", f"{b.mbiou:.6f}"])
        print(f"cluster baseline best miou={b.miou:.4f}")
    path = out / "ladder.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "mapping", "concentration", "filtering", "miou", "fscore", "mbiou"])
        w.writerows(rows)
    (out / "verdict.txt").write_text(verdict + "\n")
    manifest.add_output(path)
    manifest.add_output(out / "verdict.txt")
    manifest.write(out / MANIFEST_FILE)
    print(f"ladder verdict: {verdict}")
    return EXIT_OK


def cmd_cluster_baseline(args) -> int:
    cfg = _train_config(args)
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "cluster"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("cluster-baseline", cfg.to_dict(), cfg.seed)
    inputs = _eval_inputs(_load_run(run, manifest))
    with manifest.phase("sweep"):
        sweep = _cluster_sweep(inputs, cfg, args.threads)
    path = out / "sweep.csv"
    sweep.write_csv(path)
    manifest.add_output(path)
    manifest.write(out / MANIFEST_FILE)
    p = sweep.best_params
    print(f"best eps={p.eps} min_size={p.min_size}\n{sweep.best.to_text()}\nspread={sweep.spread:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", required=True, help="directory written by `gen`")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--pixels", type=int, help="pixels sampled per step")
    p.add_argument("--mapping", choices=("normalized", "area"))
    p.add_argument("--no-concen", action="store_true")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulift", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default ULIFT_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene, cameras and masks")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file with SyntheticConfig fields")
    g.add_argument("--objects", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--heldout", type=int)
    g.add_argument("--size", type=int, help="image width and height")
    g.add_argument("--dim", type=int, help="feature dimension")
    g.add_argument("--seed", type=int)
    g.add_argument("--corruption", choices=("permute", "full", "none"))
    g.add_argument("--split-prob", dest="split_prob", type=float)
    g.add_argument("--merge-prob", dest="merge_prob", type=float)
    g.add_argument("--boundary-flip", dest="boundary_flip_prob", type=float)
    g.add_argument("--spurious-rate", dest="spurious_segment_rate", type=float)
    g.add_argument("--no-permute", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="optimize features and codebook")
    _add_train_flags(t)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="render segmentations from a checkpoint")
    i.add_argument("--run", required=True)
    i.add_argument("--checkpoint")
    i.add_argument("--out")
    i.add_argument("--split", choices=("heldout", "train"), default="heldout")
    i.add_argument("--cameras", help="camera file overriding --split")
    i.add_argument("--views", help="comma-separated view indices")
    i.add_argument("--gaussians", action="store_true", help="also write per-Gaussian codebook ids")
    i.add_argument("--palette-seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--csv")
    e.add_argument("--boundary-width", type=int, default=3)
    e.add_argument("--per-view", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the four-arm ablation ladder")
    _add_train_flags(a)
    a.add_argument("--with-cluster-baseline", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("cluster-baseline", help="contrastive features + density clustering sweep")
    _add_train_flags(c)
    c.set_defaults(func=cmd_cluster_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", None) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, SceneFormatError, SceneValidationError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
