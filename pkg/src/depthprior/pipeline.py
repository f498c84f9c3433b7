"""Dataset-level orchestration: refinement, fusion, evaluation and synthetic datasets.

A dataset directory holds one file per view in each of four subdirectories,
named by the zero-padded view id::

    images/000.png    reference color image
    depth/000.pfm     input depth, 0 (or non-finite) marks a hole
    cameras/000.txt   calibration (see ``geometry.read_camera``)
    gt/000.pfm        optional ground-truth depth, used by ``run_eval``

Outputs go to the configured output directory: ``refined/``, ``combined/`` and
``traces/`` per view, ``fused.ply`` plus ``fusion_summary.json``, metric
reports, and an append-only ``manifest.jsonl`` with one entry per written file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from . import __version__
from .engine import SCHEDULE_PRESETS, Schedule, combine_hole_fill, optimize_view, write_trace_csv
from .fusion import FusionParams, PointCloud, fuse_depth_maps, read_ply, write_ply
from .generator import GeneratorConfig
from .geometry import ViewCalibration, read_camera, select_neighbors, warp_image, write_camera
from .imaging import (
    TNT_PREPROCESS,
    DepthMap,
    PreprocessParams,
    RgbdTarget,
    RgbImage,
    depth_to_disparity,
    read_pfm,
    read_rgb,
    write_pfm,
    write_rgb,
)
from .losses import LOSS_PRESETS, LossWeights
from .metrics import MetricRow, d1_error, prf_score, psnr, rmse, write_report
from .synthetic import corrupt_depth, default_scene, read_scene, render_scene, write_scene

logger = logging.getLogger(__name__)

# Clipping presets by scene name. "synthetic" centers the normalized disparity of
# the default synthetic scene (depths roughly 3.9 to 6.6) near 0.5.
PREPROCESS_PRESETS = {**TNT_PREPROCESS, "synthetic": PreprocessParams(2.75, 10.0, 0.0)}

EVAL_MODES = ("rmse", "d1", "psnr", "prf")


class ValidationError(ValueError):
    """The configuration or the dataset on disk is unusable; raised before any work starts."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SynthParams:
    scene_file: Path | None = None
    size: int = 96
    cameras: int = 5
    hole_fraction: float = 0.3
    noise_sigma: float = 0.02


@dataclass(frozen=True)
class EvalParams:
    tau: float = 0.05
    baseline: float | None = None  # stereo baseline for converting depth to pixel disparity (d1)
    gt_cloud: Path | None = None


@dataclass(frozen=True)
class PipelineConfig:
    dataset: Path
    output: Path
    preprocess: PreprocessParams = PREPROCESS_PRESETS["synthetic"]
    loss: LossWeights = LOSS_PRESETS["tnt"]
    schedule: Schedule = SCHEDULE_PRESETS["multiview"]
    generator: GeneratorConfig = GeneratorConfig()
    neighbors: int = 2
    fusion: FusionParams = FusionParams(0.01, 2)
    fusion_input: str = "combined"
    seed: int = 0
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    views: tuple[int, ...] | None = None
    synth: SynthParams = SynthParams()
    eval: EvalParams = EvalParams()

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValidationError("neighbors must be at least 1")
        if self.jobs < 1:
            raise ValidationError("jobs must be at least 1")
        if self.fusion_input not in ("combined", "refined"):
            raise ValidationError(f"fusion input must be 'combined' or 'refined', got {self.fusion_input!r}")

    def digest(self) -> str:
        """Hash of everything that influences refinement results (not paths or job counts)."""
        payload = {
            "preprocess": dataclasses.asdict(self.preprocess),
            "loss": dataclasses.asdict(self.loss),
            "schedule": dataclasses.asdict(self.schedule),
            "generator": dataclasses.asdict(self.generator),
            "neighbors": self.neighbors,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _preset(table: dict, name: str, kind: str):
    if name not in table:
        raise ValidationError(f"unknown {kind} preset {name!r}; choose from {sorted(table)}")
    return table[name]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def config_from_parser(parser: configparser.ConfigParser, base_dir: Path = Path(".")) -> PipelineConfig:
    """Build a config from INI sections; every key is optional except ``[dataset] root``."""

    def section(name):
        return parser[name] if parser.has_section(name) else {}

    def path(text):
        p = Path(text).expanduser()
        return p if p.is_absolute() else base_dir / p

    try:
        ds, pre, lo, sc, ge, re_, fu, out, sy, ev = (
            section(n) for n in ("dataset", "preprocess", "loss", "schedule", "generator",
                                 "refine", "fusion", "output", "synth", "eval"))
        if "root" not in ds:
            raise ValidationError("[dataset] root is required")

        preprocess = _preset(PREPROCESS_PRESETS, pre.get("preset", "synthetic"), "preprocess")
        preprocess = PreprocessParams(float(pre.get("d_min", preprocess.d_min)),
                                      float(pre.get("d_max", preprocess.d_max)),
                                      float(pre.get("d_offset", preprocess.d_offset)))

        loss = _preset(LOSS_PRESETS, lo.get("preset", "tnt"), "loss")
        loss = dataclasses.replace(loss, **{k: float(lo[k]) for k in
                                            ("gamma1", "gamma2", "lambda_z", "lambda_i", "lambda_w") if k in lo})

        schedule = _preset(SCHEDULE_PRESETS, sc.get("preset", "multiview"), "schedule")
        if "epochs" in sc:
            schedule = schedule.with_epochs(int(sc["epochs"]))
        if "base_lr" in sc:
            schedule = dataclasses.replace(schedule, base_lr=float(sc["base_lr"]))

        generator = GeneratorConfig()
        if "encoder_channels" in ge:
            generator = dataclasses.replace(generator, encoder_channels=tuple(int(c) for c in _floats(ge["encoder_channels"])))

        views = tuple(int(v) for v in _floats(ds["views"])) if "views" in ds else None
        return PipelineConfig(
            dataset=path(ds["root"]),
            output=path(out.get("dir", "output")),
            preprocess=preprocess,
            loss=loss,
            schedule=schedule,
            generator=generator,
            neighbors=int(re_.get("neighbors", 2)),
            fusion=FusionParams(float(fu.get("threshold", 0.01)), int(fu.get("min_views", 2))),
            fusion_input=fu.get("input", "combined"),
            seed=int(re_.get("seed", 0)),
            jobs=int(re_.get("jobs", os.cpu_count() or 1)),
            views=views,
            synth=SynthParams(
                scene_file=path(sy["scene"]) if "scene" in sy else None,
                size=int(sy.get("size", 96)),
                cameras=int(sy.get("cameras", 5)),
                hole_fraction=float(sy.get("hole_fraction", 0.3)),
                noise_sigma=float(sy.get("noise_sigma", 0.02)),
            ),
            eval=EvalParams(
                tau=float(ev.get("tau", 0.05)),
                baseline=float(ev["baseline"]) if "baseline" in ev else None,
                gt_cloud=path(ev["gt_cloud"]) if "gt_cloud" in ev else None,
            ),
        )
    except ValidationError:
        raise
    except (ValueError, KeyError) as exc:
        raise ValidationError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise ValidationError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return config_from_parser(parser, path.parent)


# ---------------------------------------------------------------------------
# dataset access


def view_name(view_id: int) -> str:
    return f"{view_id:03d}"


@dataclass(frozen=True)
class ViewFiles:
    view_id: int
    image: Path
    depth: Path
    camera: Path
    gt: Path


def dataset_views(config: PipelineConfig) -> list[ViewFiles]:
    """All views of the dataset (or the configured subset), checking that every input exists."""
    root = config.dataset
    cam_dir = root / "cameras"
    if not cam_dir.is_dir():
        raise ValidationError(f"{cam_dir} does not exist")
    ids = sorted(int(p.stem) for p in cam_dir.glob("*.txt") if p.stem.isdigit())
    wanted = ids if config.views is None else list(config.views)
    files = []
    for i in wanted:
        name = view_name(i)
        vf = ViewFiles(i, root / "images" / f"{name}.png", root / "depth" / f"{name}.pfm",
                       cam_dir / f"{name}.txt", root / "gt" / f"{name}.pfm")
        for p in (vf.image, vf.depth, vf.camera):
            if not p.is_file():
                raise ValidationError(f"view {i}: missing {p}")
        files.append(vf)
    if not files:
        raise ValidationError(f"no views found under {root}")
    return files


def _load_calibrations(config: PipelineConfig) -> dict[int, ViewCalibration]:
    """Calibrations of every view in the dataset (neighbors may lie outside a view subset)."""
    calibs = {}
    for p in sorted((config.dataset / "cameras").glob("*.txt")):
        if p.stem.isdigit():
            try:
                calibs[int(p.stem)] = read_camera(p, int(p.stem))
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
    return calibs


def read_depth(path) -> DepthMap:
    return DepthMap(read_pfm(path).astype(np.float64))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifest


def append_manifest(output: Path, stage: str, file: Path, inputs: Iterable[Path], config_hash: str) -> dict:
    """Append one JSON line describing ``file`` (single writer: the orchestrating process)."""
    entry = {
        "stage": stage,
        "file": str(Path(file).relative_to(output)),
        "sha256": sha256_file(file),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "config": config_hash,
        "tool_version": __version__,
    }
    with open(output / "manifest.jsonl", "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")
    return entry


def read_manifest(output: Path) -> list[dict]:
    path = Path(output) / "manifest.jsonl"
    if not path.exists():
        return []
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _atomic(path: Path, write) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# refine


@dataclass
class RefineOutcome:
    view_id: int
    skipped: bool
    final_loss: float | None = None


def _refine_outputs(config: PipelineConfig, view_id: int) -> tuple[Path, Path, Path]:
    name = view_name(view_id)
    out = config.output
    return out / "refined" / f"{name}.pfm", out / "combined" / f"{name}.pfm", out / "traces" / f"{name}.csv"


def _is_complete(config: PipelineConfig, vf: ViewFiles, manifest: list[dict]) -> bool:
    """A view is done when its outputs exist and the manifest records them for this config and inputs."""
    outputs = _refine_outputs(config, vf.view_id)
    if not all(p.exists() for p in outputs):
        return False
    recorded = {}
    for entry in manifest:
        if entry["stage"] == "refine":
            recorded[entry["file"]] = entry
    digest = config.digest()
    for p in outputs:
        entry = recorded.get(str(p.relative_to(config.output)))
        if entry is None or entry["config"] != digest or entry["sha256"] != sha256_file(p):
            return False
        if entry["inputs"].get(str(vf.depth)) != sha256_file(vf.depth):
            return False
    return True


def _refine_view(config: PipelineConfig, vf: ViewFiles, neighbor_images: list[tuple[int, Path]],
                 calibs: dict[int, ViewCalibration], threads: int | None) -> float:
    """Optimize one view and write its three outputs. Runs in a worker process when jobs > 1."""
    if threads is not None:
        torch.set_num_threads(threads)
    depth = read_depth(vf.depth)
    image = read_rgb(vf.image)
    target = RgbdTarget(image, depth_to_disparity(depth, config.preprocess))
    neighbors = [(read_rgb(image), calibs[i]) for i, image in neighbor_images]
    generator = dataclasses.replace(config.generator, seed=config.seed + vf.view_id)
    result = optimize_view(target, neighbors, calibs[vf.view_id], config.preprocess, config.loss,
                           config=generator, schedule=config.schedule)
    refined_path, combined_path, trace_path = _refine_outputs(config, vf.view_id)
    _atomic(refined_path, lambda p: write_pfm(result.depth.data.astype(np.float32), p))
    _atomic(combined_path, lambda p: write_pfm(combine_hole_fill(depth, result.depth).data.astype(np.float32), p))
    _atomic(trace_path, lambda p: write_trace_csv(result, p))
    return result.trace[-1].total


def _neighbor_plan(config: PipelineConfig, views: list[ViewFiles], calibs) -> dict[int, list[tuple[int, Path]]]:
    """Neighbor view ids and image paths per reference view (empty without a warp term)."""
    plan = {}
    needs_neighbors = config.loss.warp_weight > 0
    for vf in views:
        if vf.view_id not in calibs:
            raise ValidationError(f"view {vf.view_id}: missing calibration")
        if not needs_neighbors:
            plan[vf.view_id] = []
            continue
        depth = read_depth(vf.depth)
        if not depth.valid.any():
            raise ValidationError(f"view {vf.view_id}: input depth has no valid pixels")
        mean_depth = float(depth.data[depth.valid].mean())
        try:
            ids = select_neighbors(vf.view_id, list(calibs.values()), config.neighbors, mean_depth)
        except ValueError as exc:
            raise ValidationError(f"view {vf.view_id}: {exc}") from exc
        nbrs = []
        for i in ids:
            image = config.dataset / "images" / f"{view_name(i)}.png"
            if not image.is_file():
                raise ValidationError(f"neighbor view {i}: missing {image}")
            nbrs.append((i, image))
        plan[vf.view_id] = nbrs
    return plan


def run_refine(config: PipelineConfig, force: bool = False) -> list[RefineOutcome]:
    """Refine every view; completed views are skipped unless ``force``.

    All inputs are validated before the first optimization starts.
    """
    views = dataset_views(config)
    calibs = _load_calibrations(config)
    plan = _neighbor_plan(config, views, calibs)
    for d in ("refined", "combined", "traces"):
        (config.output / d).mkdir(parents=True, exist_ok=True)

    manifest = read_manifest(config.output)
    todo = [vf for vf in views if force or not _is_complete(config, vf, manifest)]
    outcomes = {vf.view_id: RefineOutcome(vf.view_id, skipped=True) for vf in views if vf not in todo}
    digest = config.digest()

    def record(vf, loss):
        outcomes[vf.view_id] = RefineOutcome(vf.view_id, skipped=False, final_loss=loss)
        inputs = [vf.image, vf.depth, vf.camera] + [image for _, image in plan[vf.view_id]]
        for p in _refine_outputs(config, vf.view_id):
            append_manifest(config.output, "refine", p, inputs, digest)
        logger.info("view %d refined, final loss %.6f", vf.view_id, loss)

    jobs = min(config.jobs, len(todo))
    if jobs <= 1:
        for vf in todo:
            record(vf, _refine_view(config, vf, plan[vf.view_id], calibs, None))
    else:
        threads = max(1, (os.cpu_count() or 1) // jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(vf, pool.submit(_refine_view, config, vf, plan[vf.view_id], calibs, threads)) for vf in todo]
            for vf, fut in futures:
                record(vf, fut.result())
    return [outcomes[vf.view_id] for vf in views]


# ---------------------------------------------------------------------------
# fuse


def _prediction_path(config: PipelineConfig, view_id: int) -> Path:
    refined, combined, _ = _refine_outputs(config, view_id)
    return combined if config.fusion_input == "combined" else refined


def run_fuse(config: PipelineConfig) -> PointCloud:
    """Fuse the refined (by default hole-filled) depth maps into ``fused.ply``."""
    views = dataset_views(config)
    calibs = _load_calibrations(config)
    preds = [_prediction_path(config, vf.view_id) for vf in views]
    for p in preds:
        if not p.is_file():
            raise ValidationError(f"missing {p}; run refine first")
    depths = [read_depth(p) for p in preds]
    images = [read_rgb(vf.image) for vf in views]
    cloud = fuse_depth_maps(depths, images, [calibs[vf.view_id] for vf in views], config.fusion)

    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    _atomic(out / "fused.ply", lambda p: write_ply(cloud, p))
    summary = {
        "points": len(cloud),
        "views": [vf.view_id for vf in views],
        "disparity_threshold": config.fusion.disparity_threshold,
        "min_consistent_views": config.fusion.min_consistent_views,
        "input": config.fusion_input,
    }
    _atomic(out / "fusion_summary.json", lambda p: p.write_text(json.dumps(summary, indent=2) + "\n"))
    digest = hashlib.sha256(json.dumps(summary, sort_keys=True).encode()).hexdigest()
    append_manifest(out, "fuse", out / "fused.ply", preds, digest)
    append_manifest(out, "fuse", out / "fusion_summary.json", preds, digest)
    logger.info("fused %d views into %d points", len(views), len(cloud))
    return cloud


# ---------------------------------------------------------------------------
# eval


def _gt_depth(vf: ViewFiles) -> DepthMap:
    if not vf.gt.is_file():
        raise ValidationError(f"view {vf.view_id}: missing ground truth {vf.gt}")
    return read_depth(vf.gt)


def _gt_cloud(config: PipelineConfig, views: list[ViewFiles], calibs) -> PointCloud:
    if config.eval.gt_cloud is not None:
        if not config.eval.gt_cloud.is_file():
            raise ValidationError(f"missing {config.eval.gt_cloud}")
        return read_ply(config.eval.gt_cloud)
    # every ground-truth pixel back-projected once
    depths = [_gt_depth(vf) for vf in views]
    images = [read_rgb(vf.image) for vf in views]
    return fuse_depth_maps(depths, images, [calibs[vf.view_id] for vf in views],
                           FusionParams(config.fusion.disparity_threshold, 1))


def run_eval(config: PipelineConfig, mode: str) -> list[MetricRow]:
    """Score predictions against ground truth; writes ``eval_<mode>.csv`` and ``.txt``.

    rmse: per-view depth RMSE over ground-truth pixels, and over input holes only.
    d1: KITTI outlier percentage on pixel disparity ``fx * baseline / depth``.
    psnr: reference image against each neighbor warped through the predicted depth.
    prf: precision, recall and f-score of ``fused.ply`` against the ground-truth cloud.
    """
    if mode not in EVAL_MODES:
        raise ValidationError(f"unknown eval mode {mode!r}; choose from {list(EVAL_MODES)}")
    views = dataset_views(config)
    calibs = _load_calibrations(config)
    rows: list[MetricRow] = []

    if mode == "prf":
        fused = config.output / "fused.ply"
        if not fused.is_file():
            raise ValidationError(f"missing {fused}; run fuse first")
        p, r, f = prf_score(read_ply(fused), _gt_cloud(config, views, calibs), config.eval.tau)
        rows = [MetricRow("fused", "precision", p), MetricRow("fused", "recall", r), MetricRow("fused", "f_score", f)]
    else:
        if mode == "d1" and config.eval.baseline is None:
            raise ValidationError("d1 needs [eval] baseline to convert depth to pixel disparity")
        preds = {}
        for vf in views:
            path = _prediction_path(config, vf.view_id)
            if not path.is_file():
                raise ValidationError(f"missing {path}; run refine first")
            preds[vf.view_id] = read_depth(path)
        for vf in views:
            pred = preds[vf.view_id]
            name = f"view_{view_name(vf.view_id)}"
            if mode == "rmse":
                gt = _gt_depth(vf)
                holes = gt.valid & ~read_depth(vf.depth).valid
                rows.append(MetricRow(name, "rmse", rmse(pred.data, gt.data, gt.valid & pred.valid)))
                rows.append(MetricRow(name, "rmse_holes", rmse(pred.data, gt.data, holes & pred.valid)))
            elif mode == "d1":
                gt = _gt_depth(vf)
                fb = calibs[vf.view_id].intrinsics.fx * config.eval.baseline
                mask = gt.valid & pred.valid
                to_disp = lambda d: np.where(mask, fb / np.where(mask, d.data, 1.0), 0.0)  # noqa: E731
                rows.append(MetricRow(name, "d1", d1_error(to_disp(pred), to_disp(gt), mask)))
            else:
                ref_img = read_rgb(vf.image)
                mean_depth = float(pred.data[pred.valid].mean())
                ids = select_neighbors(vf.view_id, list(calibs.values()), config.neighbors, mean_depth)
                for i in ids:
                    nbr_img = read_rgb(config.dataset / "images" / f"{view_name(i)}.png")
                    warped = warp_image(pred, nbr_img, calibs[vf.view_id], calibs[i])
                    valid = warped.validity.numpy()
                    value = psnr(warped.warped.numpy()[valid], ref_img.data[valid]) if valid.any() else 0.0
                    rows.append(MetricRow(f"{name}<-{view_name(i)}", "psnr", value))

    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows, out / f"eval_{mode}.csv", out / f"eval_{mode}.txt")
    return rows


# ---------------------------------------------------------------------------
# synth


def run_synth(config: PipelineConfig, force: bool = False) -> list[int]:
    """Render a synthetic dataset (with corrupted input depth and exact ground truth) into the dataset root."""
    s = config.synth
    root = config.dataset
    if (root / "cameras").exists() and any((root / "cameras").iterdir()) and not force:
        raise ValidationError(f"{root} already holds a dataset; pass --force to overwrite")
    if not 0.0 <= s.hole_fraction <= 1.0 or s.noise_sigma < 0:
        raise ValidationError("hole_fraction must lie in [0, 1] and noise_sigma must be non-negative")
    if s.scene_file is not None:
        if not s.scene_file.is_file():
            raise ValidationError(f"missing scene file {s.scene_file}")
        spec = read_scene(s.scene_file)
    else:
        spec = default_scene(seed=config.seed, size=s.size, cameras=s.cameras)
    for d in ("images", "depth", "cameras", "gt"):
        (root / d).mkdir(parents=True, exist_ok=True)
    write_scene(spec, root / "scene.ini")
    ids = []
    for image, depth, calib in render_scene(spec):
        name = view_name(calib.view_id)
        noisy = corrupt_depth(depth, s.hole_fraction, s.noise_sigma, seed=config.seed * 1000 + calib.view_id)
        write_rgb(image, root / "images" / f"{name}.png")
        write_pfm(noisy.data.astype(np.float32), root / "depth" / f"{name}.pfm")
        write_pfm(depth.data.astype(np.float32), root / "gt" / f"{name}.pfm")
        write_camera(calib, root / "cameras" / f"{name}.txt")
        ids.append(calib.view_id)
    return ids
