"""Per-frame processing chain shared by the CLI subcommands.

undistort -> marker detection -> gradient lookup -> Poisson depth ->
marker tracking -> slip detection -> FEM forces.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import io
from .core import SensorGeometry, TactileImage
from .distortion import DetectionError, MarkerSet, WarpMap, apply_warp, detect_markers, dilate_cross, load_warp
from .fem import Camera, MaterialParams, assemble, compute_forces, displacement_field, mesh_for_sensor
from .markers import MotionField, track
from .photostereo import CalibrationTable, reconstruct
from .slip import SlipConfig, detect_slip

FRAME_SUFFIXES = (".png", ".ppm", ".pnm")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    table: str
    reference: str
    warp: str | None = None
    frames: str | None = None
    out: str = "out"
    seed: int = 0
    jobs: int = 1
    pixel_pitch: float = SensorGeometry.pixel_pitch
    gel_thickness: float = SensorGeometry.gel_thickness
    marker_spacing: float = 1.6  # mm, sets the tracking radius
    slip: SlipConfig = field(default_factory=SlipConfig)
    mesh: tuple[int, int] = (32, 24)
    material: MaterialParams = field(default_factory=MaterialParams)
    camera_distance: float = 20.0  # mm
    save_forces: bool = True

    @classmethod
    def from_mapping(cls, d: dict, base: Path | None = None) -> "PipelineConfig":
        d = dict(d)
        base = base or Path(".")
        try:
            for key in ("table", "reference", "warp", "frames"):
                if d.get(key) is not None:
                    d[key] = str((base / d[key]).resolve()) if not Path(d[key]).is_absolute() else d[key]
            if "slip" in d:
                d["slip"] = SlipConfig(**d["slip"])
            if "material" in d:
                d["material"] = MaterialParams(**d["material"])
            if "mesh" in d:
                d["mesh"] = tuple(int(v) for v in d["mesh"])
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_mapping(data, path.parent)

    def check(self) -> None:
        for key in ("table", "reference", "warp", "frames"):
            p = getattr(self, key)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"{key} path does not exist: {p}")
        if self.jobs < 1 or self.pixel_pitch <= 0 or self.marker_spacing <= 0 or min(self.mesh) < 1:
            raise ConfigError("jobs, pixel pitch, marker spacing and mesh size must be positive")


def marker_mask(image: TactileImage, threshold: float = 0.5, grow: int = 2) -> np.ndarray:
    gray = image.gray()
    return dilate_cross(gray < threshold * np.median(gray), grow)


def _round(v, nd=9):
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(round(float(v), nd))


class Engine:
    """Holds the read-only state (table, warp, reference, stiffness) for a run."""

    def __init__(self, table: CalibrationTable, reference: TactileImage, geometry: SensorGeometry,
                 warp: WarpMap | None = None, slip: SlipConfig = SlipConfig(), mesh_dims=(32, 24),
                 material: MaterialParams = MaterialParams(), camera: Camera = Camera(),
                 marker_spacing: float = 1.6):
        self.table = table
        self.geometry = geometry
        self.warp = warp
        self.reference = apply_warp(reference, warp) if warp is not None else reference
        self.slip_config = slip
        self.camera = camera
        self.mesh = mesh_for_sensor(geometry, *mesh_dims)
        self.K = assemble(self.mesh, material)
        self.ref_markers, self.ref_mask = self._markers(self.reference)
        self.max_displacement = 0.5 * marker_spacing / geometry.pixel_pitch

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Engine":
        reference = io.read_image(cfg.reference)
        geometry = SensorGeometry(cfg.pixel_pitch, cfg.gel_thickness, reference.width, reference.height)
        warp = load_warp(cfg.warp) if cfg.warp else None
        return cls(CalibrationTable.load(cfg.table), reference, geometry, warp, cfg.slip, cfg.mesh,
                   cfg.material, Camera(distance_mm=cfg.camera_distance), cfg.marker_spacing)

    @staticmethod
    def _markers(image: TactileImage) -> tuple[MarkerSet, np.ndarray]:
        try:
            return detect_markers(image, return_mask=True)
        except DetectionError:
            return MarkerSet(np.empty((0, 2))), marker_mask(image)

    def undistort(self, frame: TactileImage) -> TactileImage:
        return apply_warp(frame, self.warp) if self.warp is not None else frame

    def process(self, frame: TactileImage, name: str = "") -> dict:
        """Run the full chain on one raw frame; returns the record plus artefacts."""
        img = self.undistort(frame)
        cur_markers, cur_mask = self._markers(img)
        # one extra pixel catches the anti-aliased rims left by resampling
        exclude = dilate_cross(self.ref_mask | cur_mask, 1)
        rec = reconstruct(img, self.reference, self.table, self.geometry, exclude=exclude,
                          solver_dtype=np.float32)
        if len(self.ref_markers):
            motion = track(self.ref_markers, cur_markers, self.max_displacement)
        else:
            motion = MotionField(np.empty((0, 2)), np.empty((0, 2)), np.empty(0, int), np.empty(0, int))
        report = detect_slip(motion, rec.depth, self.slip_config)
        u = displacement_field(motion, rec.depth, self.mesh, self.geometry, self.camera)
        forces = compute_forces(self.K, u, self.mesh)
        z = rec.depth.z
        record = {
            "frame": name,
            "depth": {
                "max_mm": _round(z.max()),
                "peak_px": [int(v) for v in np.unravel_index(int(np.argmax(z)), z.shape)[::-1]],
                "contact_area_px": int(report.contact_mask.sum()),
                "clamped_px": int(rec.depth.clamped),
            },
            "diagnostics": {k: _round(v) for k, v in sorted(rec.diagnostics.items())},
            "markers": {"tracked": len(motion), "unmatched_ref": motion.unmatched_ref,
                        "unmatched_cur": motion.unmatched_cur},
            "slip": report.to_dict(),
            "force": {k: ([_round(x) for x in v] if isinstance(v, list) else _round(v))
                      for k, v in forces.summary().items()},
        }
        return {"record": record, "image": img, "depth": rec.depth, "motion": motion,
                "report": report, "forces": forces}


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frame directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def run(cfg: PipelineConfig, frames_dir=None, plots: bool = False) -> dict:
    """Process every frame of a directory stream with a bounded worker pool.

    Deterministic outputs go to ``records.jsonl`` (and per-frame force CSVs);
    timing goes to ``run_log.json`` only. ``plots`` adds a slip overlay per
    frame under ``plots/``.
    """
    frames_dir = frames_dir or cfg.frames
    if frames_dir is None:
        raise ConfigError("no frame directory given")
    paths = list_frames(frames_dir)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    engine = Engine.from_config(cfg)
    t_setup = time.perf_counter() - t0
    if cfg.save_forces:
        (out / "forces").mkdir(exist_ok=True)
    if plots:
        from .plotting import slip_overlay

        (out / "plots").mkdir(exist_ok=True)

    def work(path):
        result = engine.process(io.read_image(path), path.name)
        if cfg.save_forces:
            result["forces"].to_csv(out / "forces" / f"{path.stem}.csv")
        if plots:
            slip_overlay(result["image"], result["report"], result["motion"], out / "plots" / f"{path.stem}.png")
        return result["record"]

    t1 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        records = list(pool.map(work, paths))
    elapsed = time.perf_counter() - t1
    with open(out / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    summary = {
        "frames": len(records),
        "states": {s: sum(r["slip"]["state"] == s for r in records) for s in sorted({r["slip"]["state"] for r in records})},
    }
    io.write_json(out / "summary.json", summary)
    log = {
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "setup_s": t_setup,
        "processing_s": elapsed,
        "frames_per_second": len(records) / elapsed if elapsed > 0 else float("inf"),
        "jobs": cfg.jobs,
    }
    io.write_json(out / "run_log.json", log)
    return {"records": records, "summary": summary, "log": log}
