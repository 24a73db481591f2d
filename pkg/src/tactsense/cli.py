"""Command-line workflows.

Every subcommand accepts ``--config`` (a YAML mapping whose keys fill in any
option not given on the command line), ``--seed``, ``--jobs``, ``--out`` and
``--dry-run``. Structured results go to JSON, tables to CSV and figures to
PNG inside the output directory; a one-line JSON summary is echoed.

Exit codes: 0 ok, 2 configuration error, 3 bad or missing input,
4 numerical failure.
"""
from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import io
from .core import SensorGeometry, ShapeMismatch, TactileImage
from .distortion import AssociationError, DetectionError, detect_markers, fit_undistortion, load_warp, save_warp
from .fem import Camera, InvertedElement, MaterialParams
from .photostereo import CalibrationError, CalibrationTable, calibrate, reconstruct
from .pipeline import ConfigError, Engine, PipelineConfig, run
from .slip import NoFit, SlipConfig

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, io.FormatError, DetectionError, AssociationError,
                CalibrationError, ShapeMismatch)
NUMERIC_ERRORS = (NoFit, InvertedElement, np.linalg.LinAlgError, FloatingPointError, ArithmeticError)


def _exit(code: int, exc: BaseException):
    click.echo(f"error: {exc}", err=True)
    raise click.exceptions.Exit(code)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return data


class Settings:
    """Command-line values layered over the config file, then over defaults."""

    def __init__(self, params: dict, config: dict, base: Path):
        self.params = params
        self.config = config
        self.base = base

    def get(self, key, default=None):
        v = self.params.get(key)
        if v is not None and v != ():
            return v
        return self.config.get(key, default)

    def path(self, key, required: bool = True):
        v = self.params.get(key)
        if v is None:
            v = self.config.get(key)
            if v is not None and not Path(v).is_absolute():
                v = str(self.base / v)
        if v is None and required:
            raise ConfigError(f"missing required input '{key}'")
        if v is not None and not Path(v).exists():
            raise FileNotFoundError(f"{key} not found: {v}")
        return v


def workflow(fn):
    """Shared options plus error-to-exit-code mapping."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="YAML file with default values for this command.")
    @click.option("--seed", type=int, default=None, help="Random seed (default 0).")
    @click.option("--jobs", type=int, default=None, help="Worker threads (default 1).")
    @click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
    @click.option("--dry-run", is_flag=True, help="Validate inputs and exit without computing.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, jobs, out, dry_run, **params):
        try:
            if config_path is not None and not Path(config_path).is_file():
                raise ConfigError(f"config file not found: {config_path}")
            cfg = _load_config(config_path)
            base = Path(config_path).parent if config_path else Path(".")
            s = Settings(params, cfg, base)
            s.seed = int(seed if seed is not None else cfg.get("seed", 0))
            s.jobs = int(jobs if jobs is not None else cfg.get("jobs", 1))
            if s.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            out_dir = out if out is not None else cfg.get("out", "out")
            s.out = Path(out_dir) if Path(out_dir).is_absolute() or out is not None else base / out_dir
            s.dry_run = dry_run
            summary = fn(s)
        except click.exceptions.Exit:
            raise
        except (ConfigError, yaml.YAMLError, click.BadParameter) as exc:
            _exit(EXIT_CONFIG, exc)
        except INPUT_ERRORS as exc:
            _exit(EXIT_INPUT, exc)
        except NUMERIC_ERRORS as exc:
            _exit(EXIT_NUMERIC, exc)
        except (TypeError, ValueError) as exc:
            # remaining ValueErrors come from parameter validation in the modules
            _exit(EXIT_CONFIG, exc)
        if summary is not None:
            click.echo(json.dumps(summary, sort_keys=True))

    return wrapper


def _geometry(s: Settings, image: TactileImage) -> SensorGeometry:
    return SensorGeometry(
        pixel_pitch=float(s.get("pixel_pitch", SensorGeometry.pixel_pitch)),
        gel_thickness=float(s.get("gel_thickness", SensorGeometry.gel_thickness)),
        width_px=image.width,
        height_px=image.height,
    )


def _dry(s: Settings, **checked):
    return {"dry_run": True, "ok": True, **{k: str(v) for k, v in checked.items()}}


@click.group()
@click.version_option(package_name="artifact", prog_name="tactsense")
def main():
    """Tactile-sensor image processing."""


# ----------------------------------------------------------------- render

@main.command("render")
@click.option("--kind", type=click.Choice(["scene", "calibration", "sequence"]), default=None)
@workflow
def render_cmd(s: Settings):
    """Render a synthetic scene, a calibration set or a press sequence.

    Config keys: geometry, illumination, markers, indenter, noise, albedo,
    distortion_k1, plus calibration{n, radius, depth} or
    sequence{frames, radius, depth, step, slip_markers}.
    """
    from . import simulator as sim

    kind = s.get("kind", "scene")
    scene, illum, _, noise = sim.scene_from_config(s.config)
    geometry = scene.geometry
    k1 = float(s.get("distortion_k1", 0.0))
    if s.dry_run:
        return _dry(s, kind=kind, width=geometry.width_px, height=geometry.height_px)
    s.out.mkdir(parents=True, exist_ok=True)

    def save(name, image):
        if k1:
            image = sim.apply_synthetic_distortion(image, k1)
        io.write_image(s.out / name, image)
        return name

    if kind == "scene":
        image = sim.render(scene, illum, noise_sigma=noise, seed=s.seed)
        save("image.png", image)
        io.save_depth(s.out / "depth.grid", scene.height)
        centres = scene.marker_centers()
        io.write_json(s.out / "truth.json", {
            "indenter": s.config.get("indenter"),
            "pixel_pitch": geometry.pixel_pitch,
            "depth_max_mm": float(scene.height.z.max()),
            "markers_px": None if centres is None else np.round(centres, 6).tolist(),
            "distortion_k1": k1,
            "seed": s.seed,
        })
        return {"kind": kind, "image": "image.png"}

    if kind == "calibration":
        c = s.config.get("calibration", {})
        radius = float(c.get("radius", 3.0))
        samples = sim.generate_calibration_set(radius, int(c.get("n", 5)), illum, geometry,
                                               depth=float(c.get("depth", 1.0)), seed=s.seed)
        save("reference.png", sim.reference_frame(illum, geometry))
        presses = []
        for i, smp in enumerate(samples):
            name = save(f"press_{i:03d}.png", smp.image)
            presses.append({"image": name, "center": [round(v, 9) for v in smp.center],
                            "contact_radius": round(smp.contact_radius, 9)})
        io.write_json(s.out / "index.json", {"reference": "reference.png", "sphere_radius": radius,
                                             "pixel_pitch": geometry.pixel_pitch, "presses": presses})
        return {"kind": kind, "presses": len(presses)}

    c = s.config.get("sequence", {})
    markers = scene.markers or sim.MarkerLayer()
    slip = {int(k): v for k, v in (c.get("slip_markers") or {}).items()}
    ref, frames, truth = sim.press_sequence(int(c.get("frames", 10)), illum, geometry, markers,
                                            float(c.get("radius", 3.0)), float(c.get("depth", 1.0)),
                                            tuple(c.get("step", (1.5, 0.5))), slip or None)
    (s.out / "frames").mkdir(exist_ok=True)
    save("reference.png", ref)
    for i, f in enumerate(frames):
        save(f"frames/frame_{i:03d}.png", f)
    io.write_json(s.out / "truth.json", [{"center": t["center"]} for t in truth])
    return {"kind": kind, "frames": len(frames)}


# -------------------------------------------------------------- calibrate

@main.command("calibrate")
@click.argument("index", required=False, type=click.Path(dir_okay=False))
@click.option("--bins", type=int, default=None)
@workflow
def calibrate_cmd(s: Settings):
    """Build a lookup table from an index of sphere presses.

    INDEX is a JSON file {reference, sphere_radius, presses: [{image, center,
    contact_radius}]} with image paths relative to it.
    """
    index_path = Path(s.path("index"))
    index = io.read_json(index_path)
    if not isinstance(index, dict) or "presses" not in index or "reference" not in index:
        raise ConfigError(f"{index_path}: needs 'reference' and 'presses'")
    root = index_path.parent
    presses = index["presses"]
    if not presses:
        raise CalibrationError("calibration needs at least one press (the press list is empty)")
    missing = [p["image"] for p in presses if not (root / p["image"]).exists()]
    if missing or not (root / index["reference"]).exists():
        raise FileNotFoundError(f"missing calibration images: {missing or index['reference']}")
    bins = int(s.get("bins", 32))
    if s.dry_run:
        return _dry(s, presses=len(presses), bins=bins)
    reference = io.read_image(root / index["reference"])
    pitch = float(index.get("pixel_pitch", s.get("pixel_pitch", SensorGeometry.pixel_pitch)))
    geometry = SensorGeometry(pitch, width_px=reference.width, height_px=reference.height)
    data = [(io.read_image(root / p["image"]), tuple(p["center"]), float(p["contact_radius"])) for p in presses]
    table = calibrate(data, reference, geometry, float(index["sphere_radius"]), bins=bins)
    s.out.mkdir(parents=True, exist_ok=True)
    table.save(s.out / "table.lut")
    counts = table.count[table.populated]
    report = {
        "bins": table.bins,
        "populated_bins": int(table.populated.sum()),
        "populated_fraction": float(table.populated.mean()),
        "samples": int(table.count.sum()),
        "samples_per_bin": {"min": int(counts.min()), "median": float(np.median(counts)), "max": int(counts.max())},
        "max_fallback_distance_bins": float(table.nearest_dist.max()),
    }
    io.write_json(s.out / "coverage.json", report)
    return {"table": str(s.out / "table.lut"), "populated_bins": report["populated_bins"]}


# ------------------------------------------------------------ reconstruct

@main.command("reconstruct")
@click.argument("frame", required=False, type=click.Path(dir_okay=False))
@click.option("--reference", type=click.Path(dir_okay=False), default=None)
@click.option("--table", type=click.Path(dir_okay=False), default=None)
@click.option("--warp", type=click.Path(dir_okay=False), default=None)
@click.option("--plot/--no-plot", default=True)
@workflow
def reconstruct_cmd(s: Settings):
    """Depth map of one frame: depth.grid, depth.json and a 3-D view."""
    frame_path, ref_path, table_path = s.path("frame"), s.path("reference"), s.path("table")
    warp_path = s.path("warp", required=False)
    frame, reference = io.read_image(frame_path), io.read_image(ref_path)
    table = CalibrationTable.load(table_path)
    warp = load_warp(warp_path) if warp_path else None
    if frame.shape != reference.shape or (warp is not None and warp.shape != frame.shape):
        raise ShapeMismatch("frame, reference and warp sizes differ")
    if s.dry_run:
        return _dry(s, frame=frame_path, reference=ref_path, table=table_path)
    geometry = _geometry(s, frame)
    if warp is not None:
        from .distortion import apply_warp

        frame, reference = apply_warp(frame, warp), apply_warp(reference, warp)
    rec = reconstruct(frame, reference, table, geometry)
    s.out.mkdir(parents=True, exist_ok=True)
    io.save_depth(s.out / "depth.grid", rec.depth)
    z = rec.depth.z
    info = {
        "max_mm": float(z.max()),
        "peak_px": [int(v) for v in np.unravel_index(int(np.argmax(z)), z.shape)[::-1]],
        "clamped_px": rec.depth.clamped,
        "diagnostics": rec.diagnostics,
    }
    io.write_json(s.out / "depth.json", info)
    if s.get("plot", True):
        from .plotting import depth_surface

        depth_surface(rec.depth, geometry, s.out / "depth_3d.png")
    return {"depth": str(s.out / "depth.grid"), "max_mm": info["max_mm"]}


# ------------------------------------------------------- slip and force

def _engine(s: Settings, need_forces: bool) -> tuple[Engine, TactileImage]:
    ref_path, cur_path, table_path = s.path("reference_frame"), s.path("frame"), s.path("table")
    warp_path = s.path("warp", required=False)
    reference, frame = io.read_image(ref_path), io.read_image(cur_path)
    if frame.shape != reference.shape:
        raise ShapeMismatch("the two frames differ in size")
    slip = SlipConfig(
        depth_threshold=float(s.get("depth_threshold", SlipConfig.depth_threshold)),
        deviation_threshold=float(s.get("deviation_threshold", SlipConfig.deviation_threshold)),
        trigger_fraction=float(s.get("trigger_fraction", SlipConfig.trigger_fraction)),
    )
    mesh = tuple(int(v) for v in s.get("mesh", (32, 24)))
    material = MaterialParams(float(s.get("young_modulus", 85.0)), float(s.get("poisson_ratio", 0.48)))
    table = CalibrationTable.load(table_path)
    warp = load_warp(warp_path) if warp_path else None
    if warp is not None and warp.shape != frame.shape:
        raise ShapeMismatch("warp map and frames differ in size")
    geometry = _geometry(s, frame)
    if s.dry_run:
        return None, frame
    engine = Engine(table, reference, geometry, warp, slip, mesh if need_forces else (1, 1), material,
                    Camera(distance_mm=float(s.get("camera_distance", 20.0))),
                    float(s.get("marker_spacing", 1.6)))
    return engine, frame


def _pair_options(fn):
    fn = click.option("--reference", "reference_frame", type=click.Path(dir_okay=False), default=None,
                      help="Undeformed frame (with markers).")(fn)
    fn = click.option("--table", type=click.Path(dir_okay=False), default=None)(fn)
    fn = click.option("--warp", type=click.Path(dir_okay=False), default=None)(fn)
    fn = click.option("--plot/--no-plot", default=True)(fn)
    fn = click.argument("frame", required=False, type=click.Path(dir_okay=False))(fn)
    return fn


@main.command("slip")
@_pair_options
@click.option("--depth-threshold", type=float, default=None)
@click.option("--deviation-threshold", type=float, default=None)
@click.option("--trigger-fraction", type=float, default=None)
@workflow
def slip_cmd(s: Settings):
    """Slip state of FRAME against the reference: slip.json and an overlay."""
    engine, frame = _engine(s, need_forces=False)
    if s.dry_run:
        return _dry(s, frame=s.path("frame"))
    res = engine.process(frame, Path(s.path("frame")).name)
    s.out.mkdir(parents=True, exist_ok=True)
    io.write_json(s.out / "slip.json", res["report"].to_dict(res["motion"]))
    res["motion"].to_csv(s.out / "motion.csv")
    if s.get("plot", True):
        from .plotting import slip_overlay

        slip_overlay(res["image"], res["report"], res["motion"], s.out / "slip_overlay.png")
    r = res["report"]
    return {"state": r.state, "score": round(r.score, 9), "contact_markers": r.n_contact}


@main.command("force")
@_pair_options
@click.option("--mesh", type=int, nargs=2, default=None, help="Elements along x and y.")
@click.option("--young-modulus", type=float, default=None, help="kPa")
@click.option("--poisson-ratio", type=float, default=None)
@workflow
def force_cmd(s: Settings):
    """Nodal contact forces of FRAME: forces.csv plus tangential/normal plots."""
    engine, frame = _engine(s, need_forces=True)
    if s.dry_run:
        return _dry(s, frame=s.path("frame"))
    res = engine.process(frame, Path(s.path("frame")).name)
    s.out.mkdir(parents=True, exist_ok=True)
    forces = res["forces"]
    forces.to_csv(s.out / "forces.csv")
    io.write_json(s.out / "force_summary.json", forces.summary())
    if s.get("plot", True):
        from .plotting import force_overlays

        force_overlays(res["image"], forces, engine.geometry, s.out / "force_tangential.png",
                       s.out / "force_normal.png")
    return {k: v for k, v in forces.summary().items()}


# ------------------------------------------------------- illumination

@main.command("optimize-illum")
@click.option("--budget", type=int, default=None, help="Cost evaluations (default 500).")
@workflow
def optimize_cmd(s: Settings):
    """Optimise LED pose and beam shaping for a uniform, white, centred field.

    Config keys: initial (design mapping; defaults to the skewed layout),
    bounds (t1, t2, m_x, m_y, y_max, spread_max, surface_height),
    weights (three numbers).
    """
    from . import illum
    from .plotting import cost_trace, illumination_heatmaps

    initial = illum.LensDesign.from_dict(s.config["initial"]) if "initial" in s.config else illum.SKEWED_DESIGN
    bounds = illum.OptBounds(**s.config.get("bounds", {}))
    weights = tuple(float(w) for w in s.config.get("weights", (1.0, 1.0, 1.0)))
    if len(weights) != 3:
        raise ConfigError("weights needs three values")
    budget = int(s.get("budget", 500))
    if s.dry_run:
        return _dry(s, budget=budget)
    res = illum.optimize(initial, bounds, budget=budget, seed=s.seed, weights=weights)
    m0, m1 = illum.metrics(res.before), illum.metrics(res.after)
    s.out.mkdir(parents=True, exist_ok=True)
    out = {
        "initial": illum.project(initial, bounds).as_dict(),
        "optimized": res.design.as_dict(),
        "bounds": {k: getattr(bounds, k) for k in ("t1", "t2", "m_x", "m_y", "y_max", "spread_max", "surface_height")},
        "cost": {"initial": res.initial_cost, "final": res.cost},
        "sigma": {"initial": m0.sigma, "final": m1.sigma},
        "chromaticity": {"initial": list(m0.cie_mean), "final": list(m1.cie_mean)},
        "centroid_mm": {"initial": list(m0.centroid), "final": list(m1.centroid)},
        "evaluations": res.evaluations,
        "within_bounds": illum.satisfies(res.design, bounds),
        "seed": s.seed,
    }
    io.write_json(s.out / "illumination.json", out)
    np.savetxt(s.out / "trace.csv", np.asarray(res.trace), fmt="%.12e", header="cost", comments="")
    illumination_heatmaps(res.before, res.after, s.out / "heatmaps.png")
    cost_trace(res.trace, s.out / "trace.png")
    return {"initial_cost": res.initial_cost, "final_cost": res.cost, "sigma_initial": m0.sigma,
            "sigma_final": m1.sigma}


# ------------------------------------------------------------ warp fit

@main.command("fit-warp")
@click.argument("image", required=False, type=click.Path(dir_okay=False))
@click.option("--rows", type=int, default=None)
@click.option("--cols", type=int, default=None)
@click.option("--spacing", type=float, default=None, help="Marker pitch in mm.")
@workflow
def fit_warp_cmd(s: Settings):
    """Fit the undistortion map from a frame of the marker grid."""
    path = s.path("image")
    image = io.read_image(path)
    rows, cols = int(s.get("rows", 11)), int(s.get("cols", 15))
    spacing = float(s.get("spacing", 1.6))
    if s.dry_run:
        return _dry(s, image=path, rows=rows, cols=cols)
    geometry = _geometry(s, image)
    found = detect_markers(image, expected=rows * cols)
    warp = fit_undistortion(found, rows, cols, spacing, geometry)
    s.out.mkdir(parents=True, exist_ok=True)
    save_warp(s.out / "warp.grid", warp)
    info = {"markers": len(found), "max_offset_px": warp.max_offset(), "injective": warp.is_injective()}
    io.write_json(s.out / "warp.json", info)
    return info


# ------------------------------------------------------------- pipeline

@main.command("pipeline")
@click.argument("frames", required=False, type=click.Path(file_okay=False))
@click.option("--plots/--no-plots", default=None, help="Also write per-frame slip overlays.")
@workflow
def pipeline_cmd(s: Settings):
    """Process a directory of frames: records.jsonl, force CSVs, run_log.json.

    The config holds table, reference, warp (optional), frames and the slip,
    mesh, material and camera settings.
    """
    cfg = dict(s.config)
    for key in ("seed", "jobs", "out"):
        cfg.pop(key, None)
    plots = bool(s.get("plots", False))
    cfg.pop("plots", None)
    frames = s.params.get("frames")
    if frames is not None:
        cfg["frames"] = str(Path(frames).resolve())
    cfg.update(seed=s.seed, jobs=s.jobs, out=str(s.out))
    pc = PipelineConfig.from_mapping(cfg, s.base)
    if pc.frames is None:
        raise ConfigError("no frame directory given")
    if s.dry_run:
        from .pipeline import list_frames

        return _dry(s, frames=len(list_frames(pc.frames)), table=pc.table)
    result = run(pc, plots=plots)
    log = result["log"]
    return {"frames": result["summary"]["frames"], "states": result["summary"]["states"],
            "frames_per_second": round(log["frames_per_second"], 3)}


if __name__ == "__main__":
    sys.exit(main())
