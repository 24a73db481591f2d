"""Synthetic tactile sensor.

Renders Lambertian three-channel images of a deformed gel surface, with an
optional printed marker grid, plus the helpers that produce ground truth for
calibration, tracking and distortion tests.

Frame convention: the gel surface is the plane z = 0 and the camera and
emitters sit on the z > 0 side. The depth map is the height of the surface
toward the camera, so a surface normal is (-p, -q, 1) / norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .core import DepthMap, GradientField, SensorGeometry, TactileImage

DIRECTIONAL = "directional_ideal"
POINT_SOURCE = "point_source"
LED_VIEWING_ANGLE = 60.0  # degrees, full width at half power
FLAT_PEAK = 0.6  # flat-surface reference peak after exposure normalisation


def lobe_exponent(viewing_angle_deg: float = LED_VIEWING_ANGLE) -> float:
    """Cosine-power exponent whose half-power half-angle matches the datasheet angle."""
    half = math.radians(viewing_angle_deg / 2.0)
    return math.log(0.5) / math.log(math.cos(half))


@dataclass(frozen=True)
class Emitter:
    position: tuple[float, float, float]  # mm; z > 0 on the camera side
    tilt: float = 30.0  # degrees below the horizontal plane that the beam axis points
    azimuth: float = 0.0  # degrees, horizontal heading of the beam axis
    exponent: float = field(default_factory=lobe_exponent)
    power: float = 1.0

    def __post_init__(self):
        if self.power < 0 or self.exponent < 0:
            raise ValueError("emitter power and lobe exponent must be non-negative")
        if self.position[2] <= 0:
            raise ValueError("emitters must sit on the camera side (z > 0)")

    @property
    def axis(self) -> np.ndarray:
        t, a = math.radians(self.tilt), math.radians(self.azimuth)
        return np.array([math.cos(t) * math.cos(a), math.cos(t) * math.sin(a), -math.sin(t)])

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from the origin toward the emitter (directional mode light)."""
        v = np.asarray(self.position, dtype=float)
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class IlluminationConfig:
    channels: tuple  # three tuples of Emitter, ordered R, G, B
    mode: str = DIRECTIONAL
    exposure: float | None = None  # None: chosen so the flat reference peaks at FLAT_PEAK

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ValueError("illumination needs exactly three channels")
        if self.mode not in (DIRECTIONAL, POINT_SOURCE):
            raise ValueError(f"unknown illumination mode {self.mode!r}")
        object.__setattr__(self, "channels", tuple(tuple(c) for c in self.channels))

    def scaled(self, factor: float) -> "IlluminationConfig":
        chans = tuple(tuple(replace(e, power=e.power * factor) for e in c) for c in self.channels)
        return replace(self, channels=chans)


def default_illumination(mode: str = DIRECTIONAL, elevation: float = 45.0, radius: float = 20.0) -> IlluminationConfig:
    """Three emitters at 120 degree spacing, one per colour channel.

    In directional mode the emitters sit far away at the given elevation; in
    point-source mode they sit on a ring of ``radius`` mm and aim at the centre.
    """
    chans = []
    for k in range(3):
        az = math.radians(90.0 + 120.0 * k)
        if mode == DIRECTIONAL:
            e = math.radians(elevation)
            pos = (100 * math.cos(e) * math.cos(az), 100 * math.cos(e) * math.sin(az), 100 * math.sin(e))
            chans.append((Emitter(pos, tilt=elevation, azimuth=math.degrees(az) + 180.0),))
        else:
            h = radius * math.tan(math.radians(elevation))
            pos = (radius * math.cos(az), radius * math.sin(az), h)
            chans.append((Emitter(pos, tilt=elevation, azimuth=math.degrees(az) + 180.0),))
    return IlluminationConfig(tuple(chans), mode=mode)


@dataclass(frozen=True)
class MarkerLayer:
    rows: int = 11
    cols: int = 15
    spacing: float = 1.6  # mm
    radius: float = 0.25  # mm
    absorptance: float = 0.8

    def positions_px(self, geometry: SensorGeometry) -> np.ndarray:
        """(rows*cols, 2) ideal marker centres in px, row-major, centred on the image."""
        gx = (np.arange(self.cols) - (self.cols - 1) / 2.0) * self.spacing
        gy = (np.arange(self.rows) - (self.rows - 1) / 2.0) * self.spacing
        X, Y = np.meshgrid(gx, gy)
        x, y = geometry.to_px(X.ravel(), Y.ravel())
        return np.column_stack([x, y])

    def spacing_px(self, geometry: SensorGeometry) -> float:
        return self.spacing / geometry.pixel_pitch


@dataclass(frozen=True, eq=False)
class Scene:
    height: DepthMap
    geometry: SensorGeometry = SensorGeometry()
    albedo: float = 1.0
    markers: MarkerLayer | None = None
    marker_offsets: np.ndarray | None = None  # (n, 2) px added to the ideal marker centres

    def __post_init__(self):
        if not 0 < self.albedo <= 1:
            raise ValueError("albedo must lie in (0, 1]")
        if not np.all(np.isfinite(self.height.z)):
            raise ValueError("height field must be finite")
        if self.height.shape != (self.geometry.height_px, self.geometry.width_px):
            raise ValueError("height field does not match the sensor geometry")

    def marker_centers(self) -> np.ndarray | None:
        if self.markers is None:
            return None
        pos = self.markers.positions_px(self.geometry)
        if self.marker_offsets is not None:
            pos = pos + np.asarray(self.marker_offsets, dtype=float)
        return pos


def flat_scene(geometry: SensorGeometry = SensorGeometry(), **kw) -> Scene:
    return Scene(DepthMap.zeros(geometry.width_px, geometry.height_px), geometry, **kw)


def sphere_indenter(radius: float, center, depth: float, geometry: SensorGeometry = SensorGeometry()) -> DepthMap:
    """Spherical cap pressed ``depth`` mm into the gel at pixel ``center`` (x, y)."""
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    if depth > radius:
        raise ValueError(f"indentation depth {depth} exceeds sphere radius {radius}")
    X, Y = geometry.pixel_grid_mm()
    cx, cy = geometry.to_mm(center[0], center[1])
    d2 = (X - cx) ** 2 + (Y - cy) ** 2
    z = np.sqrt(np.maximum(radius**2 - d2, 0.0)) - (radius - depth)
    return DepthMap(np.maximum(z, 0.0))


def contact_radius(radius: float, depth: float) -> float:
    """Planar radius (mm) of the cap footprint."""
    return math.sqrt(max(radius**2 - (radius - depth) ** 2, 0.0))


def sphere_gradients(radius: float, center, depth: float, geometry: SensorGeometry = SensorGeometry()) -> GradientField:
    """Analytic cap slopes inside the footprint, zero outside."""
    X, Y = geometry.pixel_grid_mm()
    cx, cy = geometry.to_mm(center[0], center[1])
    dx, dy = X - cx, Y - cy
    inside = dx**2 + dy**2 < contact_radius(radius, depth) ** 2
    s = np.sqrt(np.maximum(radius**2 - dx**2 - dy**2, 1e-12))
    return GradientField(np.where(inside, -dx / s, 0.0), np.where(inside, -dy / s, 0.0))


def surface_normals(height: np.ndarray, pitch: float) -> np.ndarray:
    """Unit normals (H, W, 3) from central-difference slopes of the height field."""
    q, p = np.gradient(height, pitch)
    norm = np.sqrt(1.0 + p * p + q * q)
    return np.stack([-p / norm, -q / norm, 1.0 / norm], axis=-1)


def reflectance(p, q, illum: IlluminationConfig) -> np.ndarray:
    """Directional-mode radiance (pre-exposure, unit albedo) for slopes p, q; shape (..., 3)."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    norm = np.sqrt(1.0 + p * p + q * q)
    n = np.stack([-p / norm, -q / norm, 1.0 / norm], axis=-1)
    out = np.zeros(p.shape + (3,))
    for c, emitters in enumerate(illum.channels):
        for e in emitters:
            out[..., c] += e.power * np.maximum(n @ e.direction, 0.0)
    return out


def render_radiance(scene: Scene, illum: IlluminationConfig) -> np.ndarray:
    """Pre-exposure per-channel radiance (H, W, 3), markers not applied."""
    g = scene.geometry
    n = surface_normals(scene.height.z, g.pixel_pitch)
    out = np.zeros(n.shape)
    if illum.mode == POINT_SOURCE:
        X, Y = g.pixel_grid_mm()
        pts = np.stack([X, Y, np.zeros_like(X)], axis=-1)
    for c, emitters in enumerate(illum.channels):
        for e in emitters:
            if illum.mode == DIRECTIONAL:
                out[..., c] += e.power * np.maximum(n @ e.direction, 0.0)
                continue
            v = np.asarray(e.position) - pts
            d2 = np.einsum("ijk,ijk->ij", v, v)
            l = v / np.sqrt(d2)[..., None]
            lobe = np.maximum(-(l @ e.axis), 0.0) ** e.exponent
            out[..., c] += e.power * lobe * np.maximum(np.einsum("ijk,ijk->ij", n, l), 0.0) / d2
    return scene.albedo * out


def exposure_for(illum: IlluminationConfig, geometry: SensorGeometry = SensorGeometry(), albedo: float = 1.0) -> float:
    if illum.exposure is not None:
        return illum.exposure
    peak = render_radiance(flat_scene(geometry, albedo=albedo), illum).max()
    if peak <= 0:
        raise ValueError("illumination produces no light on the flat surface")
    return FLAT_PEAK / peak


def marker_coverage(centers: np.ndarray, radius_px: float, shape, supersample: int = 4) -> np.ndarray:
    """Anti-aliased disk coverage in [0, 1] for each pixel."""
    h, w = shape
    cov = np.zeros((h, w))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ox, oy = np.meshgrid(offs, offs)
    reach = int(math.ceil(radius_px)) + 1
    for cx, cy in centers:
        x0, x1 = max(int(math.floor(cx)) - reach, 0), min(int(math.ceil(cx)) + reach + 1, w)
        y0, y1 = max(int(math.floor(cy)) - reach, 0), min(int(math.ceil(cy)) + reach + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        px, py = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        sx = px[..., None, None] + ox - cx
        sy = py[..., None, None] + oy - cy
        frac = (sx * sx + sy * sy <= radius_px**2).mean(axis=(-1, -2))
        patch = cov[y0:y1, x0:x1]
        np.maximum(patch, frac, out=patch)
    return cov


def render(scene: Scene, illum: IlluminationConfig, noise_sigma: float = 0.0, seed: int | None = None) -> TactileImage:
    """Shade the scene, darken marker pixels, apply exposure and optional noise."""
    g = scene.geometry
    img = render_radiance(scene, illum) * exposure_for(illum, g, scene.albedo)
    centers = scene.marker_centers()
    if centers is not None:
        cov = marker_coverage(centers, scene.markers.radius / g.pixel_pitch, img.shape[:2])
        img *= (1.0 - scene.markers.absorptance * cov)[..., None]
    if noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise_sigma, img.shape)
    return TactileImage(np.clip(img, 0.0, 1.0))


def reference_frame(illum: IlluminationConfig, geometry: SensorGeometry = SensorGeometry(), markers: MarkerLayer | None = None) -> TactileImage:
    return render(flat_scene(geometry, markers=markers), illum)


@dataclass(eq=False)
class CalibrationSample:
    image: TactileImage
    center: tuple[float, float]  # px
    contact_radius: float  # px
    gradients: GradientField
    depth: DepthMap


def generate_calibration_set(
    sphere_radius: float,
    n_positions: int,
    illum: IlluminationConfig,
    geometry: SensorGeometry = SensorGeometry(),
    depth: float = 1.0,
    seed: int = 0,
) -> list[CalibrationSample]:
    """Sphere presses at seeded random positions, each paired with analytic slopes."""
    rng = np.random.default_rng(seed)
    r_px = contact_radius(sphere_radius, depth) / geometry.pixel_pitch
    margin = r_px + 10
    out = []
    for _ in range(n_positions):
        cx = float(rng.uniform(margin, geometry.width_px - 1 - margin))
        cy = float(rng.uniform(margin, geometry.height_px - 1 - margin))
        dm = sphere_indenter(sphere_radius, (cx, cy), depth, geometry)
        img = render(Scene(dm, geometry), illum)
        grads = sphere_gradients(sphere_radius, (cx, cy), depth, geometry)
        out.append(CalibrationSample(img, (cx, cy), r_px, grads, dm))
    return out


def _half_diagonal(shape) -> float:
    h, w = shape
    return math.hypot((w - 1) / 2.0, (h - 1) / 2.0)


def undistort_points(points, k1: float, shape) -> np.ndarray:
    """Division model: distorted px -> undistorted px, x_u = x_d / (1 + k1 r_d^2)."""
    pts = np.asarray(points, dtype=float)
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rel = (pts - c) / _half_diagonal(shape)
    r2 = (rel**2).sum(axis=-1, keepdims=True)
    return c + rel / (1.0 + k1 * r2) * _half_diagonal(shape)


def distort_points(points, k1: float, shape) -> np.ndarray:
    """Analytic inverse of :func:`undistort_points`; NaN where no preimage exists."""
    pts = np.asarray(points, dtype=float)
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rel = (pts - c) / _half_diagonal(shape)
    ru = np.sqrt((rel**2).sum(axis=-1, keepdims=True))
    if k1 == 0:
        return pts.copy()
    disc = 1.0 - 4.0 * k1 * ru**2
    with np.errstate(invalid="ignore", divide="ignore"):
        rd = np.where(ru > 0, (1.0 - np.sqrt(disc)) / (2.0 * k1 * ru), 0.0)
        scale = np.where(ru > 0, rd / ru, 1.0)
    return c + rel * scale * _half_diagonal(shape)


def apply_synthetic_distortion(image: TactileImage, k1: float) -> TactileImage:
    """Resample ``image`` through a division-model radial distortion about the centre."""
    if not abs(k1) < 0.5:
        raise ValueError(f"|k1| must be below 0.5, got {k1}")
    if k1 == 0:
        return image
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    src = undistort_points(np.stack([xx, yy], axis=-1), k1, (h, w))
    out = np.empty_like(image.data)
    for c in range(3):
        out[..., c] = ndimage.map_coordinates(image.data[..., c], [src[..., 1], src[..., 0]], order=1, mode="constant", cval=0.0)
    return TactileImage(np.clip(out, 0.0, 1.0))


def press_sequence(
    n_frames: int,
    illum: IlluminationConfig,
    geometry: SensorGeometry = SensorGeometry(),
    markers: MarkerLayer = MarkerLayer(),
    sphere_radius: float = 3.0,
    depth: float = 1.0,
    step=(1.5, 0.5),
    slip_markers: dict | None = None,
):
    """A cap pressed at the centre and dragged by ``step`` px per frame.

    The whole marker grid follows the indenter (stiction). ``slip_markers``
    maps marker index -> extra (dx, dy) px to inject non-rigid motion.
    Returns (reference, frames, truth) where truth holds per-frame offsets.
    """
    ref = reference_frame(illum, geometry, markers)
    c0 = np.array(geometry.center_px)
    n = markers.rows * markers.cols
    frames, truth = [], []
    for k in range(n_frames):
        shift = np.asarray(step, dtype=float) * (k + 1)
        offsets = np.tile(shift, (n, 1))
        if slip_markers:
            for idx, extra in slip_markers.items():
                offsets[idx] += extra
        cen = c0 + shift
        dm = sphere_indenter(sphere_radius, cen, depth, geometry)
        frames.append(render(Scene(dm, geometry, markers=markers, marker_offsets=offsets), illum))
        truth.append({"center": cen.tolist(), "offsets": offsets})
    return ref, frames, truth


def scene_from_config(cfg: dict):
    """Build (scene, illumination, seed, noise) from a declarative mapping.

    Keys: geometry{pixel_pitch,width,height}, indenter{type,radius,center,depth},
    illumination{mode,elevation,radius}, markers{rows,cols,spacing,radius,absorptance}
    or null, albedo, seed, noise.
    """
    gcfg = cfg.get("geometry", {})
    geometry = SensorGeometry(
        pixel_pitch=gcfg.get("pixel_pitch", SensorGeometry.pixel_pitch),
        gel_thickness=gcfg.get("gel_thickness", SensorGeometry.gel_thickness),
        width_px=gcfg.get("width", SensorGeometry.width_px),
        height_px=gcfg.get("height", SensorGeometry.height_px),
    )
    ind = cfg.get("indenter") or {"type": "none"}
    kind = ind.get("type", "sphere")
    if kind == "sphere":
        center = ind.get("center", list(geometry.center_px))
        height = sphere_indenter(ind.get("radius", 3.0), center, ind.get("depth", 1.0), geometry)
    elif kind == "none":
        height = DepthMap.zeros(geometry.width_px, geometry.height_px)
    else:
        raise ValueError(f"unknown indenter type {kind!r}")
    icfg = cfg.get("illumination", {})
    illum = default_illumination(icfg.get("mode", DIRECTIONAL), icfg.get("elevation", 45.0), icfg.get("radius", 20.0))
    mcfg = cfg.get("markers")
    markers = MarkerLayer(**mcfg) if mcfg is not None else None
    scene = Scene(height, geometry, albedo=cfg.get("albedo", 1.0), markers=markers)
    return scene, illum, int(cfg.get("seed", 0)), float(cfg.get("noise", 0.0))
