"""Illumination-homogeneity design.

A simplified forward model stands in for ray tracing: each LED is a cosine-
power lobe whose aim and width are modified by a beam-shaping feature. Flux
is accumulated on a 25 x 25 receiver mesh over the sensing surface, scored by
uniformity (coefficient of variation), mean chromaticity and flux centroid,
and minimised over the LED pose and shaping parameters with a bound-projected
Nelder-Mead search. One parameter set is shared by the three colour channels,
which are placed at 120 degree rotations of each other.

Design frame: the emitter base plane is z = 0 and the sensing surface is the
plane z = surface_height above it. Horizontal coordinates are mm from the
sensing-area centre, x right and y down.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .simulator import POINT_SOURCE, Emitter, IlluminationConfig, lobe_exponent

WHITE = (1.0 / 3.0, 1.0 / 3.0)
BASE_HALF_ANGLE = 30.0  # degrees, from the LED's 60 degree viewing angle
CHANNEL_AZIMUTHS = (90.0, 210.0, 330.0)  # R, G, B radial directions


@dataclass(frozen=True)
class ReceiverGeometry:
    width: float = 30.0  # mm
    height: float = 22.5  # mm
    bins: int = 25
    subsamples: int = 4  # per bin edge, for finite-bin integration

    @property
    def bin_size(self) -> tuple[float, float]:
        return self.width / self.bins, self.height / self.bins

    def bin_centers(self):
        bx, by = self.bin_size
        xs = -self.width / 2 + (np.arange(self.bins) + 0.5) * bx
        ys = -self.height / 2 + (np.arange(self.bins) + 0.5) * by
        return np.meshgrid(xs, ys)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


@dataclass(frozen=True)
class BeamShaping:
    length: float = 0.0  # L, shaping-feature thickness mm
    deflection: float = 0.0  # theta, degrees
    spread: float = 0.0  # extra lobe half-angle, degrees


@dataclass(frozen=True)
class OptBounds:
    t1: float = 6.0  # lens thickness, bounds z
    t2: float = 2.0  # max shaping-feature thickness, bounds L
    m_x: float = 0.0
    m_y: float = 12.0
    y_max: float = 30.0
    spread_max: float = 60.0
    surface_height: float = 8.0  # sensing surface above the emitter base plane

    def __post_init__(self):
        if self.t1 < 0 or self.t2 < 0 or self.y_max < self.m_y or self.spread_max < 0:
            raise ValueError("inconsistent optimisation bounds")
        if self.t1 >= self.surface_height:
            raise ValueError("lens thickness must stay below the sensing surface")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.m_x, self.m_y, 0.0, 0.0, 0.0, 0.0, 0.0])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.m_x, self.y_max, self.t1, 90.0, self.t2, 90.0, self.spread_max])


@dataclass(frozen=True)
class LensDesign:
    """Shared LED pose (x, y, z, alpha) and beam shaping for all three channels.

    y is the radial distance of the LED from the centre, x its tangential
    offset and alpha its tilt up from the lens top-face plane.
    """

    x: float = 0.0
    y: float = 20.0
    z: float = 2.0
    alpha: float = 30.0
    shaping: BeamShaping = field(default_factory=BeamShaping)
    power: float = 1.0

    def vector(self) -> np.ndarray:
        s = self.shaping
        return np.array([self.x, self.y, self.z, self.alpha, s.length, s.deflection, s.spread])

    @classmethod
    def from_vector(cls, v, power: float = 1.0) -> "LensDesign":
        v = [float(a) for a in v]
        return cls(v[0], v[1], v[2], v[3], BeamShaping(v[4], v[5], v[6]), power)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LensDesign":
        d = dict(d)
        d["shaping"] = BeamShaping(**d.get("shaping", {}))
        return cls(**d)


SKEWED_DESIGN = LensDesign(x=0.0, y=12.0, z=6.0, alpha=0.0, shaping=BeamShaping(0.0, 0.0, 0.0))


def project(design: LensDesign, bounds: OptBounds) -> LensDesign:
    v = np.clip(design.vector(), bounds.lower, bounds.upper)
    return LensDesign.from_vector(v, design.power)


def satisfies(design: LensDesign, bounds: OptBounds) -> bool:
    v = design.vector()
    return bool(np.all(v >= bounds.lower) and np.all(v <= bounds.upper))


def to_illumination(design: LensDesign, bounds: OptBounds) -> IlluminationConfig:
    """Place one emitter per channel at 120 degree rotations of the shared pose."""
    s = design.shaping
    k = s.length / bounds.t2 if bounds.t2 > 0 else 0.0
    tilt = min(design.alpha + k * s.deflection, 90.0)
    half = min(BASE_HALF_ANGLE + k * s.spread, 89.0)
    exponent = lobe_exponent(2.0 * half)
    height = bounds.surface_height - design.z
    if height <= 0:
        raise ValueError("emitter lies on or above the sensing plane")
    chans = []
    for az in CHANNEL_AZIMUTHS:
        a = math.radians(az)
        er = np.array([math.cos(a), math.sin(a)])
        et = np.array([-math.sin(a), math.cos(a)])
        xy = design.x * et + design.y * er
        chans.append((Emitter((float(xy[0]), float(xy[1]), height), tilt=tilt, azimuth=az + 180.0,
                              exponent=exponent, power=design.power),))
    return IlluminationConfig(tuple(chans), mode=POINT_SOURCE)


@dataclass(eq=False)
class ReceiverMesh:
    flux: np.ndarray  # (bins, bins, 3) per-bin radiant flux per channel
    geometry: ReceiverGeometry = field(default_factory=ReceiverGeometry)

    @property
    def total(self) -> np.ndarray:
        return self.flux.sum(axis=-1)


def irradiance_mesh(illum: IlluminationConfig, receiver: ReceiverGeometry = ReceiverGeometry()) -> ReceiverMesh:
    """Integrate each channel's irradiance over every receiver bin."""
    n, s = receiver.bins, receiver.subsamples
    bx, by = receiver.bin_size
    xs = -receiver.width / 2 + (np.arange(n * s) + 0.5) * bx / s
    ys = -receiver.height / 2 + (np.arange(n * s) + 0.5) * by / s
    X, Y = np.meshgrid(xs, ys)
    flux = np.zeros((n, n, 3))
    for c, emitters in enumerate(illum.channels):
        e_sum = np.zeros_like(X)
        for e in emitters:
            ex, ey, ez = e.position
            if ez <= 0:
                raise ValueError("emitter lies on the sensing plane")
            vx, vy = ex - X, ey - Y
            d2 = vx * vx + vy * vy + ez * ez
            d = np.sqrt(d2)
            ax = e.axis
            cos_emit = -(vx * ax[0] + vy * ax[1] + ez * ax[2]) / d
            e_sum += e.power * np.maximum(cos_emit, 0.0) ** e.exponent * (ez / d) / d2
        flux[..., c] = e_sum.reshape(n, s, n, s).mean(axis=(1, 3)) * bx * by
    return ReceiverMesh(flux, receiver)


@dataclass(frozen=True)
class IlluminationMetrics:
    sigma: float
    cie_mean: tuple[float, float]
    centroid: tuple[float, float]  # mm


def metrics(mesh: ReceiverMesh) -> IlluminationMetrics:
    total = mesh.total
    s = total.sum()
    if s <= 0:
        raise ValueError("receiver mesh holds no flux")
    sigma = float(total.std() / total.mean())
    chans = mesh.flux.reshape(-1, 3).sum(axis=0)
    cie = (float(chans[0] / s), float(chans[1] / s))
    X, Y = mesh.geometry.bin_centers()
    g = (float((X * total).sum() / s), float((Y * total).sum() / s))
    return IlluminationMetrics(sigma, cie, g)


def objective(m: IlluminationMetrics, receiver: ReceiverGeometry, weights=(1.0, 1.0, 1.0)) -> float:
    w1, w2, w3 = weights
    dc = (m.cie_mean[0] - WHITE[0]) ** 2 + (m.cie_mean[1] - WHITE[1]) ** 2
    dg = (m.centroid[0] ** 2 + m.centroid[1] ** 2) / receiver.diagonal**2
    return w1 * m.sigma**2 + w2 * dc + w3 * dg


def cost(illum: IlluminationConfig, receiver: ReceiverGeometry = ReceiverGeometry(), weights=(1.0, 1.0, 1.0)) -> float:
    return objective(metrics(irradiance_mesh(illum, receiver)), receiver, weights)


def design_cost(design: LensDesign, bounds: OptBounds, receiver: ReceiverGeometry = ReceiverGeometry(),
                weights=(1.0, 1.0, 1.0)) -> float:
    """Cost of a design after projecting it onto the bounds."""
    return cost(to_illumination(project(design, bounds), bounds), receiver, weights)


@dataclass(eq=False)
class OptimizeResult:
    design: LensDesign
    cost: float
    initial_cost: float
    trace: list  # cost of every evaluation, in order
    before: ReceiverMesh
    after: ReceiverMesh
    evaluations: int


def optimize(initial: LensDesign, bounds: OptBounds, budget: int = 500, seed: int = 0,
             receiver: ReceiverGeometry = ReceiverGeometry(), weights=(1.0, 1.0, 1.0),
             step: float = 0.15) -> OptimizeResult:
    """Nelder-Mead in normalised box coordinates with every iterate projected onto the bounds.

    Equality-constrained coordinates are held fixed. The best design ever
    evaluated is returned, so the result never costs more than the initial
    design. The seed only jitters the initial simplex.
    """
    lo, hi = bounds.lower, bounds.upper
    free = hi > lo
    dim = int(free.sum())
    if budget < dim + 1:
        raise ValueError(f"budget {budget} is smaller than the simplex ({dim + 1} points)")
    x0 = project(initial, bounds).vector()
    span = np.where(free, hi - lo, 1.0)

    def to_design(u):
        v = x0.copy()
        v[free] = lo[free] + np.clip(u, 0.0, 1.0) * span[free]
        v = np.clip(v, lo, hi)
        return LensDesign.from_vector(v, initial.power)

    trace = []
    best = [np.inf, None]

    def f(u):
        u = np.clip(u, 0.0, 1.0)
        val = cost(to_illumination(to_design(u), bounds), receiver, weights)
        trace.append(val)
        if val < best[0]:
            best[0], best[1] = val, u.copy()
        return val

    u0 = (x0[free] - lo[free]) / span[free]
    rng = np.random.default_rng(seed)
    simplex = [u0]
    for i in range(dim):
        d = step * (1.0 + 0.2 * rng.random())
        u = u0.copy()
        u[i] = u[i] + d if u[i] + d <= 1.0 else u[i] - d
        simplex.append(u)
    simplex = np.array(simplex)
    values = np.array([f(u) for u in simplex])
    initial_cost = values[0]

    while len(trace) < budget:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = np.clip(centroid + (centroid - worst), 0.0, 1.0)
        fr = f(xr)
        if fr < values[0]:
            if len(trace) >= budget:
                simplex[-1], values[-1] = xr, fr
                break
            xe = np.clip(centroid + 2.0 * (centroid - worst), 0.0, 1.0)
            fe = f(xe)
            simplex[-1], values[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
        else:
            if len(trace) >= budget:
                break
            if fr < values[-1]:
                xc = np.clip(centroid + 0.5 * (xr - centroid), 0.0, 1.0)
            else:
                xc = np.clip(centroid + 0.5 * (worst - centroid), 0.0, 1.0)
            fc = f(xc)
            if fc < min(fr, values[-1]):
                simplex[-1], values[-1] = xc, fc
            else:
                for i in range(1, len(simplex)):
                    if len(trace) >= budget:
                        break
                    simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
                    values[i] = f(simplex[i])

    best_design = to_design(best[1])
    before = irradiance_mesh(to_illumination(project(initial, bounds), bounds), receiver)
    after = irradiance_mesh(to_illumination(best_design, bounds), receiver)
    return OptimizeResult(best_design, float(best[0]), float(initial_cost), trace, before, after, len(trace))


def rotate_layout(points_xy: np.ndarray, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    r = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return np.asarray(points_xy) @ r.T
