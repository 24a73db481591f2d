"""Domain types shared by every stage of the tactile pipeline.

Intensities are linear in [0, 1]. Pixel indices have their origin at the
top-left corner; physical-plane coordinates (mm) are centred on the image
with x to the right and y downward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_WIDTH = 640
DEFAULT_HEIGHT = 480
DEFAULT_SENSING_AREA = 675.0  # mm^2
DEFAULT_PIXEL_PITCH = math.sqrt(DEFAULT_SENSING_AREA / (DEFAULT_WIDTH * DEFAULT_HEIGHT))


class ShapeMismatch(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    # read-only arrays of the right dtype are taken as-is: producers that own
    # a fresh buffer lock it first to hand it over without a copy
    if isinstance(a, np.ndarray) and a.dtype == dtype and not a.flags.writeable:
        return a
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def locked(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TactileImage:
    """Three planes of linear intensity, stored as an (H, W, 3) array."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3) intensity array, got {a.shape}")
        if a.shape[0] == 0 or a.shape[1] == 0:
            raise ShapeMismatch("image must be non-empty")
        if a.dtype == np.uint8:
            a = locked(a / 255.0)
        object.__setattr__(self, "data", _frozen(a))

    @classmethod
    def blank(cls, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT, value=0.0):
        return cls(np.full((height, width, 3), value))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def gray(self) -> np.ndarray:
        return self.data @ np.full(3, 1.0 / 3.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Indentation depth in mm; 0 is the undeformed surface.

    ``clamped`` counts pixels that were negative before clamping (only set by
    the Poisson integrator).
    """

    z: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 2:
            raise ShapeMismatch(f"depth must be 2-D, got {z.shape}")
        object.__setattr__(self, "z", _frozen(z))

    @classmethod
    def zeros(cls, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT):
        return cls(np.zeros((height, width)))

    @property
    def height(self) -> int:
        return self.z.shape[0]

    @property
    def width(self) -> int:
        return self.z.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape


@dataclass(frozen=True, eq=False)
class GradientField:
    """Surface slopes p = dz/dx and q = dz/dy (dimensionless)."""

    p: np.ndarray
    q: np.ndarray
    fallback: np.ndarray | None = None  # pixels served by a neighbouring table bin

    def __post_init__(self):
        p, q = np.asarray(self.p), np.asarray(self.q)
        if p.ndim != 2 or p.shape != q.shape:
            raise ShapeMismatch(f"p and q must be equal 2-D arrays, got {p.shape} and {q.shape}")
        object.__setattr__(self, "p", _frozen(p))
        object.__setattr__(self, "q", _frozen(q))
        if self.fallback is not None:
            object.__setattr__(self, "fallback", _frozen(self.fallback, dtype=bool))

    @classmethod
    def zeros(cls, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT):
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.p.shape


@dataclass(frozen=True)
class SensorGeometry:
    pixel_pitch: float = DEFAULT_PIXEL_PITCH  # mm / px
    gel_thickness: float = 2.0  # mm
    width_px: int = DEFAULT_WIDTH
    height_px: int = DEFAULT_HEIGHT

    def __post_init__(self):
        if min(self.pixel_pitch, self.gel_thickness) <= 0 or min(self.width_px, self.height_px) <= 0:
            raise ValueError("sensor geometry values must be strictly positive")

    @property
    def sensing_area(self) -> tuple[float, float]:
        """Footprint (width mm, height mm)."""
        return self.width_px * self.pixel_pitch, self.height_px * self.pixel_pitch

    @property
    def center_px(self) -> tuple[float, float]:
        return (self.width_px - 1) / 2.0, (self.height_px - 1) / 2.0

    def to_mm(self, x_px, y_px):
        cx, cy = self.center_px
        return (np.asarray(x_px) - cx) * self.pixel_pitch, (np.asarray(y_px) - cy) * self.pixel_pitch

    def to_px(self, x_mm, y_mm):
        cx, cy = self.center_px
        return np.asarray(x_mm) / self.pixel_pitch + cx, np.asarray(y_mm) / self.pixel_pitch + cy

    def pixel_grid_mm(self):
        """(X, Y) in mm for every pixel, each of shape (H, W)."""
        xs, ys = self.to_mm(np.arange(self.width_px), np.arange(self.height_px))
        return np.meshgrid(xs, ys)


def difference_image(current: TactileImage, reference: TactileImage) -> TactileImage:
    """Signed difference remapped so that 0 -> 0.5 and +/-1 -> 1 / 0."""
    if current.shape != reference.shape:
        raise ShapeMismatch(f"current {current.shape} vs reference {reference.shape}")
    return TactileImage(0.5 + 0.5 * (current.data - reference.data))


@dataclass
class ValidationReport:
    ok: bool
    message: str = ""
    location: tuple | None = None

    def __bool__(self):
        return self.ok


def _first(mask: np.ndarray):
    idx = np.argwhere(mask)
    return tuple(int(i) for i in idx[0]) if len(idx) else None


def validate(obj) -> ValidationReport:
    """Check the invariants of an image, depth map or gradient field.

    Returns the first violation found (with its array index) rather than raising.
    """
    if isinstance(obj, TactileImage):
        a = obj.data
        loc = _first(~np.isfinite(a))
        if loc is not None:
            return ValidationReport(False, "non-finite intensity", loc)
        loc = _first((a < 0) | (a > 1))
        if loc is not None:
            return ValidationReport(False, f"intensity {a[loc]:.6g} outside [0, 1]", loc)
        return ValidationReport(True)
    if isinstance(obj, DepthMap):
        loc = _first(~np.isfinite(obj.z))
        if loc is not None:
            return ValidationReport(False, "non-finite depth", loc)
        loc = _first(obj.z < 0)
        if loc is not None:
            return ValidationReport(False, f"negative depth {obj.z[loc]:.6g}", loc)
        return ValidationReport(True)
    if isinstance(obj, GradientField):
        for name, a in (("p", obj.p), ("q", obj.q)):
            loc = _first(~np.isfinite(a))
            if loc is not None:
                return ValidationReport(False, f"non-finite gradient {name}", loc)
        return ValidationReport(True)
    raise TypeError(f"cannot validate {type(obj).__name__}")
