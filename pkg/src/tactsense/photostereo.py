"""Depth from colour: lookup-table photometric stereo and Poisson integration."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft, ndimage
from scipy.spatial import cKDTree

from .core import DepthMap, GradientField, SensorGeometry, ShapeMismatch, TactileImage, locked

TABLE_MAGIC = b"TSLUT001"
DEFAULT_BINS = 32


class CalibrationError(ValueError):
    pass


def frame_hash(image: TactileImage) -> str:
    return hashlib.sha256(image.to_uint8().tobytes()).hexdigest()[:16]


@dataclass(eq=False)
class CalibrationTable:
    """Quantised colour-difference -> mean surface slope.

    Bins are indexed by the signed per-channel difference (image - reference)
    clipped to [lo[c], hi[c]] and split into ``bins`` levels per channel.
    ``nearest`` maps every bin to the closest populated bin (itself when
    populated) and ``nearest_dist`` is that distance in bin units.
    """

    bins: int
    lo: np.ndarray  # (3,) lower difference bound per channel
    hi: np.ndarray
    p: np.ndarray  # (B^3,), NaN where empty
    q: np.ndarray
    count: np.ndarray
    metadata: dict = field(default_factory=dict)
    nearest: np.ndarray = field(init=False, repr=False)
    nearest_dist: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(3)
        self.hi = np.asarray(self.hi, dtype=float).reshape(3)
        if np.any(self.hi <= self.lo):
            raise CalibrationError("difference range must be non-empty in every channel")
        n = self.bins**3
        if self.p.shape != (n,) or self.q.shape != (n,) or self.count.shape != (n,):
            raise ShapeMismatch("table arrays must have bins**3 entries")
        populated = np.flatnonzero(self.count > 0)
        if populated.size == 0:
            raise CalibrationError("calibration table is empty")
        coords = self._coords(np.arange(n))
        tree = cKDTree(coords[populated])
        dist, idx = tree.query(coords)
        self.nearest = populated[idx]
        self.nearest_dist = dist

    def _coords(self, flat):
        b = self.bins
        return np.column_stack([flat // (b * b), (flat // b) % b, flat % b]).astype(float)

    @property
    def populated(self) -> np.ndarray:
        return self.count > 0

    def bin_index(self, diff: np.ndarray) -> np.ndarray:
        """Flat bin index for signed differences of shape (..., 3)."""
        return bin_index(diff, self.bins, self.lo, self.hi)

    def save(self, path) -> None:
        """Versioned binary table plus a JSON metadata sidecar."""
        path = Path(path)
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(TABLE_MAGIC)
            fh.write(struct.pack("<I6dI", self.bins, *self.lo, *self.hi, len(meta)))
            fh.write(meta)
            dense = np.stack([self.p, self.q, self.count.astype(np.float64)]).astype("<f8")
            fh.write(dense.tobytes())
        sidecar = dict(self.metadata, bins=self.bins, lo=self.lo.tolist(), hi=self.hi.tolist(),
                       populated_bins=int(self.populated.sum()))
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        raw = Path(path).read_bytes()
        if raw[:8] != TABLE_MAGIC:
            raise CalibrationError(f"{path}: not a calibration table")
        bins, *bounds, nmeta = struct.unpack_from("<I6dI", raw, 8)
        off = 8 + struct.calcsize("<I6dI")
        meta = json.loads(raw[off : off + nmeta].decode())
        dense = np.frombuffer(raw, dtype="<f8", offset=off + nmeta).reshape(3, bins**3)
        return cls(bins, bounds[:3], bounds[3:], dense[0].copy(), dense[1].copy(), dense[2].astype(np.int64), meta)


def bin_index(diff: np.ndarray, bins: int, lo, hi) -> np.ndarray:
    scaled = (diff - lo) / (hi - lo) * bins
    idx = np.clip(np.floor(scaled), 0, bins - 1).astype(np.int64)
    return (idx[..., 0] * bins + idx[..., 1]) * bins + idx[..., 2]


def calibrate(
    presses,
    reference: TactileImage,
    geometry: SensorGeometry,
    sphere_radius: float,
    bins: int = DEFAULT_BINS,
    diff_range: tuple | None = None,
    rim_margin: float = 2.0,
) -> CalibrationTable:
    """Build the lookup table from sphere presses.

    ``presses`` holds (image, center_px, contact_radius_px) triples. Pixels
    within ``rim_margin`` px of the contact rim are skipped because the
    rendered shading there straddles the slope discontinuity. ``diff_range``
    is an optional (lo, hi) pair of per-channel arrays; by default it spans
    the differences seen in the data plus a 1% pad.
    """
    presses = list(presses)
    if not presses:
        raise CalibrationError("calibration needs at least one press")
    if sphere_radius <= 0:
        raise CalibrationError("sphere radius must be positive")
    h, w = reference.shape
    X, Y = geometry.pixel_grid_mm()
    diffs, ps, qs = [], [], []
    for image, center, radius_px in presses:
        if image.shape != reference.shape:
            raise ShapeMismatch("press image and reference differ in size")
        cx, cy = center
        if cx - radius_px < 0 or cy - radius_px < 0 or cx + radius_px > w - 1 or cy + radius_px > h - 1:
            raise CalibrationError(f"contact circle at ({cx:.1f}, {cy:.1f}) r={radius_px:.1f} px leaves the image")
        yy, xx = np.mgrid[0:h, 0:w]
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 < max(radius_px - rim_margin, 0.0) ** 2
        mx, my = geometry.to_mm(cx, cy)
        dx, dy = X[inside] - mx, Y[inside] - my
        s = np.sqrt(np.maximum(sphere_radius**2 - dx**2 - dy**2, 1e-12))
        ps.append(-dx / s)
        qs.append(-dy / s)
        diffs.append(image.data[inside] - reference.data[inside])
    diff = np.concatenate(diffs)
    p, q = np.concatenate(ps), np.concatenate(qs)
    if diff_range is None:
        lo, hi = np.minimum(diff.min(axis=0), 0.0), np.maximum(diff.max(axis=0), 0.0)
        pad = 0.01 * np.maximum(hi - lo, 1e-3)
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (3,)) for v in diff_range)
    table_shape = bins**3
    idx = bin_index(diff, bins, lo, hi)
    count = np.bincount(idx, minlength=table_shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        pm = np.bincount(idx, weights=p, minlength=table_shape) / count
        qm = np.bincount(idx, weights=q, minlength=table_shape) / count
    meta = {
        "sphere_radius_mm": float(sphere_radius),
        "reference_hash": frame_hash(reference),
        "presses": len(presses),
        "samples": int(diff.shape[0]),
    }
    return CalibrationTable(bins, lo, hi, pm, qm, count, meta)


def _channel_max(a: np.ndarray) -> np.ndarray:
    # much faster than a.max(axis=-1) for a trailing axis of length 3
    return np.maximum(np.maximum(a[..., 0], a[..., 1]), a[..., 2])


def _nearest_fill(values: list[np.ndarray], invalid: np.ndarray, support: np.ndarray | None = None,
                  margin: int = 16) -> list[np.ndarray]:
    """Give invalid pixels the value of the nearest valid pixel.

    With ``support`` (the valid pixels whose value can be non-zero) the
    transform only runs on that bounding box grown by ``margin``; invalid
    pixels farther out are set to zero, which is exact whenever they lie
    within ``margin`` of some valid pixel.
    """
    if not invalid.any() or invalid.all():
        return values
    sl = (slice(None), slice(None))
    if support is not None:
        rows, cols = np.flatnonzero(support.any(axis=1)), np.flatnonzero(support.any(axis=0))
        if rows.size == 0:
            return values
        h, w = invalid.shape
        sl = (slice(max(rows[0] - margin, 0), min(rows[-1] + margin + 1, h)),
              slice(max(cols[0] - margin, 0), min(cols[-1] + margin + 1, w)))
        if invalid[sl].all():
            sl = (slice(None), slice(None))
    _, (iy, ix) = ndimage.distance_transform_edt(invalid[sl], return_indices=True)
    out = []
    for v in values:
        v = np.where(invalid, 0.0, v)
        v[sl] = v[sl][iy, ix]
        out.append(v)
    return out


def lookup_gradients(
    image: TactileImage,
    reference: TactileImage,
    table: CalibrationTable,
    exclude: np.ndarray | None = None,
    no_contact_tol: float = 2.0 / 255.0,
    max_slope: float = 3.0,
    saturation: float = 254.5 / 255.0,
    return_stats: bool = False,
):
    """Invert the reflectance map pixel by pixel.

    Pixels whose colour is within ``no_contact_tol`` of the reference get zero
    slope. Empty bins fall back to the nearest populated bin (flagged in
    ``GradientField.fallback``). Saturated pixels and pixels in ``exclude``
    (e.g. markers) take the slope of the nearest usable pixel. Slope
    magnitudes are capped at ``max_slope``.
    """
    if image.shape != reference.shape:
        raise ShapeMismatch(f"image {image.shape} vs reference {reference.shape}")
    shape = image.shape
    diff = image.data - reference.data
    ad = np.abs(diff)
    active = _channel_max(ad) > no_contact_tol
    sel = np.flatnonzero(active)
    idx = table.bin_index(diff.reshape(-1, 3)[sel])
    src = table.nearest[idx]
    ps, qs = table.p[src], table.q[src]
    mag = np.hypot(ps, qs)
    over = mag > max_slope
    if over.any():
        scale = np.where(over, max_slope / np.maximum(mag, 1e-12), 1.0)
        ps, qs = ps * scale, qs * scale
    p = np.zeros(shape)
    q = np.zeros(shape)
    fallback = np.zeros(shape, dtype=bool)
    p.flat[sel] = ps
    q.flat[sel] = qs
    fallback.flat[sel] = src != idx
    invalid = _channel_max(image.data) >= saturation
    if exclude is not None:
        invalid = invalid | exclude
    p, q = _nearest_fill([p, q], invalid, support=active & ~invalid)
    fallback &= ~invalid
    grad = GradientField(locked(p), locked(q), locked(fallback))
    if not return_stats:
        return grad
    used = np.unique(idx[~invalid.flat[sel]])
    stats = {
        "fallback_fraction": float(fallback.mean()),
        "bins_used": int(used.size),
        "coverage": float(table.populated[used].mean()) if used.size else 1.0,
        "invalid_fraction": float(invalid.mean()),
    }
    return grad, stats


def divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Central-difference divergence on the interior, zero on the border."""
    f = np.zeros_like(p)
    f[1:-1, 1:-1] = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2]) + 0.5 * (q[2:, 1:-1] - q[:-2, 1:-1])
    return f


def laplacian(z: np.ndarray) -> np.ndarray:
    """Five-point Laplacian on the interior, zero on the border."""
    out = np.zeros_like(z)
    out[1:-1, 1:-1] = z[1:-1, 2:] + z[1:-1, :-2] + z[2:, 1:-1] + z[:-2, 1:-1] - 4.0 * z[1:-1, 1:-1]
    return out


def poisson_solve(p: np.ndarray, q: np.ndarray, spacing: float = 1.0, dtype=np.float64) -> np.ndarray:
    """Solve lap(z) = spacing * div(p, q) with z = 0 on the border via DST-I.

    ``p`` and ``q`` are dimensionless slopes; ``spacing`` is the pixel pitch,
    so z comes out in the pitch's length unit. No clamping is applied.
    ``dtype=np.float32`` roughly halves the transform cost at ~1e-6 relative
    error.
    """
    h, w = p.shape
    z = np.zeros((h, w))
    if h < 3 or w < 3:
        return z
    rhs = (spacing * divergence(p, q)[1:-1, 1:-1]).astype(dtype, copy=False)
    coef = _dst1(_dst1(rhs, 0), 1)
    ky = 2.0 * np.cos(np.pi * np.arange(1, h - 1) / (h - 1)) - 2.0
    kx = 2.0 * np.cos(np.pi * np.arange(1, w - 1) / (w - 1)) - 2.0
    coef /= (ky[:, None] + kx[None, :]).astype(dtype, copy=False)
    z[1:-1, 1:-1] = _dst1(_dst1(coef, 0), 1) * (4.0 / ((h - 1) * (w - 1)))
    return z


def _largest_prime_factor(n: int) -> int:
    f, best = 2, 1
    while f * f <= n:
        while n % f == 0:
            best, n = f, n // f
        f += 1
    return max(best, n) if n > 1 else best


@lru_cache(maxsize=8)
def _sine_matrix(n: int, dtype=np.float64) -> np.ndarray:
    k = np.arange(1, n + 1)
    s = np.sin(np.pi * np.outer(k, k) / (n + 1)).astype(dtype)
    s.flags.writeable = False
    return s


def _dst1(a: np.ndarray, axis: int) -> np.ndarray:
    """Unnormalised DST-I, sum_j a_j sin(pi j k / (n+1)).

    pocketfft falls back to Bluestein for lengths with a large prime factor,
    which is several times slower than a dense product at image sizes.
    """
    n = a.shape[axis]
    if n <= 1024 and _largest_prime_factor(n + 1) > 100:
        s = _sine_matrix(n, a.dtype.type)
        return s @ a if axis == 0 else a @ s
    out = fft.dst(a, type=1, axis=axis)
    out *= 0.5
    return out


def poisson_integrate(grad: GradientField, mask: np.ndarray | None = None, spacing: float = 1.0,
                      dtype=np.float64) -> DepthMap:
    """Integrate slopes to a non-negative depth map (clamped count recorded)."""
    p, q = grad.p, grad.q
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("gradient field contains non-finite values")
    if mask is not None:
        p = np.where(mask, p, 0.0)
        q = np.where(mask, q, 0.0)
    z = poisson_solve(p, q, spacing, dtype)
    neg = z < 0
    return DepthMap(locked(np.where(neg, 0.0, z)), clamped=int(neg.sum()))


@dataclass(eq=False)
class Reconstruction:
    depth: DepthMap
    gradients: GradientField
    diagnostics: dict


def reconstruct(
    image: TactileImage,
    reference: TactileImage,
    table: CalibrationTable,
    geometry: SensorGeometry,
    exclude: np.ndarray | None = None,
    solver_dtype=np.float64,
    **lookup_kw,
) -> Reconstruction:
    """Lookup then integrate, reporting assumption-violation proxies."""
    grad, stats = lookup_gradients(image, reference, table, exclude=exclude, return_stats=True, **lookup_kw)
    depth = poisson_integrate(grad, spacing=geometry.pixel_pitch, dtype=solver_dtype)
    stats["clamped_fraction"] = depth.clamped / depth.z.size
    return Reconstruction(depth, grad, stats)
