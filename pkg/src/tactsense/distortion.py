"""Lens-distortion correction driven by the printed marker grid.

Markers are segmented from the raw frame, associated with the nodes of the
known grid, and the node -> detection displacements are spread over every
pixel with a thin-plate spline. The result is a per-pixel map from corrected
coordinates to the distorted source position, applied by bilinear resampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.interpolate import RBFInterpolator

from .core import SensorGeometry, ShapeMismatch, TactileImage, locked


class DetectionError(RuntimeError):
    pass


class AssociationError(RuntimeError):
    pass


@dataclass(eq=False)
class MarkerSet:
    positions: np.ndarray  # (n, 2) px as (x, y)
    grid_index: np.ndarray | None = None  # (n, 2) (row, col)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if self.grid_index is not None:
            self.grid_index = np.asarray(self.grid_index, dtype=int).reshape(-1, 2)

    def __len__(self):
        return len(self.positions)

    def check(self, shape, min_separation: float = 0.0) -> None:
        h, w = shape
        x, y = self.positions[:, 0], self.positions[:, 1]
        if np.any((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)):
            raise ValueError("marker outside image bounds")
        if min_separation > 0 and len(self) > 1:
            from scipy.spatial import cKDTree

            d, _ = cKDTree(self.positions).query(self.positions, k=2)
            if d[:, 1].min() < min_separation:
                raise ValueError(f"markers closer than {min_separation} px")


def dilate_cross(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Same as ``ndimage.binary_dilation(mask, iterations=n)`` with the default
    cross element, done with shifted ORs (several times faster)."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        src = out
        out = src.copy()
        out[1:] |= src[:-1]
        out[:-1] |= src[1:]
        out[:, 1:] |= src[:, :-1]
        out[:, :-1] |= src[:, 1:]
    return out


def detect_markers(
    image: TactileImage,
    threshold: float = 0.5,
    min_area: int = 4,
    max_area: int = 2000,
    expected: int | None = None,
    dark: bool = True,
    return_mask: bool = False,
):
    """Segment marker blobs and return their sub-pixel centroids.

    A pixel belongs to a marker when its grey level is below ``threshold``
    times the frame median (above ``1/threshold`` times it for bright markers).
    Centroids are weighted by contrast against the brightest pixel of each
    blob's neighbourhood, which makes them insensitive to anti-aliasing.
    With ``return_mask`` the grown blob mask comes back as well.
    """
    gray = image.gray()
    med = float(np.median(gray))
    if dark:
        mask = gray < threshold * med
        contrast = -gray
    else:
        mask = gray > med / threshold
        contrast = gray
    grown = dilate_cross(mask, 2)
    labels, n = ndimage.label(grown)
    if n == 0:
        raise DetectionError("no markers detected")
    flat = np.flatnonzero(labels)
    lab = labels.ravel()[flat]
    area = np.bincount(lab, weights=mask.ravel()[flat], minlength=n + 1)
    keep = (area >= min_area) & (area <= max_area)
    keep[0] = False
    if not keep.any():
        raise DetectionError("no blob passed the area bounds")
    c = contrast.ravel()[flat]
    floor = np.full(n + 1, np.inf)
    np.minimum.at(floor, lab, c)
    wgt = c - floor[lab]
    yy, xx = np.divmod(flat, labels.shape[1])
    tot = np.bincount(lab, wgt, n + 1)[keep]
    cx = np.bincount(lab, wgt * xx, n + 1)[keep] / tot
    cy = np.bincount(lab, wgt * yy, n + 1)[keep] / tot
    com = np.column_stack([cy, cx])
    found = MarkerSet(com[:, ::-1])
    if expected is not None and len(found) < expected:
        raise DetectionError(f"found {len(found)} markers, expected {expected}")
    return (found, grown) if return_mask else found


def grid_nodes(rows: int, cols: int, spacing_px: float, shape) -> np.ndarray:
    """Ideal node positions (rows*cols, 2), row-major and centred on the image."""
    h, w = shape
    gx = (np.arange(cols) - (cols - 1) / 2.0) * spacing_px + (w - 1) / 2.0
    gy = (np.arange(rows) - (rows - 1) / 2.0) * spacing_px + (h - 1) / 2.0
    X, Y = np.meshgrid(gx, gy)
    return np.column_stack([X.ravel(), Y.ravel()])


def associate(markers: MarkerSet, rows: int, cols: int) -> MarkerSet:
    """Label each marker with its (row, col) grid node.

    Markers are split into rows by vertical order and each row is sorted
    left to right. A row whose vertical extent overlaps its neighbour makes
    the labelling ambiguous and is rejected.
    """
    n = rows * cols
    if len(markers) < n:
        raise AssociationError(f"{len(markers)} markers for a {rows}x{cols} grid")
    if len(markers) > n:
        raise AssociationError(f"{len(markers)} markers claim {n} grid nodes")
    pos = markers.positions
    order = np.argsort(pos[:, 1], kind="stable")
    out = np.empty((n, 2))
    index = np.empty((n, 2), dtype=int)
    prev_max = -np.inf
    for r in range(rows):
        members = order[r * cols : (r + 1) * cols]
        ys = pos[members, 1]
        if ys.min() <= prev_max:
            raise AssociationError(f"rows {r - 1} and {r} overlap vertically")
        prev_max = ys.max()
        members = members[np.argsort(pos[members, 0], kind="stable")]
        out[r * cols : (r + 1) * cols] = pos[members]
        index[r * cols : (r + 1) * cols] = np.column_stack([np.full(cols, r), np.arange(cols)])
    return MarkerSet(out, index)


class WarpMap:
    """Per-pixel source coordinates: corrected (x, y) -> distorted (src_x, src_y)."""

    def __init__(self, src_x: np.ndarray, src_y: np.ndarray, model=None):
        if src_x.shape != src_y.shape or src_x.ndim != 2:
            raise ShapeMismatch("warp coordinate planes must be equal 2-D arrays")
        if not (np.all(np.isfinite(src_x)) and np.all(np.isfinite(src_y))):
            raise ValueError("warp map contains non-finite coordinates")
        self.src_x = np.asarray(src_x, dtype=float)
        self.src_y = np.asarray(src_y, dtype=float)
        self.model = model  # callable (n, 2) -> (n, 2) when fitted, else None
        self._taps = None

    @property
    def shape(self):
        return self.src_x.shape

    @classmethod
    def identity(cls, shape):
        yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
        return cls(xx, yy)

    def source_of(self, points) -> np.ndarray:
        """Source position for arbitrary corrected points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.model is not None:
            return self.model(pts)
        sx = ndimage.map_coordinates(self.src_x, [pts[:, 1], pts[:, 0]], order=1, mode="nearest")
        sy = ndimage.map_coordinates(self.src_y, [pts[:, 1], pts[:, 0]], order=1, mode="nearest")
        return np.column_stack([sx, sy])

    def max_offset(self) -> float:
        yy, xx = np.mgrid[0 : self.shape[0], 0 : self.shape[1]]
        return float(np.hypot(self.src_x - xx, self.src_y - yy).max())

    def is_injective(self, step: int = 8) -> bool:
        """Sample the Jacobian determinant on a coarse lattice; all must be positive."""
        sx, sy = self.src_x[::step, ::step], self.src_y[::step, ::step]
        dxdy, dxdx = np.gradient(sx)
        dydy, dydx = np.gradient(sy)
        return bool(np.all(dxdx * dydy - dxdy * dydx > 0))

    def taps(self) -> sparse.csr_matrix:
        """Cached bilinear resampling operator (H*W x H*W); out-of-frame rows are empty."""
        if self._taps is None:
            h, w = self.shape
            x, y = self.src_x.ravel(), self.src_y.ravel()
            valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
            x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.int64)
            y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.int64)
            wx = x - x0
            wy = y - y0
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
            vals = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1)
            vals[~valid] = 0.0
            rows = np.repeat(np.arange(h * w), 4)
            self._taps = sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(h * w, h * w))
        return self._taps


def fit_undistortion(detected: MarkerSet, rows: int, cols: int, spacing_mm: float,
                     geometry: SensorGeometry = SensorGeometry(), chunk: int = 32768) -> WarpMap:
    """Thin-plate-spline warp that sends each ideal grid node to its detection.

    The spline interpolates node displacements with an affine term, so it is
    exact at the nodes and reproduces any affine correspondence.
    """
    shape = (geometry.height_px, geometry.width_px)
    labelled = detected if detected.grid_index is not None else associate(detected, rows, cols)
    nodes = grid_nodes(rows, cols, spacing_mm / geometry.pixel_pitch, shape)
    order = labelled.grid_index[:, 0] * cols + labelled.grid_index[:, 1]
    if len(np.unique(order)) != len(order):
        raise AssociationError("two markers claim the same grid node")
    ideal = nodes[order]
    disp = labelled.positions - ideal
    tps = RBFInterpolator(ideal, disp, kernel="thin_plate_spline", degree=1)

    def model(pts):
        return pts + tps(pts)

    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.column_stack([xx.ravel(), yy.ravel()]).astype(float)
    off = np.empty_like(pix)
    for s in range(0, len(pix), chunk):
        off[s : s + chunk] = tps(pix[s : s + chunk])
    off = off.reshape(h, w, 2)
    return WarpMap(xx + off[..., 0], yy + off[..., 1], model=model)


def apply_warp(image: TactileImage, warp: WarpMap) -> TactileImage:
    """Bilinear resampling through ``warp``; sources outside the frame read as 0."""
    if image.shape != warp.shape:
        raise ShapeMismatch(f"image {image.shape} vs warp {warp.shape}")
    a = image.data
    out = (warp.taps() @ a.reshape(-1, a.shape[2])).reshape(a.shape)
    np.clip(out, 0.0, 1.0, out=out)
    return TactileImage(locked(out))


def save_warp(path, warp: WarpMap) -> None:
    from .io import write_grid

    write_grid(path, np.stack([warp.src_x, warp.src_y]))


def load_warp(path) -> WarpMap:
    from .io import read_grid

    a = read_grid(path)
    if a.ndim != 3 or a.shape[0] != 2:
        raise ValueError(f"{path}: expected a (2, H, W) warp grid")
    return WarpMap(a[0], a[1])
