"""Incipient-slip detection.

Marker motion inside the contact patch is compared with the best rigid
motion of that patch; markers that stray from the rigid estimate are
slipping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import DepthMap
from .markers import MotionField

NO_CONTACT = "no_contact"
STICTION = "stiction"
INCIPIENT_SLIP = "incipient_slip"


class NoFit(ValueError):
    """Fewer than two correspondences inside the contact region."""


@dataclass(frozen=True)
class RigidTransform2D:
    angle: float  # radians, in (-pi, pi]
    translation: tuple[float, float]  # px
    residual: float = 0.0  # RMS px over the fitted markers

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.matrix.T + np.asarray(self.translation)


@dataclass
class SlipConfig:
    depth_threshold: float = 0.2  # mm
    deviation_threshold: float = 1.0  # px
    trigger_fraction: float = 0.1
    closing: int = 3  # px, side of the square closing element

    def __post_init__(self):
        if self.depth_threshold < 0 or self.deviation_threshold <= 0 or not 0 <= self.trigger_fraction <= 1:
            raise ValueError("invalid slip thresholds")


def contact_region(depth: DepthMap, depth_threshold: float, closing: int = 3) -> np.ndarray:
    """Largest connected patch deeper than ``depth_threshold``, morphologically closed."""
    mask = depth.z > depth_threshold
    labels, n = ndimage.label(mask)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    mask = labels == best
    if closing > 1:
        # close on a padded bounding box; identical to closing the full frame
        ys, xs = ndimage.find_objects(labels, max_label=best)[best - 1]
        pad = closing
        sl = (slice(max(ys.start - pad, 0), ys.stop + pad), slice(max(xs.start - pad, 0), xs.stop + pad))
        mask[sl] = ndimage.binary_closing(mask[sl], structure=np.ones((closing, closing), bool))
    return mask


def in_mask(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    ij = np.round(np.asarray(points, dtype=float)).astype(int)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
    out = np.zeros(len(ij), dtype=bool)
    out[ok] = mask[ij[ok, 1], ij[ok, 0]]
    return out


def _procrustes(src: np.ndarray, dst: np.ndarray) -> RigidTransform2D:
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    angle = math.atan2(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]), np.sum(a * b))
    if angle == -math.pi:
        angle = math.pi
    c, s = math.cos(angle), math.sin(angle)
    t = md - np.array([c * ms[0] - s * ms[1], s * ms[0] + c * ms[1]])
    fit = RigidTransform2D(angle, (float(t[0]), float(t[1])))
    res = np.linalg.norm(fit.apply(src) - dst, axis=1)
    return RigidTransform2D(angle, fit.translation, float(np.sqrt(np.mean(res**2))))


def fit_rigid(motion: MotionField, mask: np.ndarray | None = None) -> RigidTransform2D:
    """Least-squares rotation + translation taking ref markers onto cur markers.

    With a mask, only markers whose current position lies inside it count.
    """
    sel = motion if mask is None else motion.subset(in_mask(motion.cur, mask))
    if len(sel) < 2:
        raise NoFit(f"{len(sel)} correspondences in contact, need at least 2")
    return _procrustes(sel.ref, sel.cur)


def fit_rigid_trimmed(ref: np.ndarray, cur: np.ndarray, max_steps: int = 50) -> RigidTransform2D:
    """Least-trimmed-squares rigid fit over the best half of the markers.

    Concentration steps start from the plain least-squares fit, so the
    result does not depend on any slip threshold.
    """
    n = len(ref)
    h = n // 2 + 1
    fit = _procrustes(ref, cur)
    if n <= 3:
        return fit
    subset = None
    for _ in range(max_steps):
        res = np.linalg.norm(fit.apply(ref) - cur, axis=1)
        keep = np.sort(np.argsort(res, kind="stable")[:h])
        if subset is not None and np.array_equal(keep, subset):
            break
        subset = keep
        fit = _procrustes(ref[keep], cur[keep])
    return fit


@dataclass
class SlipReport:
    state: str
    contact_mask: np.ndarray
    contact: np.ndarray  # bool per correspondence
    deviation: np.ndarray  # px per correspondence; NaN outside contact
    flags: np.ndarray  # bool per correspondence
    score: float
    estimated: np.ndarray  # (n, 2) rigid-motion prediction of cur
    transform: RigidTransform2D | None = None
    config: SlipConfig = field(default_factory=SlipConfig)

    @property
    def n_contact(self) -> int:
        return int(self.contact.sum())

    def to_dict(self, motion: MotionField | None = None) -> dict:
        d = {
            "state": self.state,
            "score": round(float(self.score), 9),
            "contact_markers": self.n_contact,
            "flagged_markers": int(self.flags.sum()),
            "contact_area_px": int(self.contact_mask.sum()),
            "config": {
                "depth_threshold": self.config.depth_threshold,
                "deviation_threshold": self.config.deviation_threshold,
                "trigger_fraction": self.config.trigger_fraction,
            },
            "transform": None,
        }
        if self.transform is not None:
            d["transform"] = {
                "angle_rad": round(self.transform.angle, 12),
                "translation_px": [round(v, 9) for v in self.transform.translation],
                "residual_px": round(self.transform.residual, 9),
            }
        if motion is not None:
            d["markers"] = [
                {
                    "ref": [round(float(v), 6) for v in motion.ref[i]],
                    "cur": [round(float(v), 6) for v in motion.cur[i]],
                    "deviation": round(float(self.deviation[i]), 6),
                    "slip": bool(self.flags[i]),
                }
                for i in np.flatnonzero(self.contact)
            ]
        return d


def detect_slip(motion: MotionField, depth: DepthMap, config: SlipConfig = SlipConfig()) -> SlipReport:
    mask = contact_region(depth, config.depth_threshold, config.closing)
    n = len(motion)
    contact = in_mask(motion.cur, mask) if n else np.zeros(0, dtype=bool)
    deviation = np.full(n, np.nan)
    flags = np.zeros(n, dtype=bool)
    estimated = np.full((n, 2), np.nan)
    if contact.sum() < 2:
        return SlipReport(NO_CONTACT, mask, contact, deviation, flags, 0.0, estimated, None, config)
    ref, cur = motion.ref[contact], motion.cur[contact]
    fit = fit_rigid_trimmed(ref, cur)
    est = fit.apply(ref)
    dev = np.linalg.norm(est - cur, axis=1)
    deviation[contact] = dev
    estimated[contact] = est
    flags[contact] = dev > config.deviation_threshold
    score = float(flags.sum() / contact.sum())
    state = INCIPIENT_SLIP if score > config.trigger_fraction else STICTION
    return SlipReport(state, mask, contact, deviation, flags, score, estimated, fit, config)
