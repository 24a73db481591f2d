"""Frame-to-frame marker correspondence."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .distortion import MarkerSet


@dataclass(eq=False)
class MotionField:
    ref: np.ndarray  # (n, 2) px
    cur: np.ndarray  # (n, 2) px
    ref_index: np.ndarray  # indices into the reference MarkerSet
    cur_index: np.ndarray
    unmatched_ref: int = 0
    unmatched_cur: int = 0

    @property
    def displacement(self) -> np.ndarray:
        return self.cur - self.ref

    def __len__(self):
        return len(self.ref)

    @classmethod
    def from_arrays(cls, ref, cur):
        ref = np.asarray(ref, dtype=float).reshape(-1, 2)
        cur = np.asarray(cur, dtype=float).reshape(-1, 2)
        idx = np.arange(len(ref))
        return cls(ref, cur, idx, idx.copy())

    def subset(self, keep: np.ndarray) -> "MotionField":
        return MotionField(self.ref[keep], self.cur[keep], self.ref_index[keep], self.cur_index[keep],
                           self.unmatched_ref, self.unmatched_cur)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["ref_x", "ref_y", "cur_x", "cur_y", "dx", "dy"])
            for (rx, ry), (cx, cy) in zip(self.ref, self.cur):
                wr.writerow([f"{rx:.6f}", f"{ry:.6f}", f"{cx:.6f}", f"{cy:.6f}", f"{cx - rx:.6f}", f"{cy - ry:.6f}"])


def track(reference: MarkerSet, current: MarkerSet, max_displacement: float) -> MotionField:
    """One-to-one matching that maximises the number of pairs within
    ``max_displacement`` and, among those, minimises total squared displacement.
    """
    if len(reference) == 0:
        raise ValueError("reference marker set is empty")
    ref, cur = reference.positions, current.positions
    if len(cur) == 0:
        empty = np.empty((0, 2))
        none = np.empty(0, dtype=int)
        return MotionField(empty, empty.copy(), none, none.copy(), len(ref), 0)
    cost = cdist(ref, cur, "sqeuclidean")
    allowed = cost <= max_displacement**2
    # any forbidden pair outweighs every feasible assignment
    big = max_displacement**2 * (min(cost.shape) + 1) + 1.0
    r, c = linear_sum_assignment(np.where(allowed, cost, big))
    ok = allowed[r, c]
    r, c = r[ok], c[ok]
    return MotionField(ref[r], cur[c], r, c, len(ref) - len(r), len(cur) - len(c))
