"""Figure rendering for reports. Everything writes straight to a file."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import DepthMap, SensorGeometry, TactileImage  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def depth_surface(depth: DepthMap, geometry: SensorGeometry, path, stride: int = 8) -> None:
    """3-D view of a reconstructed imprint."""
    X, Y = geometry.pixel_grid_mm()
    fig = plt.figure(figsize=(7, 5))
    ax = fig.add_subplot(111, projection="3d")
    ax.plot_surface(X[::stride, ::stride], Y[::stride, ::stride], depth.z[::stride, ::stride],
                    cmap="viridis", linewidth=0, antialiased=False)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    ax.set_zlabel("depth (mm)")
    ax.invert_yaxis()
    _save(fig, path)


def motion_overlay(image: TactileImage, motion, path, scale: float = 3.0) -> None:
    fig, ax = plt.subplots(figsize=(8, 6))
    ax.imshow(image.data)
    d = motion.displacement
    ax.quiver(motion.ref[:, 0], motion.ref[:, 1], d[:, 0] * scale, d[:, 1] * scale, color="red",
              angles="xy", scale_units="xy", scale=1, width=0.003)
    ax.set_axis_off()
    _save(fig, path)


def slip_overlay(image: TactileImage, report, motion, path, scale: float = 3.0) -> None:
    """Contact region tinted yellow, measured motion in red, rigid estimate in
    green, slipping markers circled in white."""
    fig, ax = plt.subplots(figsize=(8, 6))
    ax.imshow(image.data)
    tint = np.zeros(report.contact_mask.shape + (4,))
    tint[report.contact_mask] = (1.0, 1.0, 0.0, 0.35)
    ax.imshow(tint)
    if len(motion):
        d = motion.displacement
        ax.quiver(motion.ref[:, 0], motion.ref[:, 1], d[:, 0] * scale, d[:, 1] * scale, color="red",
                  angles="xy", scale_units="xy", scale=1, width=0.003)
        c = report.contact
        if c.any():
            e = report.estimated[c] - motion.ref[c]
            ax.quiver(motion.ref[c, 0], motion.ref[c, 1], e[:, 0] * scale, e[:, 1] * scale, color="lime",
                      angles="xy", scale_units="xy", scale=1, width=0.003)
        f = report.flags
        ax.scatter(motion.cur[f, 0], motion.cur[f, 1], s=160, facecolors="none", edgecolors="white", linewidths=1.5)
    ax.set_title(f"{report.state}  score={report.score:.2f}")
    ax.set_axis_off()
    _save(fig, path)


def force_overlays(image: TactileImage, forces, geometry: SensorGeometry, tangential_path, normal_path) -> None:
    """Tangential force arrows and a normal-force heat map over the frame."""
    px, py = geometry.to_px(forces.positions[:, 0], forces.positions[:, 1])
    ft = forces.tangential
    fig, ax = plt.subplots(figsize=(8, 6))
    ax.imshow(image.data)
    mag = np.linalg.norm(ft, axis=1)
    s = 40.0 / mag.max() if mag.max() > 0 else 1.0
    q = ax.quiver(px, py, ft[:, 0] * s, ft[:, 1] * s, mag, cmap="plasma", angles="xy", scale_units="xy", scale=1)
    fig.colorbar(q, ax=ax, label="tangential force (N)")
    ax.set_axis_off()
    _save(fig, tangential_path)

    nx = len(np.unique(forces.positions[:, 0]))
    ny = len(forces.positions) // nx
    fz = forces.normal.reshape(ny, nx)
    fig, ax = plt.subplots(figsize=(8, 6))
    im = ax.imshow(fz, cmap="inferno", extent=(px.min(), px.max(), py.max(), py.min()))
    fig.colorbar(im, ax=ax, label="normal force (N)")
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    _save(fig, normal_path)


def illumination_heatmaps(before, after, path) -> None:
    """Per-channel and combined receiver flux before and after optimisation."""
    fig, axes = plt.subplots(2, 4, figsize=(14, 6.5))
    names = ("red", "green", "blue", "combined")
    cmaps = ("Reds", "Greens", "Blues", "inferno")
    for row, (mesh, label) in enumerate(((before, "initial"), (after, "optimised"))):
        planes = [mesh.flux[..., 0], mesh.flux[..., 1], mesh.flux[..., 2], mesh.total]
        g = mesh.geometry
        ext = (-g.width / 2, g.width / 2, g.height / 2, -g.height / 2)
        for col, (plane, name, cmap) in enumerate(zip(planes, names, cmaps)):
            ax = axes[row, col]
            im = ax.imshow(plane, cmap=cmap, extent=ext)
            ax.set_title(f"{label} {name}", fontsize=9)
            ax.tick_params(labelsize=7)
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    _save(fig, path)


def cost_trace(trace, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.asarray(trace)
    ax.plot(t, lw=0.8, color="0.6", label="evaluation")
    ax.plot(np.minimum.accumulate(t), color="C0", label="best so far")
    ax.set_yscale("log")
    ax.set_xlabel("evaluation")
    ax.set_ylabel("cost")
    ax.legend()
    _save(fig, path)
