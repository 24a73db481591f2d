"""Linear-elastic hexahedral model of the gel and nodal force recovery.

Mesh frame: x right and y down (as in the image, mm from the image centre),
z from the bonded bottom face (z = 0, camera side) up to the contact surface
(z = gel thickness). Indentation therefore moves top nodes in -z.
Stiffness is in N/mm, displacements in mm, forces in N.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.interpolate import RBFInterpolator
from scipy.spatial import Delaunay

from .core import DepthMap, SensorGeometry, ShapeMismatch
from .markers import MotionField

# local node order: bottom face counter-clockwise, then top face
HEX_CORNERS = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)
GAUSS = 1.0 / math.sqrt(3.0)


class InvertedElement(ValueError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = 85.0  # kPa
    poisson_ratio: float = 0.48

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson's ratio must lie in [0, 0.5)")

    def elasticity(self) -> np.ndarray:
        """6x6 isotropic constitutive matrix in N/mm^2 (Voigt order xx yy zz xy yz zx)."""
        e = self.young_modulus * 1e-3
        nu = self.poisson_ratio
        lam = e * nu / ((1 + nu) * (1 - 2 * nu))
        mu = e / (2 * (1 + nu))
        d = np.zeros((6, 6))
        d[:3, :3] = lam
        d[np.arange(3), np.arange(3)] += 2 * mu
        d[np.arange(3, 6), np.arange(3, 6)] = mu
        return d


def shape_derivatives(xi, eta, zeta) -> np.ndarray:
    """dN/d(xi, eta, zeta) for the 8 trilinear shape functions, shape (8, 3)."""
    c = HEX_CORNERS
    return 0.125 * np.column_stack([
        c[:, 0] * (1 + c[:, 1] * eta) * (1 + c[:, 2] * zeta),
        c[:, 1] * (1 + c[:, 0] * xi) * (1 + c[:, 2] * zeta),
        c[:, 2] * (1 + c[:, 0] * xi) * (1 + c[:, 1] * eta),
    ])


def strain_matrix(dn_dx: np.ndarray) -> np.ndarray:
    b = np.zeros((6, 24))
    for a in range(8):
        dx, dy, dz = dn_dx[a]
        col = 3 * a
        b[0, col] = dx
        b[1, col + 1] = dy
        b[2, col + 2] = dz
        b[3, col], b[3, col + 1] = dy, dx
        b[4, col + 1], b[4, col + 2] = dz, dy
        b[5, col], b[5, col + 2] = dz, dx
    return b


def element_stiffness(params: MaterialParams, coords) -> np.ndarray:
    """24x24 stiffness of a trilinear hexahedron, 2x2x2 Gauss quadrature."""
    coords = np.asarray(coords, dtype=float).reshape(8, 3)
    d = params.elasticity()
    k = np.zeros((24, 24))
    for xi in (-GAUSS, GAUSS):
        for eta in (-GAUSS, GAUSS):
            for zeta in (-GAUSS, GAUSS):
                dn = shape_derivatives(xi, eta, zeta)
                jac = dn.T @ coords
                det = np.linalg.det(jac)
                if det <= 0:
                    raise InvertedElement(f"non-positive Jacobian {det:.3g}")
                b = strain_matrix(dn @ np.linalg.inv(jac).T)
                k += b.T @ d @ b * det
    return 0.5 * (k + k.T)


@dataclass(eq=False)
class HexMesh:
    nodes: np.ndarray  # (N, 3) mm
    elements: np.ndarray  # (m, 8) node ids
    nx: int
    ny: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dof(self) -> int:
        return 3 * len(self.nodes)

    @property
    def layer(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def bottom(self) -> np.ndarray:
        return np.arange(self.layer)

    @property
    def top(self) -> np.ndarray:
        return np.arange(self.layer, 2 * self.layer)

    def check(self) -> None:
        if len(self.elements) != self.nx * self.ny:
            raise ValueError("element count does not match nx * ny")
        if self.n_nodes != 2 * self.layer:
            raise ValueError("node count does not match (nx+1)(ny+1)*2")
        for e in self.elements:
            for xi, eta, zeta in HEX_CORNERS * GAUSS:
                if np.linalg.det(shape_derivatives(xi, eta, zeta).T @ self.nodes[e]) <= 0:
                    raise InvertedElement(f"element {e.tolist()} is inverted")


def build_mesh(nx: int, ny: int, width: float, height: float, thickness: float) -> HexMesh:
    """Single-layer grid of nx * ny bricks covering a width x height footprint centred at 0."""
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    ys = np.linspace(-height / 2, height / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    layer = np.column_stack([X.ravel(), Y.ravel()])
    nodes = np.vstack([np.column_stack([layer, np.zeros(len(layer))]),
                       np.column_stack([layer, np.full(len(layer), thickness)])])
    n_layer = len(layer)
    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    base = (j * (nx + 1) + i).ravel()
    quad = np.column_stack([base, base + 1, base + nx + 2, base + nx + 1])
    elements = np.hstack([quad, quad + n_layer])
    return HexMesh(nodes, elements, nx, ny)


def mesh_for_sensor(geometry: SensorGeometry, nx: int = 32, ny: int = 24) -> HexMesh:
    w, h = geometry.sensing_area
    return build_mesh(nx, ny, w, h, geometry.gel_thickness)


def element_dofs(elements: np.ndarray) -> np.ndarray:
    return (3 * elements[:, :, None] + np.arange(3)).reshape(len(elements), 24)


def assemble(mesh: HexMesh, params: MaterialParams) -> sparse.csr_matrix:
    """Global stiffness by scatter-add; geometrically identical bricks share one element matrix."""
    cache = {}
    blocks = np.empty((len(mesh.elements), 24, 24))
    for n, e in enumerate(mesh.elements):
        local = mesh.nodes[e] - mesh.nodes[e[0]]
        key = tuple(np.round(local, 12).ravel())
        if key not in cache:
            cache[key] = element_stiffness(params, mesh.nodes[e])
        blocks[n] = cache[key]
    dofs = element_dofs(mesh.elements)
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    k = sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(mesh.n_dof, mesh.n_dof)).tocsr()
    k.sum_duplicates()
    return k


@dataclass(frozen=True)
class Camera:
    principal_point: tuple[float, float] | None = None  # px; None -> image centre
    focal_length_px: float | None = None
    distance_mm: float | None = 20.0  # camera to gel surface

    def distance(self, geometry: SensorGeometry) -> float:
        if self.distance_mm is not None:
            return self.distance_mm
        if self.focal_length_px is None:
            raise ValueError("camera needs a distance or a focal length")
        return self.focal_length_px * geometry.pixel_pitch

    def center(self, geometry: SensorGeometry):
        return self.principal_point if self.principal_point is not None else geometry.center_px


@dataclass(eq=False)
class DisplacementField:
    u: np.ndarray  # (N, 3) mm
    measured: np.ndarray  # bool per node: top nodes filled from measurements
    extrapolated: np.ndarray  # bool per node: outside the marker hull

    @property
    def vector(self) -> np.ndarray:
        return self.u.ravel()


def interpolate_motion(motion: MotionField, points_px: np.ndarray) -> np.ndarray:
    """Thin-plate interpolation of marker displacements (px) at rest-frame points."""
    n = len(motion)
    out = np.zeros((len(points_px), 2))
    if n == 0:
        return out
    disp = motion.displacement
    if n < 4:
        return out + disp.mean(axis=0)
    return RBFInterpolator(motion.ref, disp, kernel="thin_plate_spline", degree=1)(points_px)


def viewing_correction(depth_mm: np.ndarray, offset_mm: np.ndarray, distance_mm: float) -> np.ndarray:
    """Apparent radial shift (mm) of a surface point pushed ``depth_mm`` toward a pinhole camera."""
    return np.asarray(depth_mm)[:, None] * np.asarray(offset_mm) / distance_mm


def displacement_field(motion: MotionField, depth: DepthMap, mesh: HexMesh,
                       geometry: SensorGeometry, camera: Camera = Camera()) -> DisplacementField:
    if depth.shape != (geometry.height_px, geometry.width_px):
        raise ShapeMismatch("depth map does not match the sensor geometry")
    top = mesh.top
    xy_mm = mesh.nodes[top, :2]
    px = np.column_stack(geometry.to_px(xy_mm[:, 0], xy_mm[:, 1]))
    dxy = interpolate_motion(motion, px) * geometry.pixel_pitch
    dz = ndimage.map_coordinates(depth.z, [px[:, 1], px[:, 0]], order=1, mode="nearest")
    ppx, ppy = camera.center(geometry)
    offset_mm = (px - np.array([ppx, ppy])) * geometry.pixel_pitch
    dxy = dxy - viewing_correction(dz, offset_mm, camera.distance(geometry))
    u = np.zeros((mesh.n_nodes, 3))
    u[top, :2] = dxy
    u[top, 2] = -dz
    measured = np.zeros(mesh.n_nodes, dtype=bool)
    measured[top] = True
    extrap = np.zeros(mesh.n_nodes, dtype=bool)
    if len(motion) >= 3:
        try:
            extrap[top] = Delaunay(motion.ref).find_simplex(px) < 0
        except Exception:  # degenerate (collinear) marker sets
            extrap[top] = True
    else:
        extrap[top] = True
    return DisplacementField(u, measured, extrap)


@dataclass(eq=False)
class ForceField:
    positions: np.ndarray  # (n_top, 2) mm
    force: np.ndarray  # (n_top, 3) N
    all_forces: np.ndarray  # (N, 3) N, including bottom reactions

    @property
    def tangential(self) -> np.ndarray:
        return self.force[:, :2]

    @property
    def normal(self) -> np.ndarray:
        return self.force[:, 2]

    def summary(self) -> dict:
        return {
            "total_normal_N": float(self.normal.sum()),
            "total_tangential_N": [float(v) for v in self.tangential.sum(axis=0)],
            "max_tangential_N": float(np.linalg.norm(self.tangential, axis=1).max()) if len(self.force) else 0.0,
        }

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.positions, self.force])
        body = "".join("%.6f,%.6f,%.9e,%.9e,%.9e\n" % tuple(r) for r in rows.tolist())
        with open(path, "w", newline="") as fh:
            fh.write("x_mm,y_mm,Fx_N,Fy_N,Fz_N\n" + body)


def compute_forces(k, u, mesh: HexMesh) -> ForceField:
    """F = K U, reported at the top-surface nodes."""
    vec = u.vector if isinstance(u, DisplacementField) else np.asarray(u, dtype=float).ravel()
    if k.shape != (mesh.n_dof, mesh.n_dof) or vec.shape != (mesh.n_dof,):
        raise ShapeMismatch(f"K {k.shape}, U {vec.shape}, mesh dof {mesh.n_dof}")
    f = (k @ vec).reshape(-1, 3)
    top = mesh.top
    return ForceField(mesh.nodes[top, :2].copy(), f[top], f)
