"""Voxel execution of CAD trees, surface point sampling, and per-token geometric descriptors."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cadseq.core import (
    BooleanOp,
    CadError,
    CadSequence,
    CadTree,
    CurveKind,
    ExtrusionParams,
    Role,
    SketchPrimitive,
    circumcircle,
    serialize_tree,
    token_info,
    token_to_angle,
    token_to_coord,
    token_to_depth,
    token_to_scale,
)

WORLD_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
ARC_SEGMENTS_PER_TURN = 64
# Arcs whose circumradius exceeds this (sketch units) are treated as lines.
DEGENERATE_ARC_RADIUS = 1e3
_CHUNK = 1 << 20


class GeometryError(RuntimeError):
    pass


class EmptySolidError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Occupancy over an axis-aligned box; ``occupancy[i, j, k]`` is cell (x_i, y_j, z_k)."""

    resolution: int
    occupancy: np.ndarray
    bounds: tuple = WORLD_BOUNDS

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        r = self.resolution
        if occ.shape != (r, r, r):
            raise GeometryError(f"occupancy shape {occ.shape} does not match resolution {r}")
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        if not np.all(hi > lo):
            raise GeometryError("degenerate bounds")
        object.__setattr__(self, "occupancy", occ)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and tuple(map(tuple, self.bounds)) == tuple(map(tuple, other.bounds))
            and np.array_equal(self.occupancy, other.occupancy)
        )

    @property
    def cell_size(self) -> np.ndarray:
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        return (hi - lo) / self.resolution

    @property
    def is_empty(self) -> bool:
        return not self.occupancy.any()

    def volume(self) -> float:
        return float(self.occupancy.sum() * np.prod(self.cell_size))

    def occupied_fraction(self) -> float:
        return float(self.occupancy.mean())

    def _check(self, other: "VoxelGrid") -> "VoxelGrid":
        if self.resolution != other.resolution or self.bounds != other.bounds:
            raise GeometryError("grids differ in resolution or bounds")
        return other

    def join(self, other: "VoxelGrid") -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.occupancy | self._check(other).occupancy, self.bounds)

    def cut(self, other: "VoxelGrid") -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.occupancy & ~self._check(other).occupancy, self.bounds)

    def intersect(self, other: "VoxelGrid") -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.occupancy & self._check(other).occupancy, self.bounds)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class GeomDescriptors:
    """Per-token scale ``s``, hierarchy depth ``d`` and curvature ``r``."""

    s: np.ndarray
    d: np.ndarray
    r: np.ndarray

    def __len__(self):
        return len(self.s)


# ---------------------------------------------------------------------------
# 2D sketch geometry (sketch units, coordinates in [-1, 1])


def _pt(p) -> tuple[float, float]:
    return token_to_coord(p[0]), token_to_coord(p[1])


def _arc_circle(curve: SketchPrimitive):
    """(center_x, center_y, radius, start_angle, signed_sweep) or None if degenerate."""
    s, m, e = (_pt(p) for p in curve.points)
    try:
        cx, cy, r = circumcircle(s, m, e)
    except CadError:
        return None
    if r > DEGENERATE_ARC_RADIUS:
        return None
    a0 = math.atan2(s[1] - cy, s[0] - cx)
    am = math.atan2(m[1] - cy, m[0] - cx)
    a1 = math.atan2(e[1] - cy, e[0] - cx)
    ccw = (a1 - a0) % (2 * math.pi)
    if (am - a0) % (2 * math.pi) < ccw:
        return cx, cy, r, a0, ccw
    return cx, cy, r, a0, -(2 * math.pi - ccw)


def curve_polyline(curve: SketchPrimitive) -> np.ndarray:
    """Points from start to end (exclusive of nothing); circles return a closed ring."""
    if curve.kind is CurveKind.LINE:
        return np.array([_pt(curve.start), _pt(curve.end)])
    if curve.kind is CurveKind.CIRCLE:
        (cx, cy), (px, py) = _pt(curve.points[0]), _pt(curve.points[1])
        r = math.hypot(px - cx, py - cy)
        a = np.linspace(0, 2 * math.pi, ARC_SEGMENTS_PER_TURN + 1)
        return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], axis=1)
    circ = _arc_circle(curve)
    if circ is None:
        return np.array([_pt(curve.start), _pt(curve.end)])
    cx, cy, r, a0, sweep = circ
    n = max(4, math.ceil(abs(sweep) / (2 * math.pi) * ARC_SEGMENTS_PER_TURN))
    a = a0 + sweep * np.linspace(0, 1, n + 1)
    pts = np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], axis=1)
    # pin the endpoints to the exact encoded values so adjacent curves meet
    pts[0], pts[-1] = _pt(curve.start), _pt(curve.end)
    return pts


def curve_length(curve: SketchPrimitive) -> float:
    if curve.kind is CurveKind.LINE:
        (x0, y0), (x1, y1) = _pt(curve.start), _pt(curve.end)
        return math.hypot(x1 - x0, y1 - y0)
    if curve.kind is CurveKind.CIRCLE:
        return 2 * math.pi * curve_radius(curve)
    circ = _arc_circle(curve)
    if circ is None:
        (x0, y0), (x1, y1) = _pt(curve.start), _pt(curve.end)
        return math.hypot(x1 - x0, y1 - y0)
    return circ[2] * abs(circ[4])


def curve_radius(curve: SketchPrimitive) -> float:
    """Radius for circles and arcs, ``inf`` for lines and degenerate arcs."""
    if curve.kind is CurveKind.CIRCLE:
        (cx, cy), (px, py) = _pt(curve.points[0]), _pt(curve.points[1])
        return math.hypot(px - cx, py - cy)
    if curve.kind is CurveKind.ARC:
        circ = _arc_circle(curve)
        if circ is not None:
            return circ[2]
    return math.inf


def curvature(curve: SketchPrimitive) -> float:
    r = curve_radius(curve)
    return 0.0 if math.isinf(r) else 1.0 / r


def _bbox_points(curves: Sequence[SketchPrimitive]) -> np.ndarray:
    return np.concatenate([curve_polyline(c) for c in curves])


def bbox_diagonal(curves: Sequence[SketchPrimitive]) -> float:
    pts = _bbox_points(curves)
    return float(np.linalg.norm(pts.max(0) - pts.min(0)))


def _inside_loop(loop: Sequence[SketchPrimitive], u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if len(loop) == 1 and loop[0].kind is CurveKind.CIRCLE:
        (cx, cy), (px, py) = _pt(loop[0].points[0]), _pt(loop[0].points[1])
        return (u - cx) ** 2 + (v - cy) ** 2 < (px - cx) ** 2 + (py - cy) ** 2
    ring = np.concatenate([curve_polyline(c)[:-1] for c in loop])
    inside = np.zeros(u.shape, dtype=bool)
    x0, y0 = ring[:, 0], ring[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > v) != (by > v)
        xint = ax + (v - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (u < xint)
    return inside


def sketch_mask(sketch, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Even-odd fill per face, union over faces."""
    out = np.zeros(u.shape, dtype=bool)
    for face in sketch:
        parity = np.zeros(u.shape, dtype=bool)
        for loop in face:
            parity ^= _inside_loop(loop, u, v)
        out |= parity
    return out


# ---------------------------------------------------------------------------
# 3D execution


def rotation_matrix(theta: float, phi: float, gamma: float) -> np.ndarray:
    """Intrinsic Z-Y-X: yaw ``gamma`` about z, pitch ``phi`` about y, roll ``theta`` about x."""
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1.0]])
    ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    rx = np.array([[1.0, 0, 0], [0, ct, -st], [0, st, ct]])
    return rz @ ry @ rx


def extrusion_frame(ext: ExtrusionParams):
    """Rotation, translation, scale, (d_plus, d_minus) in model units."""
    rot = rotation_matrix(token_to_angle(ext.theta), token_to_angle(ext.phi), token_to_angle(ext.gamma))
    tau = np.array([token_to_coord(ext.tau_x), token_to_coord(ext.tau_y), token_to_coord(ext.tau_z)])
    return rot, tau, token_to_scale(ext.sigma), token_to_depth(ext.d_plus), token_to_depth(ext.d_minus)


def cell_centers(resolution: int, bounds=WORLD_BOUNDS) -> list[np.ndarray]:
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    h = (hi - lo) / resolution
    return [lo[i] + (np.arange(resolution) + 0.5) * h[i] for i in range(3)]


def extrude_occupancy(sketch, ext: ExtrusionParams, resolution: int, bounds=WORLD_BOUNDS) -> np.ndarray:
    """Occupancy of one swept sketch, by inverse-mapping cell centers into the sketch frame."""
    rot, tau, scale, d_plus, d_minus = extrusion_frame(ext)
    occ = np.zeros((resolution,) * 3, dtype=bool)
    if scale <= 0.0:
        return occ
    pts2d = np.concatenate([curve_polyline(c) for face in sketch for loop in face for c in loop])
    umin, vmin = pts2d.min(0)
    umax, vmax = pts2d.max(0)
    xs, ys, zs = cell_centers(resolution, bounds)
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    slab = max(1, _CHUNK // (resolution * resolution))
    for i0 in range(0, resolution, slab):
        xsl = xs[i0 : i0 + slab]
        p = np.stack(np.broadcast_arrays(xsl[:, None, None], yy[None], zz[None]), axis=-1).reshape(-1, 3)
        q = (p - tau) @ rot  # rows are R^T (p - tau)
        u, v, w = q[:, 0] / scale, q[:, 1] / scale, q[:, 2]
        cand = (w >= -d_minus) & (w <= d_plus) & (u >= umin) & (u <= umax) & (v >= vmin) & (v <= vmax)
        idx = np.flatnonzero(cand)
        hit = np.zeros(len(p), dtype=bool)
        if len(idx):
            hit[idx] = sketch_mask(sketch, u[idx], v[idx])
        occ[i0 : i0 + slab] = hit.reshape(len(xsl), resolution, resolution)
    return occ


def execute(tree: CadTree, resolution: int = 64) -> VoxelGrid:
    """Run every design step in order and combine bodies by their boolean type."""
    if not 16 <= resolution <= 256:
        raise GeometryError(f"resolution {resolution} outside [16, 256]")
    tree.validate()
    acc = np.zeros((resolution,) * 3, dtype=bool)
    for sketch, ext in tree.steps():
        body = extrude_occupancy(sketch, ext, resolution)
        if ext.beta in (BooleanOp.NEW, BooleanOp.JOIN):
            acc |= body
        elif ext.beta is BooleanOp.CUT:
            acc &= ~body
        else:
            acc &= body
    if not acc.any():
        raise EmptySolidError("non-watertight/empty solid")
    return VoxelGrid(resolution, acc)


def is_watertight(grid: VoxelGrid) -> bool:
    """Voxel solids are closed by construction, so the test reduces to non-emptiness."""
    return not grid.is_empty


def surface_cells(grid: VoxelGrid) -> np.ndarray:
    occ = grid.occupancy
    padded = np.pad(occ, 1, constant_values=False)
    interior = np.ones_like(occ)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occ & ~interior


def sample_points(grid: VoxelGrid, n: int, seed: int = 0) -> PointCloud:
    """Uniform samples inside occupied cells that touch at least one empty 6-neighbor."""
    if n < 1:
        raise GeometryError("n must be >= 1")
    cells = np.argwhere(surface_cells(grid))
    if len(cells) == 0:
        raise GeometryError("cannot sample an empty grid")
    rng = np.random.default_rng(seed)
    pick = cells[rng.integers(len(cells), size=n)]
    lo = np.asarray(grid.bounds[0], float)
    return PointCloud(lo + (pick + rng.random((n, 3))) * grid.cell_size)


# ---------------------------------------------------------------------------
# descriptors

_CONTROL_ROLES = (Role.NONE, Role.CLS, Role.END, Role.E_SOLID)
_CURVE_ROLES = (Role.LINE_POINT, Role.ARC_POINT, Role.CIRCLE_CENTER, Role.CIRCLE_PERIMETER, Role.E_CURVE)


def descriptors(tree: CadTree, seq: CadSequence) -> GeomDescriptors:
    """Per-token (s, d, r) aligned with ``seq``."""
    try:
        expected = serialize_tree(tree, seq.n_ts)
    except CadError as exc:
        raise GeometryError(f"invalid tree: {exc}") from None
    if expected != seq:
        raise GeometryError("sequence does not match tree")
    steps = tree.steps()
    info = token_info(seq)
    n = seq.n_ts
    s = np.zeros(n)
    d = np.zeros(n, dtype=np.int64)
    r = np.zeros(n)
    for k, ti in enumerate(info):
        if ti.role in _CONTROL_ROLES:
            continue
        d[k] = ti.depth
        sketch, ext = steps[ti.step]
        if ti.role in _CURVE_ROLES:
            curve = sketch[ti.face][ti.loop][ti.curve]
            s[k] = curve_length(curve)
            r[k] = curvature(curve)
        elif ti.role is Role.E_LOOP:
            s[k] = bbox_diagonal(sketch[ti.face][ti.loop])
        elif ti.role is Role.E_FACE:
            s[k] = bbox_diagonal([c for loop in sketch[ti.face] for c in loop])
        elif ti.role is Role.E_SKETCH:
            s[k] = bbox_diagonal([c for face in sketch for loop in face for c in loop])
        else:  # extrusion scalars and e_e
            pts = _bbox_points([c for face in sketch for loop in face for c in loop])
            w, h = pts.max(0) - pts.min(0)
            _, _, scale, dp, dm = extrusion_frame(ext)
            s[k] = math.sqrt((scale * w) ** 2 + (scale * h) ** 2 + (dp + dm) ** 2)
    return GeomDescriptors(s, d, r)


def null_descriptors(n_ts: int) -> GeomDescriptors:
    """Descriptors for unconditional generation, where no tree is known."""
    return GeomDescriptors(np.zeros(n_ts), np.zeros(n_ts, dtype=np.int64), np.zeros(n_ts))


# ---------------------------------------------------------------------------
# file formats

VOXEL_MAGIC = b"GFV1"


def write_obj(cloud: PointCloud, path) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in cloud.points]
    Path(path).write_text("\n".join(lines) + "\n")


def write_points_f32(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(cloud.points.astype("<f4").tobytes())


def read_points_f32(path) -> PointCloud:
    return PointCloud(np.frombuffer(Path(path).read_bytes(), dtype="<f4").astype(float))


def voxel_to_bytes(grid: VoxelGrid) -> bytes:
    """Header (magic, resolution, 6 bound floats, run count) then u32 run lengths.

    Runs alternate empty/occupied over the C-order flattened grid, starting with empty.
    """
    flat = grid.occupancy.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    lo, hi = grid.bounds
    header = VOXEL_MAGIC + struct.pack("<H6fI", grid.resolution, *lo, *hi, len(runs))
    return header + runs.astype("<u4").tobytes()


def voxel_from_bytes(data: bytes) -> VoxelGrid:
    if data[:4] != VOXEL_MAGIC:
        raise GeometryError("bad voxel magic")
    res, *rest = struct.unpack_from("<H6fI", data, 4)
    bounds, n_runs = rest[:6], rest[6]
    runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=4 + struct.calcsize("<H6fI"))
    values = np.arange(n_runs) % 2 == 1
    occ = np.repeat(values, runs).reshape(res, res, res)
    return VoxelGrid(res, occ, (tuple(map(float, bounds[:3])), tuple(map(float, bounds[3:]))))
