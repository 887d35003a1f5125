"""Mixing objective from particle-set hull growth between inflow and outflow.

Particles seeded on rectangular subdomains of the inflow cross-section are
integrated through a velocity field until they cross the outflow plane; the
relative growth of each set's convex-hull perimeter, averaged over the
rectangles and negated, is the objective (better mixing is more negative).

The flow is an analytic stand-in for a full solver: an oblique barrel-driven
shear, deflected around the mixing element by a ramp on the element's signed
distance.  The field is a named, swappable interface so a real solver can be
attached later; its divergence is not guaranteed to vanish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .mesh import TriMesh
from .meshops import MeshQuery, SdfGrid, sample_grid


class ObjectiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    """Unwound screw-channel section with a barrel-driven oblique shear flow.

    ``length`` runs along the main flow direction x, ``width`` along y and
    ``height`` along z; the barrel plate at z = height moves with
    ``barrel_speed`` at ``barrel_angle`` radians from the x axis.
    """

    length: float = 0.0315
    width: float = 0.02405
    height: float = 0.0075
    barrel_speed: float = 0.05
    barrel_angle: float = math.radians(15.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.length, self.width, self.height, self.barrel_speed) <= 0:
            raise ValueError("channel dimensions and barrel speed must be positive")

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def outflow_x(self) -> float:
        return float(self.origin[0] + self.length)

    @property
    def center(self) -> np.ndarray:
        return self.origin_array + 0.5 * np.array([self.length, self.width, self.height])


class VelocityField:
    """Evaluation rule mapping points to velocities, with an optional element."""

    def __init__(self, fn, mesh: TriMesh | None = None, name: str = "custom"):
        self._fn = fn
        self.mesh = mesh
        self.name = name

    def evaluate(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.asarray(self._fn(points), dtype=np.float64)
        if out.shape != points.shape:
            raise ValueError("velocity rule returned wrong shape")
        return out

    def __call__(self, points) -> np.ndarray:
        return self.evaluate(points)


def uniform_flow(speed: float) -> VelocityField:
    def fn(p):
        v = np.zeros_like(p)
        v[:, 0] = speed
        return v

    return VelocityField(fn, name="uniform")


def axial_shear_flow(base: float, gamma: float, spec: ChannelSpec) -> VelocityField:
    """u = (base + gamma * (z - z0), 0, 0): shear with no cross-flow."""
    z0 = spec.origin[2]

    def fn(p):
        v = np.zeros_like(p)
        v[:, 0] = base + gamma * (p[:, 2] - z0)
        return v

    return VelocityField(fn, name="axial_shear")


def cross_shear_flow(base: float, gamma: float, spec: ChannelSpec) -> VelocityField:
    """u = (base, gamma * (z - z0), 0): transverse drift linear in height."""
    z0 = spec.origin[2]

    def fn(p):
        v = np.zeros_like(p)
        v[:, 0] = base
        v[:, 1] = gamma * (p[:, 2] - z0)
        return v

    return VelocityField(fn, name="cross_shear")


def barrel_flow(spec: ChannelSpec) -> VelocityField:
    """Oblique drag flow, linear in height: zero at the root, barrel speed on top."""
    direction = np.array([math.cos(spec.barrel_angle), math.sin(spec.barrel_angle), 0.0])
    z0 = spec.origin[2]

    def fn(p):
        frac = (p[:, 2] - z0) / spec.height
        return spec.barrel_speed * frac[:, None] * direction[None, :]

    return VelocityField(fn, name="barrel")


def surrogate_field(
    mesh: TriMesh | None,
    spec: ChannelSpec,
    phi_grid: SdfGrid | None = None,
    grid_res: int = 32,
    ramp_width: float | None = None,
) -> VelocityField:
    """Barrel-driven shear deflected around the element via its SDF.

    The velocity is ``s(phi) * v_base`` blended with the tangential part of
    ``v_base`` near the surface, where ``s`` ramps from 0 at the surface to 1
    at ``ramp_width`` (default a tenth of the element's bounding radius);
    inside the element it vanishes.  Outside the ramp the base flow is
    returned exactly.  ``phi_grid`` may supply a precomputed signed-distance
    grid; otherwise one is sampled from the mesh at ``grid_res``.
    """
    base = barrel_flow(spec)
    if mesh is None and phi_grid is None:
        return VelocityField(base.evaluate, name="surrogate_empty")

    if mesh is not None:
        lo, hi = mesh.bounds()
        radius = 0.5 * float(np.linalg.norm(hi - lo))
    else:
        lo = phi_grid.origin
        hi = phi_grid.origin + phi_grid.spacing * (np.array(phi_grid.resolution) - 1)
        radius = 0.5 * float(np.linalg.norm(hi - lo))
    w = 0.1 * radius if ramp_width is None else float(ramp_width)

    if phi_grid is None:
        margin = w + 2.0 * (hi - lo).max() / grid_res
        origin = lo - margin
        spacing = (hi - lo + 2 * margin) / (grid_res - 1)
        phi_grid = sample_grid(MeshQuery(mesh), origin, spacing, (grid_res,) * 3)

    gx, gy, gz = np.gradient(
        phi_grid.values,
        phi_grid.spacing[0], phi_grid.spacing[1], phi_grid.spacing[2],
    )
    grad_grids = [
        SdfGrid(phi_grid.origin, phi_grid.spacing, g) for g in (gx, gy, gz)
    ]
    g_lo = phi_grid.origin
    g_hi = phi_grid.origin + phi_grid.spacing * (np.array(phi_grid.resolution) - 1)

    def fn(p):
        v = base.evaluate(p)
        near = np.all((p >= g_lo) & (p <= g_hi), axis=1)
        if not near.any():
            return v
        pn = p[near]
        phi = phi_grid.interpolate(pn)
        s = np.clip(phi / w, 0.0, 1.0)
        needs_blend = s < 1.0
        if needs_blend.any():
            vb = v[near]
            normal = np.stack([g.interpolate(pn) for g in grad_grids], axis=1)
            norms = np.linalg.norm(normal, axis=1)
            normal = normal / np.where(norms > 0, norms, 1.0)[:, None]
            tangential = vb - np.einsum("ij,ij->i", vb, normal)[:, None] * normal
            blended = s[:, None] * vb + (1.0 - s)[:, None] * tangential
            blended[phi <= 0.0] = 0.0
            vn = np.where(needs_blend[:, None], blended, vb)
            v[near] = vn
        return v

    return VelocityField(fn, mesh=mesh, name="surrogate")


# --- particle advection ---------------------------------------------------------


@dataclass
class ParticleSet:
    rect_id: int
    inflow: np.ndarray   # (n, 2) cross-section coordinates (y, z)
    outflow: np.ndarray  # (m, 2) coordinates of particles that reached the outflow
    n_stuck: int = 0


def advect_batch(
    field: VelocityField,
    starts: np.ndarray,
    dt: float,
    max_steps: int,
    outflow_x: float,
    v_min: float = 1e-9,
    stuck_steps: int = 50,
    record: bool = False,
):
    """RK4-integrate particles until they cross the outflow plane.

    The final step is linearly interpolated onto the plane.  Particles whose
    speed stays below ``v_min`` for ``stuck_steps`` consecutive steps, or that
    exhaust ``max_steps``, are flagged as not arrived.  Returns
    ``(end_points, arrived_mask, trajectories)``; trajectories are only kept
    when ``record`` is set.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    pos = np.array(starts, dtype=np.float64)
    n = len(pos)
    arrived = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    slow = np.zeros(n, dtype=np.int64)
    trajs = [[p.copy()] for p in pos] if record else None

    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = pos[idx]
        k1 = field.evaluate(p)
        k2 = field.evaluate(p + 0.5 * dt * k1)
        k3 = field.evaluate(p + 0.5 * dt * k2)
        k4 = field.evaluate(p + dt * k3)
        new = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

        speed = np.linalg.norm(k1, axis=1)
        slow[idx] = np.where(speed < v_min, slow[idx] + 1, 0)
        stuck = slow[idx] >= stuck_steps

        crossed = new[:, 0] >= outflow_x
        frac = np.ones(len(idx))
        cx = crossed & (new[:, 0] > p[:, 0])
        frac[cx] = (outflow_x - p[cx, 0]) / (new[cx, 0] - p[cx, 0])
        new = p + frac[:, None] * (new - p)

        pos[idx] = new
        if record:
            for local, gi in enumerate(idx):
                trajs[gi].append(new[local].copy())
        arrived[idx[crossed]] = True
        active[idx[crossed | stuck]] = False

    return pos, arrived, trajs


def advect(field: VelocityField, x0, dt: float, max_steps: int, outflow_x: float,
           v_min: float = 1e-9, stuck_steps: int = 50):
    """Single-particle trajectory; see :func:`advect_batch`."""
    start = np.asarray(x0, dtype=np.float64).reshape(1, 3)
    ends, ok, trajs = advect_batch(
        field, start, dt, max_steps, outflow_x, v_min=v_min, stuck_steps=stuck_steps,
        record=True,
    )
    return np.array(trajs[0]), bool(ok[0])


# --- convex hulls ------------------------------------------------------------------


def convex_hull_2d(points) -> tuple[np.ndarray, float]:
    """Monotone-chain hull and its perimeter.

    Collinear input degenerates to the two extreme points with perimeter
    twice the segment length (the out-and-back convention).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 points in the plane")
    uniq = np.unique(pts, axis=0)  # lexicographic sort

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def chain(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = chain(uniq)
    upper = chain(uniq[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        a, b = uniq[0], uniq[-1]
        length = float(np.linalg.norm(b - a))
        return np.array([a, b]), 2.0 * length
    closed = np.vstack([hull, hull[:1]])
    perimeter = float(np.linalg.norm(np.diff(closed, axis=0), axis=1).sum())
    return hull, perimeter


# --- objective ----------------------------------------------------------------------


def inflow_rectangles(spec: ChannelSpec, grid: tuple[int, int], central_fraction: float = 0.6):
    """(y, z) corner boxes subdividing the central band of the inflow."""
    n_y, n_z = grid
    o = spec.origin_array
    y_lo = o[1] + 0.5 * (1 - central_fraction) * spec.width
    z_lo = o[2] + 0.5 * (1 - central_fraction) * spec.height
    dy = central_fraction * spec.width / n_y
    dz = central_fraction * spec.height / n_z
    rects = []
    for j in range(n_y):
        for k in range(n_z):
            rects.append((y_lo + j * dy, z_lo + k * dz, dy, dz))
    return rects


def rectangle_perimeter_points(rect, count: int) -> np.ndarray:
    """``count`` points around the rectangle edge, corners included."""
    if count < 4 or count % 4:
        raise ValueError("particle count must be a positive multiple of 4")
    y, z, dy, dz = rect
    per_edge = count // 4
    t = np.arange(per_edge) / per_edge
    pts = []
    corners = np.array([[y, z], [y + dy, z], [y + dy, z + dz], [y, z + dz]])
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        pts.append(a[None, :] + t[:, None] * (b - a)[None, :])
    return np.concatenate(pts)


def mixing_objective(
    mesh: TriMesh | None,
    spec: ChannelSpec,
    grid: tuple[int, int] = (4, 3),
    particles_per_rect: int = 16,
    field: VelocityField | None = None,
    dt: float | None = None,
    max_steps: int = 6000,
    central_fraction: float = 0.6,
    sdf_grid_res: int = 32,
    phi_grid: SdfGrid | None = None,
    dump_dir=None,
) -> float:
    """Average relative hull-perimeter growth between inflow and outflow, negated.

    Rectangles whose particle sets lose too many members (stuck particles
    leave fewer than 3 arrivals) are skipped; if more than half of the
    rectangles are skipped the objective is considered unreliable.
    Deterministic: there is no randomness anywhere in the evaluation.
    """
    if field is None:
        field = surrogate_field(mesh, spec, phi_grid=phi_grid, grid_res=sdf_grid_res)
    if dt is None:
        mid_speed = 0.5 * spec.barrel_speed * math.cos(spec.barrel_angle)
        dt = spec.length / mid_speed / 400.0

    rects = inflow_rectangles(spec, grid, central_fraction)
    x0 = spec.origin[0]
    all_starts = []
    for rect in rects:
        yz = rectangle_perimeter_points(rect, particles_per_rect)
        starts = np.column_stack([np.full(len(yz), x0), yz])
        all_starts.append(starts)
    starts = np.concatenate(all_starts)

    record = dump_dir is not None
    ends, ok, trajs = advect_batch(
        field, starts, dt, max_steps, spec.outflow_x, record=record,
    )
    if record:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for i, traj in enumerate(trajs):
            rows = ["t,x,y,z"] + [
                f"{s * dt:.9g},{p[0]:.9g},{p[1]:.9g},{p[2]:.9g}"
                for s, p in enumerate(traj)
            ]
            (dump_dir / f"particle_{i:04d}.csv").write_text("\n".join(rows) + "\n")

    terms = []
    skipped = 0
    for r, rect in enumerate(rects):
        sl = slice(r * particles_per_rect, (r + 1) * particles_per_rect)
        valid = ok[sl]
        if valid.sum() < 3:
            skipped += 1
            continue
        _, p_in = convex_hull_2d(starts[sl][:, 1:])
        _, p_out = convex_hull_2d(ends[sl][valid][:, 1:])
        terms.append((p_out - p_in) / p_in)
    if skipped > 0.5 * len(rects):
        raise ObjectiveError(
            f"objective unreliable: {skipped}/{len(rects)} rectangles lost their particles"
        )
    return -float(np.mean(terms))
