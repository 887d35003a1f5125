"""B-spline basis evaluation, trivariate spline volumes and free-form deformation.

The lattice constructors place control points at the Greville abscissae of a
clamped knot vector, so the undeformed volume reproduces the identity map on
its bounding box exactly.  Deforming the control grid and re-evaluating the
volume at the (affinely inverted) parametric coordinates of embedded mesh
vertices yields the free-form deformation used to build shape corpora.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriMesh


class DomainError(ValueError):
    """Parametric coordinate outside the knot range."""


class LatticeError(ValueError):
    pass


# --- knot vectors and basis functions --------------------------------------


@dataclass(frozen=True)
class KnotVector:
    degree: int
    knots: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=np.float64))
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if self.knots.ndim != 1 or self.knots.size < 2 * (self.degree + 1):
            raise ValueError("need at least 2*(degree+1) knots")
        if np.any(np.diff(self.knots) < 0):
            raise ValueError("knots must be non-decreasing")

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def is_clamped(self) -> bool:
        p = self.degree
        k = self.knots
        return bool(np.all(k[: p + 1] == k[0]) and np.all(k[-(p + 1):] == k[-1]))

    def greville(self) -> np.ndarray:
        """Knot averages; control values placed here reproduce linear maps."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        return np.array([self.knots[i + 1: i + p + 1].mean() for i in range(self.n_basis)])


def clamped_uniform_knots(n_basis: int, degree: int, lo: float = 0.0, hi: float = 1.0) -> KnotVector:
    if n_basis < degree + 1:
        raise ValueError("need at least degree+1 control points")
    interior = np.linspace(lo, hi, n_basis - degree + 1)[1:-1]
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return KnotVector(degree, knots)


def basis_functions(kv: KnotVector, u: float) -> np.ndarray:
    """All ``n_basis`` B-spline basis values at ``u`` by the Cox-de Boor recursion.

    Values are non-negative and sum to one anywhere inside the knot range.
    A parameter outside the range raises :class:`DomainError`.
    """
    t = kv.knots
    u = float(u)
    if u < t[0] or u > t[-1]:
        raise DomainError(f"parameter {u} outside knot range [{t[0]}, {t[-1]}]")
    # degree-0 indicators over half-open spans; the final span is closed on
    # the right so the last basis interpolates at the end of a clamped vector
    n0 = t.size - 1
    level = np.zeros(n0)
    if u >= t[-1]:
        nonempty = np.nonzero(t[:-1] < t[1:])[0]
        level[nonempty[-1]] = 1.0
    else:
        level[(t[:-1] <= u) & (u < t[1:])] = 1.0
    for r in range(1, kv.degree + 1):
        nxt = np.zeros(n0 - r)
        for i in range(n0 - r):
            left_den = t[i + r] - t[i]
            right_den = t[i + r + 1] - t[i + 1]
            acc = 0.0
            if left_den > 0.0 and level[i] != 0.0:
                acc += (u - t[i]) / left_den * level[i]
            if right_den > 0.0 and level[i + 1] != 0.0:
                acc += (t[i + r + 1] - u) / right_den * level[i + 1]
            nxt[i] = acc
        level = nxt
    return level


def basis_matrix(kv: KnotVector, us: np.ndarray) -> np.ndarray:
    """Basis values for an array of parameters, shape ``(len(us), n_basis)``.

    Vectorized span-local evaluation; agrees with :func:`basis_functions`
    row by row.
    """
    t = kv.knots
    p = kv.degree
    us = np.asarray(us, dtype=np.float64).ravel()
    if us.size and (us.min() < t[0] or us.max() > t[-1]):
        bad = int(np.argmax((us < t[0]) | (us > t[-1])))
        raise DomainError(f"parameter {us[bad]} outside knot range [{t[0]}, {t[-1]}]")
    span = np.searchsorted(t, us, side="right") - 1
    span = np.clip(span, p, kv.n_basis - 1)
    # shrink spans that are empty (repeated interior knots, or u at the end)
    while True:
        empty = (t[span + 1] - t[span]) <= 0.0
        if not np.any(empty):
            break
        span[empty] -= 1

    n = us.size
    vals = np.zeros((n, p + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, p + 1):
        left[:, j] = us - t[span + 1 - j]
        right[:, j] = t[span + j] - us
        saved = np.zeros(n)
        for r in range(j):
            den = right[:, r + 1] + left[:, j - r]
            term = np.where(den > 0.0, vals[:, r] / np.where(den > 0.0, den, 1.0), 0.0)
            vals[:, r] = saved + right[:, r + 1] * term
            saved = left[:, j - r] * term
        vals[:, j] = saved

    out = np.zeros((n, kv.n_basis))
    cols = span[:, None] - p + np.arange(p + 1)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out


# --- trivariate lattices ----------------------------------------------------


@dataclass
class ControlLattice:
    points: np.ndarray  # (n_u, n_v, n_w, 3)
    knots_u: KnotVector
    knots_v: KnotVector
    knots_w: KnotVector

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 4 or self.points.shape[3] != 3:
            raise LatticeError("points must have shape (n_u, n_v, n_w, 3)")
        for axis, kv in enumerate((self.knots_u, self.knots_v, self.knots_w)):
            if self.points.shape[axis] != kv.n_basis:
                raise LatticeError(
                    f"axis {axis}: {self.points.shape[axis]} control points "
                    f"vs {kv.n_basis} basis functions"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.points.shape[:3]

    def copy(self) -> "ControlLattice":
        return ControlLattice(self.points.copy(), self.knots_u, self.knots_v, self.knots_w)

    def same_layout(self, other: "ControlLattice") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.knots_u.knots, other.knots_u.knots)
            and np.array_equal(self.knots_v.knots, other.knots_v.knots)
            and np.array_equal(self.knots_w.knots, other.knots_w.knots)
            and (self.knots_u.degree, self.knots_v.degree, self.knots_w.degree)
            == (other.knots_u.degree, other.knots_v.degree, other.knots_w.degree)
        )

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.points.reshape(-1, 3)
        return pts.min(axis=0), pts.max(axis=0)


def bounding_lattice(
    mesh_or_bounds,
    dims: tuple[int, int, int] = (4, 4, 4),
    degrees: tuple[int, int, int] = (2, 2, 2),
    inflate: float = 0.01,
) -> ControlLattice:
    """Axis-aligned lattice around a mesh (or an explicit ``(lo, hi)`` box).

    Control points sit at the tensor-product Greville abscissae of clamped
    uniform knot vectors over the inflated bounding box, which makes the
    undeformed volume evaluate to the identity map on the box.
    """
    if isinstance(mesh_or_bounds, TriMesh):
        lo, hi = mesh_or_bounds.bounds()
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in mesh_or_bounds)
    span = hi - lo
    if np.any(span <= 0):
        raise LatticeError("degenerate bounding box")
    lo = lo - 0.5 * inflate * span
    hi = hi + 0.5 * inflate * span

    kvs = [clamped_uniform_knots(dims[d], degrees[d]) for d in range(3)]
    gu, gv, gw = (kv.greville() for kv in kvs)
    pts = np.zeros((dims[0], dims[1], dims[2], 3))
    pts[..., 0] = lo[0] + (hi[0] - lo[0]) * gu[:, None, None]
    pts[..., 1] = lo[1] + (hi[1] - lo[1]) * gv[None, :, None]
    pts[..., 2] = lo[2] + (hi[2] - lo[2]) * gw[None, None, :]
    return ControlLattice(pts, *kvs)


def evaluate_volume(lat: ControlLattice, xi) -> np.ndarray:
    """Evaluate the tensor-product spline volume at parametric points.

    ``xi`` is a single ``(3,)`` triple or an ``(n, 3)`` array in knot-range
    coordinates; returns the mapped physical point(s).
    """
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    bu = basis_matrix(lat.knots_u, xi[:, 0])
    bv = basis_matrix(lat.knots_v, xi[:, 1])
    bw = basis_matrix(lat.knots_w, xi[:, 2])
    out = np.einsum("pi,pj,pk,ijkd->pd", bu, bv, bw, lat.points, optimize=True)
    return out[0] if single else out


def ffd_apply(undeformed: ControlLattice, deformed: ControlLattice, mesh: TriMesh) -> TriMesh:
    """Map mesh vertices through the deformation of an embedding lattice.

    Parametric coordinates come from affine inversion of the undeformed
    lattice's axis-aligned box (exact because the lattice is Greville-regular),
    then the deformed volume is evaluated there.  Connectivity is unchanged.
    """
    if not undeformed.same_layout(deformed):
        raise LatticeError("undeformed and deformed lattices differ in layout")
    lo, hi = undeformed.box()
    span = hi - lo
    xi = (mesh.vertices - lo) / span
    eps = 1e-12
    bad = np.nonzero(np.any((xi < -eps) | (xi > 1 + eps), axis=1))[0]
    if bad.size:
        raise LatticeError(f"vertex {int(bad[0])} lies outside the lattice box")
    xi = np.clip(xi, 0.0, 1.0)
    # scale unit coordinates into each knot domain
    for d, kv in enumerate((undeformed.knots_u, undeformed.knots_v, undeformed.knots_w)):
        a, b = kv.domain
        xi[:, d] = a + (b - a) * xi[:, d]
    return TriMesh(evaluate_volume(deformed, xi), mesh.triangles.copy())


# --- deformation recipes ----------------------------------------------------

# Each recipe maps (lattice, magnitude) -> deformed copy.  Bounds keep the
# control layers from crossing each other (inverted geometry).
RECIPE_BOUNDS: dict[str, tuple[float, float]] = {
    "shrink_x": (0.2, 5.0),          # scale factor on x offsets
    "translate_top_x": (-0.6, 0.6),  # fraction of the lattice x extent
    "translate_top_y": (-0.6, 0.6),  # fraction of the lattice y extent
    "expand_middle": (-0.5, 3.0),    # radial growth, factor (1 + m)
    "expand_top": (-0.5, 3.0),       # radial growth, factor (1 + m)
    "twist_top": (-math.pi, math.pi),  # rotation of the top layer, radians
}

RECIPE_NAMES = tuple(RECIPE_BOUNDS)


def _xy_axis(points: np.ndarray) -> np.ndarray:
    """Vertical axis location: centroid of the control points in x, y."""
    return points.reshape(-1, 3)[:, :2].mean(axis=0)


def _middle_layers(n_w: int) -> list[int]:
    if n_w % 2 == 0:
        return [n_w // 2 - 1, n_w // 2]
    return [n_w // 2]


def apply_recipe(name: str, magnitude: float, lat: ControlLattice) -> ControlLattice:
    """Return a deformed copy of ``lat``; the input lattice is not modified."""
    if name not in RECIPE_BOUNDS:
        raise KeyError(f"unknown recipe {name!r}; choose from {RECIPE_NAMES}")
    lo, hi = RECIPE_BOUNDS[name]
    m = float(magnitude)
    if not lo <= m <= hi:
        raise ValueError(f"{name}: magnitude {m} outside bounds [{lo}, {hi}]")

    out = lat.copy()
    pts = out.points
    n_w = pts.shape[2]

    if name == "shrink_x":
        cx = pts[..., 0].mean()
        pts[..., 0] = cx + m * (pts[..., 0] - cx)
    elif name == "translate_top_x":
        extent = pts[..., 0].max() - pts[..., 0].min()
        pts[:, :, -1, 0] += m * extent
    elif name == "translate_top_y":
        extent = pts[..., 1].max() - pts[..., 1].min()
        pts[:, :, -1, 1] += m * extent
    elif name == "expand_middle":
        c = _xy_axis(lat.points)
        for k in _middle_layers(n_w):
            pts[:, :, k, :2] = c + (1.0 + m) * (pts[:, :, k, :2] - c)
    elif name == "expand_top":
        c = _xy_axis(lat.points)
        pts[:, :, -1, :2] = c + (1.0 + m) * (pts[:, :, -1, :2] - c)
    elif name == "twist_top":
        c = _xy_axis(lat.points)
        for k in range(n_w):
            angle = m * (k / (n_w - 1)) ** 2 if n_w > 1 else m
            ca, sa = math.cos(angle), math.sin(angle)
            rel = pts[:, :, k, :2] - c
            pts[:, :, k, 0] = c[0] + ca * rel[..., 0] - sa * rel[..., 1]
            pts[:, :, k, 1] = c[1] + sa * rel[..., 0] + ca * rel[..., 1]
    return out


def apply_chain(chain, lat: ControlLattice) -> ControlLattice:
    """Apply ``(name, magnitude)`` pairs in order."""
    out = lat
    for name, mag in chain:
        out = apply_recipe(name, mag, out)
    return out


# --- plain-text lattice files -----------------------------------------------


def write_lattice(lat: ControlLattice, path) -> None:
    """Key-value header plus a whitespace-separated control point table.

    Points are listed in (i, j, k) lexicographic order, k fastest.
    """
    n_u, n_v, n_w = lat.dims
    lines = [
        f"dims = {n_u} {n_v} {n_w}",
        f"degrees = {lat.knots_u.degree} {lat.knots_v.degree} {lat.knots_w.degree}",
        "knots_u = " + " ".join(f"{k:.17g}" for k in lat.knots_u.knots),
        "knots_v = " + " ".join(f"{k:.17g}" for k in lat.knots_v.knots),
        "knots_w = " + " ".join(f"{k:.17g}" for k in lat.knots_w.knots),
        "points =",
    ]
    for p in lat.points.reshape(-1, 3):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_lattice(path) -> ControlLattice:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    in_points = False
    for ln in lines:
        if in_points:
            rows.append([float(x) for x in ln.split()])
        elif ln.startswith("points"):
            in_points = True
        else:
            key, _, value = ln.partition("=")
            header[key.strip()] = value.strip()
    try:
        dims = tuple(int(x) for x in header["dims"].split())
        degrees = tuple(int(x) for x in header["degrees"].split())
        kvs = [
            KnotVector(degrees[i], np.array([float(x) for x in header[f"knots_{ax}"].split()]))
            for i, ax in enumerate("uvw")
        ]
    except KeyError as exc:
        raise LatticeError(f"lattice file missing key {exc}") from exc
    pts = np.array(rows, dtype=np.float64).reshape(dims[0], dims[1], dims[2], 3)
    return ControlLattice(pts, *kvs)
