"""Bound-constrained derivative-free global minimization.

Two algorithms share the bounds/report machinery: a deterministic
dividing-rectangles search (trisection of a normalized unit cube, splitting
the "potentially optimal" cells found on the lower convex hull of cell size
versus center value) and a seeded real-coded genetic algorithm with
tournament selection, blend crossover, perturb-or-reinitialize mutation and
single-survivor elitism.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# minimum relative improvement a cell's lower bound must promise over the
# incumbent before it counts as potentially optimal, measured against the
# observed objective range so that affine rescaling of f cannot change the
# selected cells
DIRECT_EPS = 1e-4


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=np.float64))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower and upper must be 1D arrays of equal length")
        if not np.all(self.lower < self.upper):
            raise ValueError("every lower bound must be strictly below its upper bound")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        return self.lower + unit * (self.upper - self.lower)

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


@dataclass
class HyperRect:
    center: np.ndarray      # unit-cube coordinates
    levels: np.ndarray      # per-dimension trisection counts; side = 3**-level
    f_center: float

    @property
    def sides(self) -> np.ndarray:
        return 3.0 ** (-self.levels.astype(np.float64))

    @property
    def size(self) -> float:
        """Half-diagonal, the classic cell size measure."""
        return 0.5 * float(np.linalg.norm(self.sides))

    @property
    def volume(self) -> float:
        return float(3.0 ** (-int(self.levels.sum())))


@dataclass
class Genome:
    genes: np.ndarray
    fitness: float


@dataclass
class RunReport:
    best_x: np.ndarray | None = None
    best_f: float = math.inf
    n_evals: int = 0
    n_iters: int = 0
    reason: str = ""
    evaluations: list[tuple[np.ndarray, float]] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)

    def record(self, x: np.ndarray, f: float) -> None:
        self.evaluations.append((np.array(x, dtype=np.float64), float(f)))
        self.n_evals += 1
        if f < self.best_f:
            self.best_f = float(f)
            self.best_x = np.array(x, dtype=np.float64)

    def close_iteration(self) -> None:
        self.n_iters += 1
        self.best_history.append(self.best_f)


def write_eval_log(report: RunReport, path) -> None:
    """CSV of ``eval_index, x_1..x_n, f``."""
    dim = len(report.evaluations[0][0]) if report.evaluations else 0
    lines = ["eval_index," + ",".join(f"x_{i + 1}" for i in range(dim)) + ",f"]
    for i, (x, f) in enumerate(report.evaluations):
        lines.append(f"{i}," + ",".join(f"{v:.12g}" for v in x) + f",{f:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(report: RunReport, path, log_path=None) -> None:
    lines = [
        f"best_f = {report.best_f:.12g}",
        "best_x = " + " ".join(f"{v:.12g}" for v in (report.best_x if report.best_x is not None else [])),
        f"n_evals = {report.n_evals}",
        f"n_iters = {report.n_iters}",
        f"termination = {report.reason}",
    ]
    if log_path is not None:
        lines.append(f"eval_log = {log_path}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- termination ----------------------------------------------------------------


@dataclass
class TerminationCriteria:
    max_iters: int = 1000          # paper default
    max_evals: int | None = None
    stall_window: int = 20
    stall_rel_tol: float | None = None


def check_termination(report: RunReport, criteria: TerminationCriteria) -> str | None:
    """First satisfied criterion, or None to continue."""
    if report.n_iters >= criteria.max_iters:
        return "max_iters"
    if criteria.max_evals is not None and report.n_evals >= criteria.max_evals:
        return "max_evals"
    if criteria.stall_rel_tol is not None and len(report.best_history) > criteria.stall_window:
        prev = report.best_history[-criteria.stall_window - 1]
        cur = report.best_history[-1]
        scale = max(abs(prev), 1e-300)
        if (prev - cur) / scale < criteria.stall_rel_tol:
            return "stalled"
    return None


def _guard(f):
    """Map non-finite objective values to +inf so optimization survives them."""

    def wrapped(x: np.ndarray) -> float:
        val = float(f(x))
        if not math.isfinite(val):
            log.warning("non-finite objective value at %s; treated as +inf", x)
            return math.inf
        return val

    return wrapped


# --- DIRECT ----------------------------------------------------------------------


def _potentially_optimal(rects: list[HyperRect], f_min: float, f_range: float) -> list[int]:
    """Indices of cells on the lower convex hull of (size, f) with the
    epsilon improvement condition."""
    sizes = np.array([r.size for r in rects])
    fvals = np.array([r.f_center for r in rects])
    # group by size level signature to avoid float comparisons
    keys = [tuple(sorted(r.levels.tolist())) for r in rects]
    distinct: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        distinct.setdefault(k, []).append(i)

    if not math.isfinite(f_min):
        # nothing evaluable yet; keep exploring from the largest cells
        top = sizes.max()
        return [i for i in range(len(rects)) if sizes[i] == top]

    selected: list[int] = []
    for key, members in distinct.items():
        d_j = sizes[members[0]]
        f_j = fvals[members].min()
        if not math.isfinite(f_j):
            continue
        smaller = sizes < d_j - 1e-15
        larger = sizes > d_j + 1e-15
        with np.errstate(invalid="ignore"):
            left = ((f_j - fvals[smaller]) / (d_j - sizes[smaller])).max() if smaller.any() else -math.inf
            right = ((fvals[larger] - f_j) / (sizes[larger] - d_j)).min() if larger.any() else math.inf
        if left > right + 1e-12:
            continue
        if larger.any() and math.isfinite(right):
            # lower bound at zero size must undercut the incumbent by a
            # range-relative margin
            if f_j - right * d_j > f_min - DIRECT_EPS * f_range + 1e-15:
                continue
        selected += [i for i in members if fvals[i] == f_j]
    return selected


def direct_minimize(
    f,
    bounds: Bounds,
    max_evals: int | None = None,
    max_iters: int = 1000,
    tol: float | None = None,
    observer=None,
) -> RunReport:
    """Deterministic dividing-rectangles minimization over a box.

    The first evaluation is the exact box center.  Each iteration splits
    every potentially optimal cell into thirds along all of its longest
    dimensions, ordered by the better child value, so the cells always
    partition the unit cube exactly.
    """
    if max_evals is not None and max_evals < 1:
        raise ValueError("max_evals must be at least 1")
    dim = bounds.dim
    fn = _guard(f)
    report = RunReport()
    criteria = TerminationCriteria(max_iters=max_iters, max_evals=max_evals,
                                   stall_rel_tol=tol)

    def evaluate(unit: np.ndarray) -> float:
        x = bounds.denormalize(unit)
        val = fn(x)
        report.record(x, val)
        return val

    center = np.full(dim, 0.5)
    rects = [HyperRect(center, np.zeros(dim, dtype=np.int64), evaluate(center))]

    reason = None
    while reason is None:
        finite = [r.f_center for r in rects if math.isfinite(r.f_center)]
        f_min = min(finite) if finite else math.inf
        f_range = (max(finite) - f_min) if finite else 0.0
        chosen = _potentially_optimal(rects, f_min, f_range)
        if not chosen:
            reason = "no_potentially_optimal_cells"
            break

        new_rects: list[HyperRect] = []
        split_ids: set[int] = set()
        for ridx in sorted(chosen, key=lambda i: -rects[i].size):
            rect = rects[ridx]
            min_level = rect.levels.min()
            dims = np.nonzero(rect.levels == min_level)[0]
            need = 2 * len(dims)
            if max_evals is not None and report.n_evals + need > max_evals:
                reason = "max_evals"
                break
            delta = 3.0 ** (-(min_level + 1.0))
            children: list[tuple[float, int, HyperRect, HyperRect]] = []
            for d in dims:
                lo_c = rect.center.copy()
                hi_c = rect.center.copy()
                lo_c[d] -= delta
                hi_c[d] += delta
                f_lo = evaluate(lo_c)
                f_hi = evaluate(hi_c)
                children.append(
                    (min(f_lo, f_hi), int(d),
                     HyperRect(lo_c, rect.levels.copy(), f_lo),
                     HyperRect(hi_c, rect.levels.copy(), f_hi))
                )
            split_ids.add(ridx)
            levels = rect.levels.copy()
            children.sort(key=lambda c: (c[0], c[1]))
            for _, d, lo_r, hi_r in children:
                levels[d] += 1
                lo_r.levels = levels.copy()
                hi_r.levels = levels.copy()
                new_rects += [lo_r, hi_r]
            new_rects.append(HyperRect(rect.center, levels, rect.f_center))

        rects = [r for i, r in enumerate(rects) if i not in split_ids] + new_rects
        report.close_iteration()
        if observer is not None:
            observer(report.n_iters, rects, report)
        if reason is None:
            reason = check_termination(report, criteria)

    report.reason = reason or "max_iters"
    return report


def partition_volume(rects) -> float:
    """Total unit-cube volume covered by a cell list (invariant: 1)."""
    return float(sum(r.volume for r in rects))


# --- SOGA -------------------------------------------------------------------------


def soga_minimize(
    f,
    bounds: Bounds,
    pop_size: int = 50,
    max_iters: int = 1000,
    mutation_rate: float = 0.1,
    crossover_rate: float = 0.9,
    seed: int = 0,
    tournament_size: int = 2,
    blend_alpha: float = 0.5,
    perturb_sigma: float = 0.1,
    max_evals: int | None = None,
    tol: float | None = None,
) -> RunReport:
    """Single-objective genetic algorithm with elitism of one.

    Parents come from tournament selection, recombination is blend (BLX-alpha)
    crossover, and mutation either Gaussian-perturbs a gene (sigma as a
    fraction of the bound range, clipped) or re-initializes it uniformly,
    with equal probability.  Deterministic for a fixed seed.
    """
    if pop_size < 2:
        raise ValueError("population size must be at least 2")
    rng = np.random.default_rng(seed)
    fn = _guard(f)
    report = RunReport()
    criteria = TerminationCriteria(max_iters=max_iters, max_evals=max_evals,
                                   stall_rel_tol=tol)
    span = bounds.upper - bounds.lower

    def evaluate(genes: np.ndarray) -> Genome:
        val = fn(genes)
        report.record(genes, val)
        return Genome(genes, val)

    pop = [evaluate(bounds.denormalize(rng.random(bounds.dim))) for _ in range(pop_size)]

    def tournament() -> Genome:
        picks = rng.integers(0, pop_size, size=tournament_size)
        return min((pop[i] for i in picks), key=lambda g: g.fitness)

    reason = None
    while reason is None:
        elite = min(pop, key=lambda g: g.fitness)
        offspring_genes: list[np.ndarray] = []
        while len(offspring_genes) < pop_size - 1:
            p1, p2 = tournament().genes, tournament().genes
            if rng.random() < crossover_rate:
                lo = np.minimum(p1, p2)
                hi = np.maximum(p1, p2)
                width = hi - lo
                c1 = rng.uniform(lo - blend_alpha * width, hi + blend_alpha * width)
                c2 = rng.uniform(lo - blend_alpha * width, hi + blend_alpha * width)
            else:
                c1, c2 = p1.copy(), p2.copy()
            for child in (c1, c2):
                mutate = rng.random(bounds.dim) < mutation_rate
                if mutate.any():
                    reinit = rng.random(bounds.dim) < 0.5
                    noise = rng.normal(0.0, perturb_sigma * span)
                    fresh = bounds.denormalize(rng.random(bounds.dim))
                    child[mutate & ~reinit] += noise[mutate & ~reinit]
                    child[mutate & reinit] = fresh[mutate & reinit]
                offspring_genes.append(bounds.clip(child))
        pop = [Genome(elite.genes.copy(), elite.fitness)] + [
            evaluate(g) for g in offspring_genes[: pop_size - 1]
        ]
        report.close_iteration()
        reason = check_termination(report, criteria)

    report.reason = reason
    return report
