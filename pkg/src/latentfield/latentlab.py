"""Latent-space diagnostics: interpolation, code arithmetic and t-SNE maps.

The t-SNE here is the plain exact variant: Gaussian input affinities with a
per-point bandwidth found by binary search on the entropy, Student-t output
affinities, and momentum gradient descent on the KL divergence with an early
exaggeration phase.  Corpora stay small enough that no tree approximation is
needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def interpolate(z_a, z_b, N: int, n: int) -> np.ndarray:
    """Point ``n`` of ``N`` intermediate codes between two endpoints.

    Evaluates ``z_a + (z_b - z_a) / (N + 1) * n``; the ends ``n = 0`` and
    ``n = N + 1`` return the inputs bit-exactly.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"latent dimensions differ: {z_a.shape} vs {z_b.shape}")
    if not 0 <= n <= N + 1:
        raise ValueError(f"index n={n} outside [0, {N + 1}]")
    if n == 0:
        return z_a.copy()
    if n == N + 1:
        return z_b.copy()
    return z_a + (z_b - z_a) / (N + 1) * n


def arithmetic(z_deformed, z_base, z_target) -> np.ndarray:
    """Transfer the feature ``z_deformed - z_base`` onto ``z_target``."""
    z_deformed, z_base, z_target = (
        np.asarray(z, dtype=np.float64) for z in (z_deformed, z_base, z_target)
    )
    if not z_deformed.shape == z_base.shape == z_target.shape:
        raise ValueError("latent dimensions differ")
    return z_deformed - z_base + z_target


# --- t-SNE --------------------------------------------------------------------


@dataclass
class Embedding2D:
    points: np.ndarray  # (n, 2)
    labels: list[str]


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d2 = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def conditional_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-7,
                           max_iter: int = 200):
    """Row-stochastic Gaussian affinities with per-row entropy log(perplexity).

    Returns ``(P, betas)`` where ``P[i]`` is the conditional distribution of
    row ``i`` (zero diagonal) and ``betas`` the fitted precisions.
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros_like(d2)
    betas = np.ones(n)
    for i in range(n):
        di = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        w = np.exp(-di * beta)
        for _ in range(max_iter):
            s = w.sum()
            h = np.log(s) + beta * (di * w).sum() / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else 0.5 * (beta + lo)
            w = np.exp(-di * beta)
        row = w / w.sum()
        P[i, :i] = row[:i]
        P[i, i + 1:] = row[i:]
        betas[i] = beta
    return P, betas


def joint_affinities(d2: np.ndarray, perplexity: float):
    cond, betas = conditional_affinities(d2, perplexity)
    n = d2.shape[0]
    P = (cond + cond.T) / (2.0 * n)
    return P, betas


def tsne_embed(
    latents,
    perplexity: float = 30.0,
    iters: int = 1000,
    seed: int = 0,
    labels=None,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    momentum: tuple[float, float] = (0.5, 0.8),
    full_output: bool = False,
):
    """Two-dimensional t-SNE embedding of a set of latent codes.

    Deterministic for a fixed seed.  With ``full_output`` the joint affinity
    matrix, fitted bandwidths and per-iteration KL values are returned
    alongside the embedding.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("latents must be an (n, dim) array")
    n = len(x)
    if n < 3 or len(np.unique(x, axis=0)) < 3:
        raise ValueError("need at least 3 distinct points")
    if perplexity >= n:
        raise ValueError(f"perplexity {perplexity} must be below the point count {n}")
    if labels is None:
        labels = [str(i) for i in range(n)]

    rng = np.random.default_rng(seed)
    d2 = _pairwise_sq_dists(x)
    off = ~np.eye(n, dtype=bool)
    if d2[off].min() == 0.0:
        log.warning("duplicate latent codes; applying epsilon jitter")
        x = x + 1e-8 * rng.standard_normal(x.shape)
        d2 = _pairwise_sq_dists(x)

    P, betas = joint_affinities(d2, perplexity)
    P = np.maximum(P, 1e-300)
    np.fill_diagonal(P, 0.0)

    y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    kl_history = np.zeros(iters)
    for it in range(iters):
        num = 1.0 / (1.0 + _pairwise_sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        q = np.maximum(q, 1e-300)

        p_eff = P * early_exaggeration if it < exaggeration_iters else P
        pq = (p_eff - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)

        mom = momentum[0] if it < exaggeration_iters else momentum[1]
        update = mom * update - learning_rate * grad
        y = y + update
        y = y - y.mean(axis=0)
        kl_history[it] = float((P[off] * np.log(P[off] / q[off])).sum())

    emb = Embedding2D(points=y, labels=list(labels))
    if full_output:
        return emb, {"P": P, "betas": betas, "kl": kl_history, "d2": d2}
    return emb


# --- embedding files ------------------------------------------------------------


def write_embedding_csv(emb: Embedding2D, ids, path) -> None:
    """Rows of ``id, base_label, x, y``."""
    lines = ["id,base_label,x,y"]
    for sid, label, (px, py) in zip(ids, emb.labels, emb.points):
        lines.append(f"{sid},{label},{px:.10g},{py:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_gnuplot_script(csv_path, script_path) -> None:
    """Companion gnuplot script for a label-colored scatter of the embedding."""
    csv_name = Path(csv_path).name
    text = f"""# scatter plot of the 2D latent embedding, colored per base shape
set datafile separator ','
set key outside
set xlabel 'component 1'
set ylabel 'component 2'
labels = system("tail -n +2 {csv_name} | cut -d, -f2 | sort -u")
plot for [lab in labels] '{csv_name}' \\
    using (strcol(2) eq lab ? $3 : NaN):4 with points pt 7 ps 1.2 title lab
"""
    Path(script_path).write_text(text)
