"""Auto-decoder for latent signed-distance fields.

A feed-forward network maps a latent code concatenated with a query location
to a signed-distance value: eight rectified hidden layers of fixed width and
a single tanh output neuron.  Training jointly optimizes the network weights
and one free latent code per shape with separate step-decayed learning-rate
schedules, using a clamped-L1 reconstruction loss plus a quadratic latent
regularizer.  Everything runs on plain numpy arrays; gradients are exact
backpropagation (finite-difference checked in the test suite).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriMesh
from .meshops import SdfGrid, largest_component, marching_cubes, read_sdf_samples, scale_to_volume

MODEL_MAGIC = b"ADEC"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS_DIV = 1e-8


class TrainingError(RuntimeError):
    pass


class DegenerateLatentError(RuntimeError):
    """The decoded field has no zero crossing inside the sampling cube."""


@dataclass
class DecoderConfig:
    latent_dim: int = 4
    hidden_layers: int = 8
    hidden_width: int = 256
    clamp: float = 0.1
    latent_reg_weight: float | None = None  # None -> 1e-4 / latent_dim
    dtype: str = "float64"

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("network dimensions must be positive")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")

    @property
    def reg_weight(self) -> float:
        if self.latent_reg_weight is None:
            return 1e-4 / self.latent_dim
        return self.latent_reg_weight

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def layer_sizes(self) -> list[int]:
        return [self.latent_dim + 3] + [self.hidden_width] * self.hidden_layers + [1]


@dataclass
class DecoderModel:
    config: DecoderConfig
    weights: list[np.ndarray]  # per layer, shape (n_in, n_out)
    biases: list[np.ndarray]   # per layer, shape (n_out,)
    shape_ids: list[str]
    latent_codes: np.ndarray   # (n_shapes, latent_dim)

    def __post_init__(self):
        sizes = self.config.layer_sizes()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i}: shape {w.shape} does not match {sizes[i:i+2]}")
        if self.latent_codes.shape != (len(self.shape_ids), self.config.latent_dim):
            raise ValueError("latent code table does not match shape ids")

    def code(self, shape_id: str) -> np.ndarray:
        try:
            return self.latent_codes[self.shape_ids.index(shape_id)]
        except ValueError:
            raise KeyError(f"no latent code for shape {shape_id!r}") from None


def init_model(config: DecoderConfig, shape_ids, seed: int) -> DecoderModel:
    """He-initialized weights, zero biases, latent codes from N(0, 0.01^2)."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    sizes = config.layer_sizes()
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append((rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)).astype(dt))
        biases.append(np.zeros(n_out, dtype=dt))
    codes = (0.01 * rng.standard_normal((len(shape_ids), config.latent_dim))).astype(dt)
    return DecoderModel(config, weights, biases, list(shape_ids), codes)


# --- forward / backward -------------------------------------------------------


def _forward(model: DecoderModel, inputs: np.ndarray):
    """Activations for a (B, latent_dim + 3) input block."""
    pre = []
    acts = [inputs]
    h = inputs
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        u = h @ w + b
        pre.append(u)
        h = np.tanh(u) if i == last else np.maximum(u, 0.0)
        acts.append(h)
    return acts[-1][:, 0], pre, acts


def decode(model: DecoderModel, z, x) -> float:
    """Signed-distance prediction in (-1, 1) for one latent code and point."""
    z = np.asarray(z, dtype=model.config.np_dtype).ravel()
    x = np.asarray(x, dtype=model.config.np_dtype).ravel()
    if z.size != model.config.latent_dim:
        raise ValueError(f"latent code has {z.size} entries, expected {model.config.latent_dim}")
    if x.size != 3:
        raise ValueError("query point must have 3 coordinates")
    y, _, _ = _forward(model, np.concatenate([z, x])[None, :])
    return float(y[0])


def decode_batch(model: DecoderModel, z_rows: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Predictions for per-row latent codes ``(B, l)`` and points ``(B, 3)``."""
    dt = model.config.np_dtype
    inputs = np.hstack([np.asarray(z_rows, dtype=dt), np.asarray(points, dtype=dt)])
    y, _, _ = _forward(model, inputs)
    return y


def clamped_l1(pred, truth, delta: float):
    """Elementwise |clamp(pred) - clamp(truth)| with symmetric bound ``delta``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    p = np.clip(pred, -delta, delta)
    t = np.clip(truth, -delta, delta)
    return np.abs(p - t)


def batch_loss_and_grads(model: DecoderModel, z_rows, points, truth, reg_weight: float):
    """Mean clamped-L1 plus latent regularization, with exact gradients.

    Returns ``(loss, grad_weights, grad_biases, grad_z_rows)`` where the
    z-gradient is per batch row (callers scatter it onto the code table).
    """
    cfg = model.config
    dt = cfg.np_dtype
    z_rows = np.asarray(z_rows, dtype=dt)
    points = np.asarray(points, dtype=dt)
    truth = np.asarray(truth, dtype=dt)
    B = len(truth)
    delta = cfg.clamp

    inputs = np.hstack([z_rows, points])
    y, pre, acts = _forward(model, inputs)

    p = np.clip(y, -delta, delta)
    t = np.clip(truth, -delta, delta)
    data_loss = float(np.abs(p - t).mean())
    reg_loss = reg_weight * float((z_rows.astype(np.float64) ** 2).sum(axis=1).mean())
    loss = data_loss + reg_loss

    # d(mean |clamp(y)-clamp(t)|)/dy; zero where the prediction is clamped
    dy = (np.sign(p - t) * (np.abs(y) < delta)).astype(dt) / dt.type(B)

    last = len(model.weights) - 1
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.weights)
    du = (dy * (1.0 - acts[-1][:, 0] ** 2))[:, None]
    for i in range(last, -1, -1):
        grad_w[i] = acts[i].T @ du
        grad_b[i] = du.sum(axis=0)
        if i > 0:
            dh = du @ model.weights[i].T
            du = dh * (pre[i - 1] > 0)
    dinput = du @ model.weights[0].T
    grad_z = dinput[:, : cfg.latent_dim] + (2.0 * reg_weight / B) * z_rows
    return loss, grad_w, grad_b, grad_z


# --- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps_div: float = ADAM_EPS_DIV

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected update; mutates ``params`` and ``state`` in place.

    Raises on shape mismatch or non-finite gradients, naming the offender.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"layer {i}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"layer {i}: non-finite gradient")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps_div)
    return params, state


def lr_schedule(eps0: float, epoch: int) -> float:
    """Step decay: the initial rate is halved after every 500 epochs."""
    if epoch < 0:
        raise ValueError("epoch index must be non-negative")
    return eps0 * 0.5 ** (epoch // 500)


# --- training -----------------------------------------------------------------


@dataclass
class TrainHistory:
    mean_loss: list[float] = field(default_factory=list)
    lr_theta: list[float] = field(default_factory=list)
    lr_z: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.mean_loss)


def write_history_csv(history: TrainHistory, path) -> None:
    lines = ["epoch,lr_theta,lr_z,mean_loss"]
    for e, (lt, lz, ml) in enumerate(zip(history.lr_theta, history.lr_z, history.mean_loss)):
        lines.append(f"{e},{lt:.10g},{lz:.10g},{ml:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_training_data(manifest):
    """Concatenate every record's samples into flat point/distance/index arrays."""
    points, dists, sidx = [], [], []
    for i, rec in enumerate(manifest.records):
        path = manifest.resolve(rec.sdf_path)
        if not Path(path).exists():
            raise FileNotFoundError(f"missing sample file {path}")
        samples = read_sdf_samples(path)
        points.append(samples.points)
        dists.append(samples.distances)
        sidx.append(np.full(len(samples), i, dtype=np.int64))
    return np.concatenate(points), np.concatenate(dists), np.concatenate(sidx)


def train(
    manifest,
    cfg: DecoderConfig,
    epochs: int,
    batch: int = 4096,
    seed: int = 0,
    lr_theta: float = 5e-4,
    lr_z: float = 1e-3,
    steps_per_epoch: int | None = None,
) -> tuple[DecoderModel, TrainHistory]:
    """Jointly fit network weights and per-shape latent codes.

    Each epoch runs ``steps_per_epoch`` minibatches of uniformly sampled
    (shape, point) pairs (default: one full pass in expectation) with one
    ADAM update per minibatch; weights and codes keep separate ADAM states
    and step-decay schedules.  Deterministic for a fixed seed.
    """
    if not manifest.records:
        raise TrainingError("corpus is empty")
    if epochs < 1:
        raise TrainingError("need at least one epoch")
    points, dists, sidx = load_training_data(manifest)
    if steps_per_epoch is None:
        steps_per_epoch = max(1, int(np.ceil(len(points) / batch)))

    dt = cfg.np_dtype
    points = points.astype(dt)
    dists = dists.astype(dt)
    model = init_model(cfg, [r.id for r in manifest.records], seed)
    theta = model.weights + model.biases
    theta_state = AdamState.for_params(theta)
    z_state = AdamState.for_params([model.latent_codes])

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))
    history = TrainHistory()
    start = time.perf_counter()
    for epoch in range(epochs):
        eps_t = lr_schedule(lr_theta, epoch)
        eps_z = lr_schedule(lr_z, epoch)
        epoch_losses = []
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(points), size=batch)
            rows = sidx[idx]
            loss, gw, gb, gz_rows = batch_loss_and_grads(
                model, model.latent_codes[rows], points[idx], dists[idx], cfg.reg_weight
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            adam_step(theta, gw + gb, theta_state, eps_t)
            gz = np.zeros_like(model.latent_codes)
            np.add.at(gz, rows, gz_rows)
            adam_step([model.latent_codes], [gz], z_state, eps_z)
            epoch_losses.append(loss)
        history.mean_loss.append(float(np.mean(epoch_losses)))
        history.lr_theta.append(eps_t)
        history.lr_z.append(eps_z)
    history.wall_time = time.perf_counter() - start
    return model, history


# --- reconstruction -----------------------------------------------------------


def decode_grid(model: DecoderModel, z, resolution: int, extent: float = 1.0) -> SdfGrid:
    """Decode on a ``resolution^3`` grid over ``[-extent, extent]^3``."""
    z = np.asarray(z, dtype=model.config.np_dtype).ravel()
    xs = np.linspace(-extent, extent, resolution)
    pts = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.empty(len(pts))
    chunk = 65536
    for s in range(0, len(pts), chunk):
        block = pts[s: s + chunk]
        values[s: s + chunk] = decode_batch(model, np.tile(z, (len(block), 1)), block)
    spacing = xs[1] - xs[0]
    return SdfGrid(origin=(-extent,) * 3, spacing=(spacing,) * 3, values=values.reshape(resolution, resolution, resolution))


def reconstruct(
    model: DecoderModel,
    z,
    resolution: int = 64,
    target_volume: float | None = None,
) -> TriMesh:
    """Extract the zero isosurface of a latent code as a triangle mesh.

    Keeps the largest connected component; optionally rescales it to an exact
    target volume.  A field without sign change raises
    :class:`DegenerateLatentError`.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    grid = decode_grid(model, z, resolution)
    mesh = marching_cubes(grid)
    if not mesh.n_triangles:
        raise DegenerateLatentError("decoded field has uniform sign (empty isosurface)")
    mesh = largest_component(mesh)
    if target_volume is not None:
        mesh = scale_to_volume(mesh, target_volume)
    return mesh


# --- model files ----------------------------------------------------------------


def write_model(model: DecoderModel, path) -> None:
    """Binary little-endian: magic, latent dim, layer-size chain, float64
    weight blocks (row-major ``(n_in, n_out)`` then bias per layer), then the
    latent-code table keyed by shape id."""
    cfg = model.config
    sizes = cfg.layer_sizes()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", cfg.latent_dim, len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        fh.write(struct.pack("<d", cfg.clamp))
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(model.shape_ids)))
        for sid, code in zip(model.shape_ids, model.latent_codes):
            ident = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(np.ascontiguousarray(code, dtype="<f8").tobytes())


def read_model(path) -> DecoderModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a decoder model file")
    off = 4
    latent_dim, n_sizes = struct.unpack_from("<II", data, off)
    off += 8
    sizes = list(struct.unpack_from(f"<{n_sizes}I", data, off))
    off += 4 * n_sizes
    (clamp,) = struct.unpack_from("<d", data, off)
    off += 8
    cfg = DecoderConfig(
        latent_dim=latent_dim,
        hidden_layers=n_sizes - 2,
        hidden_width=sizes[1] if n_sizes > 2 else 1,
        clamp=clamp,
    )
    if sizes != cfg.layer_sizes():
        raise ValueError(f"{path}: unsupported layer-size chain {sizes}")
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_in, n_out)
        off += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=off)
        off += 8 * n_out
        weights.append(w.copy())
        biases.append(b.copy())
    (n_codes,) = struct.unpack_from("<I", data, off)
    off += 4
    shape_ids, codes = [], []
    for _ in range(n_codes):
        (idlen,) = struct.unpack_from("<I", data, off)
        off += 4
        shape_ids.append(data[off: off + idlen].decode("utf-8"))
        off += idlen
        codes.append(np.frombuffer(data, dtype="<f8", count=latent_dim, offset=off).copy())
        off += 8 * latent_dim
    table = np.array(codes).reshape(n_codes, latent_dim)
    return DecoderModel(cfg, weights, biases, shape_ids, table)
