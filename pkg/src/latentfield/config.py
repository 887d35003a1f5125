"""Flat ``section.key = value`` pipeline configuration.

Every numeric default of the pipeline lives in the table below; a config file
only needs the keys it overrides.  Unknown keys are rejected, and every run
writes its fully-resolved configuration next to its outputs so results can be
reproduced from the artifact alone.  The ``LF_SEED`` environment variable
overrides ``run.seed``.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

from .splinekit import RECIPE_NAMES
from .trainset import BASE_KINDS, DEFAULT_MAGNITUDES

_COMMA = "comma-separated"

# key -> (default, type); types: int, float, str, "floats", "strs"
DEFAULTS: dict[str, tuple] = {
    "run.seed": (0, int),

    "trainset.bases": (",".join(BASE_KINDS), "strs"),
    "trainset.recipes": (",".join(RECIPE_NAMES), "strs"),
    "trainset.chained": (0, int),
    "trainset.samples_per_shape": (20000, int),
    "trainset.height": (1.6, float),
    "trainset.radius": (0.7, float),
    "trainset.facets": (32, int),

    "decoder.latent_dim": (4, int),
    "decoder.hidden_layers": (8, int),
    "decoder.hidden_width": (256, int),
    "decoder.clamp": (0.1, float),
    "decoder.latent_reg": (-1.0, float),  # negative -> auto 1e-4 / latent_dim
    "decoder.dtype": ("float64", str),

    "training.epochs": (200, int),
    "training.batch": (4096, int),
    "training.steps_per_epoch": (0, int),  # 0 -> one full pass per epoch
    "training.lr_theta": (5e-4, float),
    "training.lr_z": (1e-3, float),

    "optimizer.max_iters": (1000, int),   # paper default
    "optimizer.max_evals": (150, int),
    "optimizer.stall_tol": (0.0, float),  # 0 -> disabled
    "optimizer.pop_size": (50, int),
    "optimizer.crossover_rate": (0.9, float),
    "optimizer.mutation_rate": (0.1, float),
    "optimizer.reconstruct_res": (36, int),
    "optimizer.top_k": (10, int),
    "optimizer.bounds_inflate": (0.1, float),

    "objective.channel_length": (0.0315, float),
    "objective.channel_width": (0.02405, float),
    "objective.channel_height": (0.0075, float),
    "objective.barrel_speed": (0.05, float),
    "objective.barrel_angle_deg": (15.0, float),
    "objective.element_volume": (1.0e-7, float),
    "objective.rect_grid_y": (4, int),
    "objective.rect_grid_z": (3, int),
    "objective.particles_per_rect": (16, int),
    "objective.dt": (0.0, float),         # 0 -> auto from transit time
    "objective.max_steps": (6000, int),
    "objective.sdf_grid_res": (32, int),

    "tsne.perplexity": (30.0, float),
    "tsne.iterations": (1000, int),
}
for _recipe, _mags in DEFAULT_MAGNITUDES.items():
    DEFAULTS[f"trainset.magnitudes.{_recipe}"] = (",".join(str(m) for m in _mags), "floats")


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    _, kind = DEFAULTS[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "strs":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    raise ConfigError(f"{key}: unknown value kind {kind!r}")


def default_config() -> dict:
    out = {}
    for key, (default, kind) in DEFAULTS.items():
        out[key] = _parse_value(key, str(default)) if kind in ("floats", "strs") else default
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with a config file; unknown keys are rejected."""
    cfg = default_config()
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, value.strip())
    env_seed = os.environ.get("LF_SEED")
    if env_seed is not None:
        try:
            cfg["run.seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"LF_SEED={env_seed!r} is not an integer") from exc
    return cfg


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def write_config(cfg: dict, path) -> None:
    lines = [f"{key} = {format_value(cfg[key])}" for key in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


# --- typed views ------------------------------------------------------------------


def corpus_config(cfg: dict):
    from .trainset import CorpusConfig

    recipes = cfg["trainset.recipes"]
    magnitudes = {r: cfg[f"trainset.magnitudes.{r}"] for r in recipes}
    return CorpusConfig(
        bases=cfg["trainset.bases"],
        recipes=recipes,
        magnitudes=magnitudes,
        chained=cfg["trainset.chained"],
        samples_per_shape=cfg["trainset.samples_per_shape"],
        seed=cfg["run.seed"],
        height=cfg["trainset.height"],
        radius=cfg["trainset.radius"],
        facets=cfg["trainset.facets"],
    )


def decoder_config(cfg: dict):
    from .neuralsdf import DecoderConfig

    reg = cfg["decoder.latent_reg"]
    return DecoderConfig(
        latent_dim=cfg["decoder.latent_dim"],
        hidden_layers=cfg["decoder.hidden_layers"],
        hidden_width=cfg["decoder.hidden_width"],
        clamp=cfg["decoder.clamp"],
        latent_reg_weight=None if reg < 0 else reg,
        dtype=cfg["decoder.dtype"],
    )


def channel_spec(cfg: dict):
    from .objective import ChannelSpec

    return ChannelSpec(
        length=cfg["objective.channel_length"],
        width=cfg["objective.channel_width"],
        height=cfg["objective.channel_height"],
        barrel_speed=cfg["objective.barrel_speed"],
        barrel_angle=math.radians(cfg["objective.barrel_angle_deg"]),
    )
