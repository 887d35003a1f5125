"""Pipeline orchestration: corpus generation, training, diagnostics, optimization.

Subcommands mirror the offline/online split of the pipeline: ``gen-trainset``
and ``train`` build the latent parameterization once, after which
``reconstruct``/``interpolate``/``arithmetic``/``tsne`` inspect it and
``optimize`` searches it for mixing elements.  Every run writes its resolved
configuration next to its outputs; no subcommand mutates its inputs.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .latentlab import arithmetic, interpolate, tsne_embed, write_embedding_csv, write_gnuplot_script
from .mesh import write_obj
from .meshops import SdfGrid, largest_component, marching_cubes, mesh_volume, scale_to_volume
from .neuralsdf import (
    DegenerateLatentError,
    decode_grid,
    read_model,
    train,
    write_history_csv,
    write_model,
)
from .objective import ChannelSpec, mixing_objective, surrogate_field
from .optim import Bounds, direct_minimize, soga_minimize, write_eval_log, write_summary
from .trainset import generate_corpus, read_manifest

log = logging.getLogger(__name__)


class CliError(RuntimeError):
    pass


def _load_cfg(path):
    return cfgmod.load_config(path)


# --- latent objective wiring -----------------------------------------------------


def latent_bounds(model, inflate: float = 0.1) -> Bounds:
    """Per-coordinate box over the training codes, inflated on both sides."""
    codes = model.latent_codes
    lo = codes.min(axis=0)
    hi = codes.max(axis=0)
    span = np.maximum(hi - lo, 1e-3)
    return Bounds(lo - inflate * span, hi + inflate * span)


def place_in_channel(mesh, grid: SdfGrid | None, spec: ChannelSpec, target_volume: float):
    """Volume-scale a unit-space element and move it to the channel center.

    The same affine map is applied to an accompanying signed-distance grid
    (distances scale with the mesh), so the flow field needs no new queries.
    """
    vol = mesh_volume(mesh)
    s = (target_volume / vol) ** (1.0 / 3.0)
    lo, hi = mesh.bounds()
    c = 0.5 * (lo + hi)
    scaled = mesh.scaled(s, center=c)
    lo2, hi2 = scaled.bounds()
    shift = spec.center - 0.5 * (lo2 + hi2)
    placed = scaled.translated(shift)
    placed_grid = None
    if grid is not None:
        # x -> s*(x - c) + c + shift, distances scale by s
        origin = s * (grid.origin - c) + c + shift
        placed_grid = SdfGrid(origin, s * grid.spacing, s * grid.values)
    return placed, placed_grid


def latent_mixing_objective(model, cfg: dict):
    """Objective callable z -> J for optimization over the latent box."""
    spec = cfgmod.channel_spec(cfg)
    res = cfg["optimizer.reconstruct_res"]
    target = cfg["objective.element_volume"]
    rect_grid = (cfg["objective.rect_grid_y"], cfg["objective.rect_grid_z"])
    ppr = cfg["objective.particles_per_rect"]
    dt = cfg["objective.dt"] or None
    max_steps = cfg["objective.max_steps"]

    def objective(z) -> float:
        try:
            grid = decode_grid(model, z, res)
            mesh = marching_cubes(grid)
            if not mesh.n_triangles:
                raise DegenerateLatentError("empty isosurface")
            mesh = largest_component(mesh)
            placed, placed_grid = place_in_channel(mesh, grid, spec, target)
            field = surrogate_field(placed, spec, phi_grid=placed_grid)
            return mixing_objective(
                placed, spec, grid=rect_grid, particles_per_rect=ppr,
                field=field, dt=dt, max_steps=max_steps,
            )
        except DegenerateLatentError:
            log.warning("degenerate latent code %s", np.asarray(z))
            return math.inf

    return objective, spec, target


# --- subcommands -------------------------------------------------------------------


def cmd_gen_trainset(args) -> int:
    cfg = _load_cfg(args.config)
    out_dir = Path(args.out)
    manifest = generate_corpus(cfgmod.corpus_config(cfg), out_dir)
    cfgmod.write_config(cfg, out_dir / "resolved_config.txt")
    print(f"wrote {len(manifest.records)} records to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    manifest = read_manifest(args.manifest)
    model, history = train(
        manifest,
        cfgmod.decoder_config(cfg),
        epochs=cfg["training.epochs"],
        batch=cfg["training.batch"],
        seed=cfg["run.seed"],
        lr_theta=cfg["training.lr_theta"],
        lr_z=cfg["training.lr_z"],
        steps_per_epoch=cfg["training.steps_per_epoch"] or None,
    )
    out = Path(args.out)
    write_model(model, out)
    write_history_csv(history, str(out) + ".history.csv")
    cfgmod.write_config(cfg, out.parent / (out.name + ".resolved_config.txt"))
    print(f"trained {len(history)} epochs in {history.wall_time:.1f}s; "
          f"final mean loss {history.mean_loss[-1]:.6f}")
    return 0


def _reconstruct_to_obj(model, z, res, volume, out_path) -> None:
    from .neuralsdf import reconstruct

    mesh = reconstruct(model, z, resolution=res, target_volume=volume)
    write_obj(mesh, out_path)


def cmd_reconstruct(args) -> int:
    model = read_model(args.model)
    if (args.id is None) == (args.latent is None):
        raise CliError("give exactly one of --id or --latent")
    if args.id is not None:
        z = model.code(args.id)
    else:
        z = np.array([float(v) for v in args.latent.split(",")])
    _reconstruct_to_obj(model, z, args.res, args.volume, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    model = read_model(args.model)
    z_a = model.code(args.a)
    z_b = model.code(args.b)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = [int(v) for v in args.n.split(",")]
    for n in indices:
        z = interpolate(z_a, z_b, args.N, n)
        _reconstruct_to_obj(model, z, 64, None, out_dir / f"interp_{n:03d}.obj")
    print(f"wrote {len(indices)} meshes to {out_dir}")
    return 0


def cmd_arithmetic(args) -> int:
    model = read_model(args.model)
    z = arithmetic(model.code(args.deformed), model.code(args.base), model.code(args.target))
    _reconstruct_to_obj(model, z, 64, None, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_tsne(args) -> int:
    cfg = _load_cfg(args.config)
    model = read_model(args.model)
    n = len(model.shape_ids)
    perplexity = min(cfg["tsne.perplexity"], max(2.0, n / 4.0))
    labels = [sid.split("-")[0] for sid in model.shape_ids]
    emb = tsne_embed(
        model.latent_codes,
        perplexity=perplexity,
        iters=cfg["tsne.iterations"],
        seed=cfg["run.seed"],
        labels=labels,
    )
    write_embedding_csv(emb, model.shape_ids, args.out)
    write_gnuplot_script(args.out, Path(args.out).with_suffix(".gp"))
    print(f"wrote {args.out}")
    return 0


def cmd_optimize(args) -> int:
    cfg = _load_cfg(args.config)
    model = read_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    objective, spec, target = latent_mixing_objective(model, cfg)
    bounds = latent_bounds(model, cfg["optimizer.bounds_inflate"])
    stall = cfg["optimizer.stall_tol"] or None
    if args.algo == "direct":
        report = direct_minimize(
            objective, bounds,
            max_evals=cfg["optimizer.max_evals"],
            max_iters=cfg["optimizer.max_iters"],
            tol=stall,
        )
    else:
        report = soga_minimize(
            objective, bounds,
            pop_size=cfg["optimizer.pop_size"],
            max_iters=cfg["optimizer.max_iters"],
            mutation_rate=cfg["optimizer.mutation_rate"],
            crossover_rate=cfg["optimizer.crossover_rate"],
            seed=cfg["run.seed"],
            max_evals=cfg["optimizer.max_evals"],
            tol=stall,
        )

    write_eval_log(report, out_dir / "evaluations.csv")
    write_summary(report, out_dir / "report.txt", log_path="evaluations.csv")
    cfgmod.write_config(cfg, out_dir / "resolved_config.txt")

    # re-derive the K best distinct designs as placed, volume-scaled meshes
    seen = set()
    ranked = []
    for x, f in sorted(report.evaluations, key=lambda e: e[1]):
        key = tuple(np.round(x, 12))
        if key in seen or not math.isfinite(f):
            continue
        seen.add(key)
        ranked.append((x, f))
        if len(ranked) >= cfg["optimizer.top_k"]:
            break
    res = cfg["optimizer.reconstruct_res"]
    for rank, (z, f) in enumerate(ranked):
        grid = decode_grid(model, z, res)
        mesh = marching_cubes(grid)
        mesh = largest_component(mesh)
        placed, _ = place_in_channel(mesh, None, spec, target)
        write_obj(placed, out_dir / f"best{rank:02d}_J{f:+.6f}.obj")
    print(f"best J = {report.best_f:.6f} after {report.n_evals} evaluations "
          f"({report.reason}); wrote {len(ranked)} meshes to {out_dir}")
    return 0


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentfield",
        description="latent signed-distance shape parameterization pipeline",
    )
    parser.add_argument("--jobs", type=int, default=None,
                        help="cap worker threads used by array backends")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trainset", help="generate the deformed-shape corpus")
    p.add_argument("--config", required=False, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_trainset)

    p = sub.add_parser("train", help="train the auto-decoder on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=False, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="extract a mesh from a latent code")
    p.add_argument("--model", required=True)
    p.add_argument("--id", default=None)
    p.add_argument("--latent", default=None, help="comma-separated latent coordinates")
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--volume", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("interpolate", help="reconstruct codes along a latent segment")
    p.add_argument("--model", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--n", required=True, help="comma-separated step indices")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("arithmetic", help="transfer a latent feature onto another shape")
    p.add_argument("--model", required=True)
    p.add_argument("--deformed", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_arithmetic)

    p = sub.add_parser("tsne", help="2D embedding of the latent codes")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=False, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tsne)

    p = sub.add_parser("optimize", help="minimize the mixing objective over the latent box")
    p.add_argument("--model", required=True)
    p.add_argument("--algo", choices=("direct", "soga"), required=True)
    p.add_argument("--config", required=False, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_optimize)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.jobs is not None:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=args.jobs)
        except ImportError:
            log.warning("--jobs ignored: threadpoolctl not installed")
    try:
        return args.fn(args)
    except Exception as exc:  # single exit path: message on stderr, nonzero code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
