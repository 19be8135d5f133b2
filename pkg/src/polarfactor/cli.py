"""Command-line front-end.

Every command writes into ``--out``: an echo of the resolved config plus
its own CSVs and checkpoints. Exit codes: 0 success, 1 runtime or training
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, dump_config, load_config
from .conjugate import ConjugateError
from .experiments import (
    BenchmarkRun,
    Factorization,
    Standardizer,
    factorize,
    inverse_metrics,
    invert,
    polar_criteria,
    run_benchmark,
    standardized_field,
)
from .fields import (
    OBJECTIVES,
    BenchmarkSpec,
    GridFormatError,
    VectorFieldSource,
    grid_emit,
    grid_gradient,
    grid_ingest,
    identity_field,
    tent_field,
    terrain_generate,
)
from .icnn import IcnnConfig
from .metrics import write_metrics
from .npf import NpfModel, OptimConfig, TrainingDivergence, write_log
from .numcore import NumericsError, make_rng
from .sampler import NpfSampler, basins_visited, lmc_npf, write_trace

log = logging.getLogger("polarfactor")

# independent RNG streams per purpose, keyed off the run seed
STREAM_SPLIT, STREAM_TRAIN, STREAM_EVAL, STREAM_BRIDGE, STREAM_SAMPLE, STREAM_DATA = range(6)


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def build_source(cfg: RunConfig, data_path: str | None = None) -> VectorFieldSource:
    fc = cfg.field
    kind = "grid" if data_path else fc.kind
    if kind == "grid":
        path = data_path or fc.path
        if not path:
            raise ConfigError("field.path: required for kind 'grid'")
        if not Path(path).is_file():
            raise UsageError(f"data file not found: {path}")
        return grid_gradient(grid_ingest(path))
    if kind == "terrain":
        return grid_gradient(terrain_generate(fc.terrain))
    if kind == "identity":
        return identity_field(fc.dim)
    if kind == "tent":
        return tent_field()
    if kind in OBJECTIVES:
        return OBJECTIVES[kind]().as_source()
    raise ConfigError(f"field.kind: unknown field kind {kind!r}")


def source_data(cfg: RunConfig, source: VectorFieldSource):
    rng = make_rng([cfg.seed, STREAM_DATA])
    n = None if source.kind == "grid" else cfg.field.n_samples
    return source.paired(rng, n)


def icnn_config(cfg: RunConfig, dim: int) -> IcnnConfig:
    ic = cfg.icnn
    return IcnnConfig(dim=dim, width=ic.width, depth=ic.depth, rank=ic.rank, activation=ic.activation, delta_min=ic.delta_min)


def _write_rows(rows, path: Path) -> None:
    write_metrics(rows, path)


def _rebuild(cfg: RunConfig, ck: ckpt.Checkpoint, data_path: str | None) -> tuple[Factorization, VectorFieldSource]:
    if "u" not in ck.components or "v_phi" not in ck.components:
        raise UsageError("checkpoint lacks the potential or amortization network")
    source = build_source(cfg, data_path)
    data = source_data(cfg, source)
    u = ck.components["u"]
    if u.cfg.dim != data.dim:
        raise UsageError(f"checkpoint dimension {u.cfg.dim} does not match the field dimension {data.dim}")
    std = Standardizer.from_meta(ck.meta["standardizer"])
    train, test = std.apply(data).split(cfg.npf.split, make_rng([cfg.seed, STREAM_SPLIT]))
    model = NpfModel(u, ck.components["v_phi"], ck.components.get("m_xi"), steps_done=ck.steps.get("u", 0))
    return Factorization(model, std, train, test), source


def _checkpoint_config(ck: ckpt.Checkpoint) -> RunConfig:
    return config_from_dict(ck.meta["config"])


def cmd_factorize(cfg: RunConfig, args, out: Path) -> int:
    source = build_source(cfg, args.data)
    data = source_data(cfg, source)
    fz = factorize(
        data,
        icnn_config(cfg, data.dim),
        cfg.npf,
        cfg.conjugate,
        cfg.metrics,
        make_rng([cfg.seed, STREAM_TRAIN]),
        split_rng=make_rng([cfg.seed, STREAM_SPLIT]),
    )
    comps = {"u": fz.model.u, "v_phi": fz.model.v_phi}
    if fz.model.m_xi is not None:
        comps["m_xi"] = fz.model.m_xi
    meta = {"standardizer": fz.std.to_meta(), "config": config_to_dict(cfg)}
    steps = {"u": fz.model.steps_done, "v_phi": fz.model.steps_done, "m_xi": cfg.npf.mxi_steps}
    ckpt.save(ckpt.Checkpoint(comps, steps, meta), out / "npf.ckpt")
    write_log(fz.model.log, out / "train_log.csv")
    _write_rows(fz.rows, out / "metrics.csv")
    _report(fz.rows)
    return 0


def _report(rows) -> None:
    for r in rows:
        ratio = r.value / r.baseline if r.baseline else float("nan")
        print(f"{r.metric:>22s}  value={r.value:.6g}  baseline={r.baseline:.6g}  ratio={ratio:.3g}")


def cmd_invert(cfg: RunConfig, args, out: Path) -> int:
    ck = ckpt.load(_require(args.checkpoint, "--checkpoint"))
    fz, source = _rebuild(cfg, ck, args.data)
    psi, rows = invert(
        fz, cfg.bridge, cfg.conjugate, cfg.metrics, make_rng([cfg.seed, STREAM_BRIDGE]),
        field_fn=standardized_field(source, fz.std),
    )
    meta = {"config": config_to_dict(cfg), "dim": fz.train.dim}
    ckpt.save(ckpt.Checkpoint({"psi": psi}, {"psi": cfg.bridge.train_steps}, meta), out / "bridge.ckpt")
    _write_rows(rows, out / "inverse_metrics.csv")
    _report(rows)
    return 0


def cmd_metrics(cfg: RunConfig, args, out: Path) -> int:
    ck = ckpt.load(_require(args.checkpoint, "--checkpoint"))
    fz, source = _rebuild(cfg, ck, args.data)
    rng = make_rng([cfg.seed, STREAM_EVAL])
    rows = polar_criteria(fz.model, fz.train, fz.test, cfg.conjugate, cfg.metrics, rng)
    if args.bridge:
        bk = ckpt.load(args.bridge)
        rows += inverse_metrics(
            fz, bk.components["psi"], cfg.bridge, cfg.conjugate, cfg.metrics, rng, standardized_field(source, fz.std)
        )
    _write_rows(rows, out / "metrics.csv")
    _report(rows)
    return 0


def cmd_sample(cfg: RunConfig, args, out: Path) -> int:
    sc = cfg.sampler
    if sc.objective not in OBJECTIVES:
        raise ConfigError(f"sampler.objective: unknown objective {sc.objective!r}")
    obj = OBJECTIVES[sc.objective]()
    rng = make_rng([cfg.seed, STREAM_SAMPLE])
    npf = None
    if not args.plain:
        if not args.checkpoint or not args.bridge:
            raise UsageError("sample needs --checkpoint and --bridge unless --plain is given")
        ck, bk = ckpt.load(args.checkpoint), ckpt.load(args.bridge)
        u, psi = ck.components["u"], bk.components["psi"]
        if u.cfg.dim != obj.lower.size or psi.cfg.out_dim != obj.lower.size:
            raise UsageError("checkpoint dimension does not match the objective")
        std = Standardizer.from_meta(ck.meta["standardizer"])
        model = NpfModel(u, ck.components["v_phi"])
        npf = NpfSampler.with_refresh(
            model, psi, cfg.bridge, cfg.conjugate, sc.theta_opt, sc.phi_opt, sc.psi_opt, sc.params.steps,
            field_scale=std.f_scale, center=std.center, x_scale=std.x_scale,
        )
        if not sc.params.refresh:
            npf.potential = npf.drift = None
    x0 = None
    if sc.start is not None:
        start = np.asarray(sc.start, dtype=float)
        if start.size != obj.lower.size:
            raise ConfigError("sampler.start: wrong dimension")
        x0 = start + sc.start_spread * rng.standard_normal((sc.params.n_particles, start.size))
    state, trace = lmc_npf(obj, sc.params, npf, rng, x0)
    write_trace(trace, out / "trace.csv", obj.minima.shape[0])
    with open(out / "particles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(state.x.shape[1])])
        for row in state.x:
            w.writerow([_fmt(float(v)) for v in row])
    print(f"basins visited: {basins_visited(trace)} of {obj.minima.shape[0]}")
    return 0


def cmd_benchmark(cfg: RunConfig, args, out: Path) -> int:
    bc = cfg.benchmark
    try:
        spec = BenchmarkSpec(bc.benchmark, bc.dim, bc.variant)
    except NumericsError as exc:
        raise ConfigError(f"benchmark: {exc}") from None
    run = BenchmarkRun(
        steps=bc.steps,
        batch_size=bc.batch_size,
        n_train=bc.n_train,
        n_eval=bc.n_eval,
        repeats=bc.repeats,
        theta_opt=OptimConfig(bc.lr, 0.5, 0.5, "cosine", 0.01),
        phi_opt=OptimConfig(bc.lr, 0.9, 0.999, "cosine", 0.01),
        v_hidden=list(bc.v_hidden),
        cs=cfg.conjugate,
    )
    row = run_benchmark(spec, run, cfg.seed)
    keys = ["variant", "benchmark", "d", "metric", "value", "stderr", "n_params"]
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        w.writerow([_fmt(row[k]) for k in keys])
    print(f"{row['variant']} {row['benchmark']} d={row['d']}: {row['metric']} = {row['value']:.6g}")
    return 0


def cmd_terrain(cfg: RunConfig, args, out: Path) -> int:
    if args.action == "generate":
        grid = terrain_generate(cfg.field.terrain)
        grid_emit(grid, out / "terrain.csv")
    else:
        path = _require(args.path, "PATH")
        if not Path(path).is_file():
            raise UsageError(f"data file not found: {path}")
        grid = grid_ingest(path)
    src = grid_gradient(grid)
    with open(out / "field.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "fx", "fy"])
        for p, v in zip(src.nodes, src.node_values()):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(v[0])), repr(float(v[1]))])
    print(f"{grid.values.shape[1]}x{grid.values.shape[0]} grid, elevation range [{grid.values.min():.4g}, {grid.values.max():.4g}]")
    return 0


def _require(value, name: str):
    if not value:
        raise UsageError(f"missing required argument {name}")
    return value


COMMANDS = {
    "factorize": cmd_factorize,
    "invert": cmd_invert,
    "sample": cmd_sample,
    "benchmark": cmd_benchmark,
    "terrain": cmd_terrain,
    "metrics": cmd_metrics,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--profile", choices=["topography", "highdim"], help="default hyperparameter table")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="polarfactor", description="Neural polar factorization of vector fields.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    f = sub.add_parser("factorize", parents=[common], help="train u_theta and V_phi, report the criteria")
    f.add_argument("--data", help="grid CSV (x,y,value) of elevations; overrides field.kind")
    i = sub.add_parser("invert", parents=[common], help="train the stochastic inverse I_psi")
    i.add_argument("--checkpoint", help="npf.ckpt from factorize")
    i.add_argument("--data")
    s = sub.add_parser("sample", parents=[common], help="LMC-NPF (or plain LMC) on an objective")
    s.add_argument("--checkpoint")
    s.add_argument("--bridge")
    s.add_argument("--plain", action="store_true", help="plain LMC, no factorization")
    sub.add_parser("benchmark", parents=[common], help="ICNN architecture benchmark")
    t = sub.add_parser("terrain", parents=[common], help="generate or ingest an elevation grid")
    t.add_argument("action", choices=["generate", "ingest"])
    t.add_argument("path", nargs="?")
    m = sub.add_parser("metrics", parents=[common], help="re-evaluate a checkpoint")
    m.add_argument("--checkpoint")
    m.add_argument("--bridge")
    m.add_argument("--data")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.profile)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
        return COMMANDS[args.command](cfg, args, out)
    except (UsageError, ConfigError, GridFormatError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, ConjugateError, TrainingDivergence) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
