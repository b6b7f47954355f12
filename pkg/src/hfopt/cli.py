"""Command-line harness: corpus generation, training runs, and reporting.

Exit codes are part of the contract: 0 success, 2 usage/configuration
problems, 3 numeric failure during training.

``train`` reads a line-based ``key = value`` config (``#`` starts a
comment; unknown keys are hard errors) and writes two files into the output
directory: ``records.csv`` with one row per iteration under a frozen
header, and ``summary.txt`` with run totals plus the corpus content hash.
"""

import argparse
import math
import os
import re
import sys
from dataclasses import dataclass

from . import corpus as corpus_mod
from . import hf, model, sampling
from .errors import ConfigurationError, CorpusFormatError, NumericError
from .krylov import CGConfig, IdentityPreconditioner
from .precond import LbfgsPreconditioner

CSV_HEADER = (
    "iter,train_loss,heldout_loss,cg_iters,cum_cg_iters,grad_utts,grad_frames,"
    "cg_utts,cg_frames,accessed_points,cum_accessed_points,lambda,rho,alpha,"
    "accepted_index,wall_ms"
)


@dataclass
class RunConfig:
    """Everything one training run needs; defaults follow the bn-desk preset."""

    corpus: str = ""
    out_dir: str = ""
    layers: tuple = (20, 64, 64, 10)
    seed: int = 0
    workers: int = 0  # 0 -> machine parallelism
    max_hf_iters: int = 30
    stop_tol: float = 1e-4
    preconditioner: str = "lbfgs"
    lbfgs_m: int = 32
    precond_carryover: bool = True
    sampler: str = "full"
    s0_fraction: float = 0.05
    alpha_g: float = 1.2
    alpha_cg: float = 1.3
    theta_s: float = 0.25
    growth_cap: float = 4.0
    cg_fraction: float = 0.01
    cg_max_iters: int = 100
    cg_trunc_eps: float = 5e-4
    cg_trunc_min_window: int = 10
    cg_residual_tol: float = 0.0
    cg_store_stride_base: float = 1.3
    lambda0: float = 1.0
    literal_paper_mode: bool = False
    warm_decay: float = 0.95
    armijo_c: float = 1e-4
    max_backtracks: int = 10


def _parse_bool(text, key):
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def _parse_layers(text):
    try:
        return tuple(int(tok) for tok in text.replace(" ", "").split(","))
    except ValueError as exc:
        raise ConfigurationError(f"layers: {exc}") from None


_PRECOND_RE = re.compile(r"^lbfgs(?:\((\d+)\))?$")
_SAMPLER_RE = re.compile(r"^(full|geometric|variance)(?:\(([^)]*)\))?$")


def parse_config(path) -> RunConfig:
    cfg = RunConfig()
    converters = {
        "corpus": str,
        "out_dir": str,
        "layers": _parse_layers,
        "seed": int,
        "workers": int,
        "max_hf_iters": int,
        "stop_tol": float,
        "lbfgs_m": int,
        "s0_fraction": float,
        "alpha_g": float,
        "alpha_cg": float,
        "theta_s": float,
        "growth_cap": float,
        "cg_fraction": float,
        "cg_max_iters": int,
        "cg_trunc_eps": float,
        "cg_trunc_min_window": int,
        "cg_residual_tol": float,
        "cg_store_stride_base": float,
        "lambda0": float,
        "warm_decay": float,
        "armijo_c": float,
        "max_backtracks": int,
    }
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None

    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in converters:
            try:
                setattr(cfg, key, converters[key](value))
            except ConfigurationError:
                raise
            except ValueError:
                raise ConfigurationError(
                    f"{path}:{lineno}: bad value {value!r} for {key}"
                ) from None
        elif key in ("precond_carryover", "literal_paper_mode"):
            setattr(cfg, key, _parse_bool(value, key))
        elif key == "preconditioner":
            if value != "none" and not _PRECOND_RE.match(value):
                raise ConfigurationError(
                    f"{path}:{lineno}: preconditioner must be none or lbfgs(m)"
                )
            match = _PRECOND_RE.match(value)
            if match:
                cfg.preconditioner = "lbfgs"
                if match.group(1):
                    cfg.lbfgs_m = int(match.group(1))
            else:
                cfg.preconditioner = "none"
        elif key == "sampler":
            match = _SAMPLER_RE.match(value)
            if not match:
                raise ConfigurationError(
                    f"{path}:{lineno}: sampler must be full, geometric(s0,ag,acg)"
                    " or variance(theta,s0)"
                )
            cfg.sampler = match.group(1)
            args = [a for a in (match.group(2) or "").split(",") if a.strip()]
            try:
                if cfg.sampler == "geometric" and args:
                    cfg.s0_fraction, cfg.alpha_g, cfg.alpha_cg = (float(a) for a in args)
                elif cfg.sampler == "variance" and args:
                    cfg.theta_s, cfg.s0_fraction = (float(a) for a in args)
                elif cfg.sampler == "full" and args:
                    raise ValueError("full takes no arguments")
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: sampler args: {exc}") from None
        else:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
    return cfg


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records_csv(path, records):
    lines = [CSV_HEADER]
    cum_cg = 0
    cum_accessed = 0
    for r in records:
        cum_cg += r.cg_iterations
        cum_accessed += r.accessed_data_points
        lines.append(
            ",".join(
                _format_value(v)
                for v in (
                    r.iteration,
                    r.train_loss,
                    r.heldout_loss,
                    r.cg_iterations,
                    cum_cg,
                    r.grad_utts,
                    r.grad_frames,
                    r.cg_utts,
                    r.cg_frames,
                    r.accessed_data_points,
                    cum_accessed,
                    r.lambda_after,
                    r.rho,
                    r.alpha,
                    r.accepted_iterate_index,
                    round(r.wall_ms, 3),
                )
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary(path, records, corpus_hash):
    final_loss = records[-1].heldout_loss if records else float("nan")
    items = [
        ("final_heldout_loss", repr(final_loss)),
        ("hf_iterations", len(records)),
        ("total_cg_iterations", sum(r.cg_iterations for r in records)),
        ("total_accessed_points", sum(r.accessed_data_points for r in records)),
        ("total_wall_ms", round(sum(r.wall_ms for r in records), 3)),
        ("corpus_sha256", corpus_hash),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in items:
            fh.write(f"{key} = {value}\n")


def read_summary(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return out


def build_run(cfg: RunConfig):
    """Construct (objective, sampler, preconditioner, hf config, state) for a run."""
    if not cfg.corpus:
        raise ConfigurationError("config must name a corpus file")
    loaded = corpus_mod.load(cfg.corpus)
    if cfg.layers[0] != loaded.feature_dim:
        raise ConfigurationError(
            f"network input {cfg.layers[0]} != corpus feature dim {loaded.feature_dim}"
        )
    if cfg.layers[-1] != loaded.n_classes:
        raise ConfigurationError(
            f"network output {cfg.layers[-1]} != corpus classes {loaded.n_classes}"
        )
    if not loaded.heldout:
        raise ConfigurationError("corpus has no held-out utterances")

    workers = cfg.workers if cfg.workers > 0 else min(8, os.cpu_count() or 1)
    spec = model.NetworkSpec(cfg.layers, init_seed=cfg.seed)
    objective = hf.CorpusObjective(spec, loaded, workers=workers)

    train_ids = loaded.train_ids()
    cg_budget = max(1, math.ceil(cfg.cg_fraction * len(train_ids)))
    if cfg.sampler == "full":
        sampler = sampling.FullSchedule(train_ids, cg_budget, cfg.seed)
    elif cfg.sampler == "geometric":
        sampler = sampling.GeometricSchedule(
            train_ids,
            sampling.GeometricConfig(cfg.s0_fraction, cfg.alpha_g, cfg.alpha_cg),
            cg_budget,
            cfg.seed,
        )
    else:
        sampler = sampling.VarianceSchedule(
            train_ids,
            sampling.VarianceConfig(cfg.theta_s, cfg.s0_fraction, cfg.growth_cap),
            cg_budget,
            cfg.seed,
        )

    if cfg.preconditioner == "lbfgs":
        precond = LbfgsPreconditioner(cfg.lbfgs_m, carryover=cfg.precond_carryover)
    else:
        precond = IdentityPreconditioner()

    hf_cfg = hf.HfConfig(
        cg=CGConfig(
            max_iters=cfg.cg_max_iters,
            trunc_eps=cfg.cg_trunc_eps,
            trunc_min_window=cfg.cg_trunc_min_window,
            residual_tol=cfg.cg_residual_tol,
            store_stride_base=cfg.cg_store_stride_base,
        ),
        line_search=hf.LineSearchConfig(
            armijo_c=cfg.armijo_c, max_backtracks=cfg.max_backtracks
        ),
        max_hf_iters=cfg.max_hf_iters,
        stop_tol=cfg.stop_tol,
    )
    damping = hf.DampingState(lam=cfg.lambda0, literal_paper_mode=cfg.literal_paper_mode)
    state = hf.initial_state(
        objective, model.init_params(spec), damping, warm_decay=cfg.warm_decay
    )
    return objective, sampler, precond, hf_cfg, state


def cmd_gen(args) -> int:
    gp = corpus_mod.GenParams(
        n_classes=args.classes,
        feature_dim=args.dim,
        train_utterances=args.train_utts,
        heldout_utterances=args.heldout_utts,
        min_length=args.min_len,
        max_length=args.max_len,
        p_stay=args.p_stay,
        mean_scale=args.mean_scale,
        noise_scale=args.noise,
        seed=args.seed,
    )
    built = corpus_mod.generate(gp)
    corpus_mod.save(built, args.output)
    frames = sum(u.length for u in built.train) + sum(u.length for u in built.heldout)
    print(
        f"wrote {args.output}: {len(built.train)} train + {len(built.heldout)} heldout "
        f"utterances, {frames} frames, {gp.n_classes} classes, dim {gp.feature_dim}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if not cfg.out_dir:
        raise ConfigurationError("no output directory (config out_dir or --out)")

    objective, sampler, precond, hf_cfg, state = build_run(cfg)
    records, _ = hf.train_loop(objective, sampler, precond, hf_cfg, state)

    os.makedirs(cfg.out_dir, exist_ok=True)
    write_records_csv(os.path.join(cfg.out_dir, "records.csv"), records)
    write_summary(
        os.path.join(cfg.out_dir, "summary.txt"),
        records,
        corpus_mod.file_sha256(cfg.corpus),
    )
    final = records[-1].heldout_loss if records else float("nan")
    print(
        f"{len(records)} iterations, final heldout loss {final:.6f}, "
        f"{sum(r.cg_iterations for r in records)} CG iterations, "
        f"{sum(r.accessed_data_points for r in records)} accessed points "
        f"-> {cfg.out_dir}"
    )
    return 0


def _read_records_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigurationError(f"{path}: missing or wrong header")
    columns = CSV_HEADER.split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(columns):
            raise ConfigurationError(f"{path}: row has {len(cells)} cells")
        rows.append(dict(zip(columns, cells)))
    return rows


def _run_label(path):
    base = os.path.basename(path)
    if base == "records.csv":
        return os.path.basename(os.path.dirname(os.path.abspath(path))) or base
    return os.path.splitext(base)[0]


def cmd_report(args) -> int:
    table = []
    hashes = {}
    for path in args.csvs:
        rows = _read_records_csv(path)
        label = _run_label(path)
        summary_path = os.path.join(os.path.dirname(os.path.abspath(path)), "summary.txt")
        if os.path.exists(summary_path):
            hashes[label] = read_summary(summary_path).get("corpus_sha256", "")
        final_loss = float(rows[-1]["heldout_loss"]) if rows else float("nan")
        table.append(
            {
                "method": label,
                "final_loss": final_loss,
                "hf_iters": len(rows),
                "cg_iters": sum(int(r["cg_iters"]) for r in rows),
                "accessed": sum(int(r["accessed_points"]) for r in rows),
                "wall_ms": sum(float(r["wall_ms"]) for r in rows),
            }
        )
        if args.series:
            os.makedirs(args.series, exist_ok=True)
            series_path = os.path.join(args.series, f"{label}.series.csv")
            with open(series_path, "w", encoding="utf-8") as fh:
                fh.write("iter,heldout_loss,cum_cg_iters,cum_accessed_points\n")
                for r in rows:
                    fh.write(
                        f"{r['iter']},{r['heldout_loss']},{r['cum_cg_iters']},"
                        f"{r['cum_accessed_points']}\n"
                    )

    if len(set(hashes.values())) > 1:
        print("warning: runs were trained on different corpora", file=sys.stderr)

    header = f"{'Method':<24} {'Final Loss':>12} {'HF Iters':>9} {'CG Iters':>9} {'Accessed':>14} {'Wall ms':>12}"
    print(header)
    print("-" * len(header))
    for row in table:
        print(
            f"{row['method']:<24} {row['final_loss']:>12.6f} {row['hf_iters']:>9} "
            f"{row['cg_iters']:>9} {row['accessed']:>14} {row['wall_ms']:>12.1f}"
        )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hfopt", description="curvature-product training harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus file")
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--dim", type=int, default=20)
    gen.add_argument("--train-utts", type=int, default=2000)
    gen.add_argument("--heldout-utts", type=int, default=200)
    gen.add_argument("--min-len", type=int, default=20)
    gen.add_argument("--max-len", type=int, default=100)
    gen.add_argument("--p-stay", type=float, default=0.9)
    gen.add_argument("--mean-scale", type=float, default=1.0)
    gen.add_argument("--noise", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="run training from a config file")
    train.add_argument("config")
    train.add_argument("--out", help="output directory (overrides config out_dir)")
    train.add_argument("--workers", type=int, help="shard worker count")
    train.set_defaults(func=cmd_train)

    report = sub.add_parser("report", help="tabulate one or more runs")
    report.add_argument("csvs", nargs="+", metavar="records.csv")
    report.add_argument("--series", help="also write per-iteration series files here")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, CorpusFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
