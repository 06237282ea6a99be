"""
Command-line entry point: ``python -m app <subcommand>``.

Subcommands: gen-data, solve-admm, train, infer, bench, report. Every flag can
also come from ``--config FILE.json`` (keys mirror the flags); explicit flags
win over the file, the file wins over defaults. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.config import settings
from app.core import bench
from app.core.edgelist import read_edge_list
from app.core.errors import SlogError
from app.core.graph import build_shift
from app.core.rng import FILTERS, NOISE, SOURCES, derive_seed
from app.core.storage import read_json, write_json
from app.ml.datagen import (
    GRAPH_FILE,
    SPLITS,
    FilterModel,
    SourceModel,
    describe_graph,
    load_any,
    load_bundle,
    make_dataset,
    save_bundle,
)
from app.ml.graphs import gen_graph
from app.ml.slog_net import init_model
from app.ml.train import load_checkpoint, save_checkpoint, train
from app.models.records import AdmmConfig, BenchConfig, GraphKind, SourceMode, TrainConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad command line: unknown or missing flags, unreadable inputs, invalid values."""


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(quiet: bool = False) -> None:
    level = logging.WARNING if quiet else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.LOG_FILE:
        handlers.append(logging.FileHandler(settings.LOG_FILE))
    logging.basicConfig(level=level, format=settings.LOG_FORMAT, handlers=handlers, force=True)


# --- flag groups -------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file whose keys mirror the flags")
    parser.add_argument("--seed", type=int, help="Run seed (unsigned 64-bit)")
    parser.add_argument("--jobs", type=int, default=1, help="Worker threads (bench only)")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")


def _admm_flags(parser: argparse.ArgumentParser) -> None:
    defaults = AdmmConfig()
    parser.add_argument("--rho-lambda", type=float, default=defaults.rho_lambda)
    parser.add_argument("--rho-mu", type=float, default=defaults.rho_mu)
    parser.add_argument("--scale-c", "--c", dest="scale_c", type=float, default=defaults.scale_c)
    parser.add_argument("--max-iters", type=int, default=defaults.max_iters)
    parser.add_argument("--tol-primal", type=float, default=defaults.tol_primal)
    parser.add_argument("--tol-dual", type=float, default=defaults.tol_dual)
    parser.add_argument("--tol", type=float, help="Sets both --tol-primal and --tol-dual")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = CliParser(prog="slog", description=f"{settings.APP_NAME} {settings.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)
    sub.required = True
    parsers = {}

    p = sub.add_parser("gen-data", help="Generate a train/val/test data bundle")
    _common(p)
    p.add_argument("--graph", choices=[k.value for k in GraphKind])
    p.add_argument("--edge-list", help="Use a graph from an edge-list file instead of an ensemble")
    p.add_argument("--n", type=int, help="Number of nodes")
    p.add_argument("--p-edge", type=float, help="ER edge probability")
    p.add_argument("--n-communities", type=int, help="SBM block count")
    p.add_argument("--p-within", type=float, help="SBM within-block edge probability")
    p.add_argument("--p-between", type=float, help="SBM between-block edge probability")
    p.add_argument("--m-attach", type=int, help="BA attachment count")
    p.add_argument("--radius", type=float, help="RG connection radius")
    p.add_argument("--theta", type=float, default=0.15, help="Source sparsity")
    p.add_argument("--source-mode", choices=[m.value for m in SourceMode], default=SourceMode.BERNOULLI.value)
    p.add_argument("--filter-order", type=int, default=5)
    p.add_argument("--phi", type=float, default=1.0, help="Filter impulsiveness")
    p.add_argument("--ntrain", type=int, help="Training signals |T|")
    p.add_argument("--batch", type=int, help="Mini-batch size P")
    p.add_argument("--ntest", type=int, help="Test signals (defaults to P)")
    p.add_argument("--eta", type=float, default=0.0, help="Test noise level")
    p.add_argument("--train-eta", type=float, default=0.0, help="Train/val noise level")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_gen_data, required=["out", "ntrain", "batch"])
    parsers["gen-data"] = p

    p = sub.add_parser("solve-admm", help="Blind deconvolution of a test split with ADMM")
    _common(p)
    _admm_flags(p)
    p.add_argument("--data")
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_solve_admm, required=["data", "out"])
    parsers["solve-admm"] = p

    defaults = TrainConfig()
    p = sub.add_parser("train", help="Train SLoG-Net on a data bundle")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--layers", type=int, default=5, help="Number of layers K")
    p.add_argument("--d", type=int, default=2, help="Constraint dimension")
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--val-every", type=int, default=defaults.val_every_batches)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train, required=["data", "out"])
    parsers["train"] = p

    p = sub.add_parser("infer", help="Run a trained model on a test split")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_infer, required=["model", "data", "out"])
    parsers["infer"] = p

    p = sub.add_parser("bench", help="Compare ADMM and SLoG-Net over fresh realizations")
    _common(p)
    _admm_flags(p)
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--eta-sweep", default="0", help="start:step:stop or a comma list")
    p.add_argument("--trials", type=int, default=BenchConfig().trials)
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--p-test", type=int, help="Override the test batch size")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_bench, required=["data", "out"])
    parsers["bench"] = p

    p = sub.add_parser("report", help="Aggregate benchmark CSVs into a summary")
    _common(p)
    p.add_argument("--in", dest="in_dir")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_report, required=["in_dir", "out"])
    parsers["report"] = p

    return parser, parsers


def _load_config_file(path: str) -> Dict[str, Any]:
    try:
        values = read_json(path)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return {key.lstrip("-").replace("-", "_"): value for key, value in values.items()}


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Resolve defaults < --config file < explicit flags and check required values."""
    parser, parsers = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = _load_config_file(args.config)
        if values.get("in") is not None:
            values["in_dir"] = values.pop("in")
        unknown = sorted(set(values) - set(vars(args)) - {"config"})
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        values.pop("config", None)
        parsers[args.command].set_defaults(**values)
        args = parser.parse_args(argv)

    missing = [name for name in args.required if getattr(args, name) is None]
    if missing:
        flags = ", ".join("--" + ("in" if m == "in_dir" else m.replace("_", "-")) for m in missing)
        raise UsageError(f"slog {args.command}: missing required {flags}")
    return args


def resolved_config(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"handler", "required", "quiet", "config"}
    return {key: value for key, value in sorted(vars(args).items()) if key not in skip}


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def parse_eta_sweep(spec: Any) -> List[float]:
    """'0:0.02:0.1' -> [0, 0.02, ..., 0.1] inclusive; '0,0.05' or a JSON list taken as is."""
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    text = str(spec).strip()
    try:
        if ":" in text:
            start, step, stop = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError("need step > 0 and stop >= start")
            count = int(round((stop - start) / step)) + 1
            return [float(np.round(start + k * step, 12)) for k in range(count)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad --eta-sweep '{text}': {e}") from e


def _admm_config(args: argparse.Namespace) -> AdmmConfig:
    return AdmmConfig(
        rho_lambda=args.rho_lambda,
        rho_mu=args.rho_mu,
        scale_c=args.scale_c,
        max_iters=args.max_iters,
        tol_primal=args.tol_primal if args.tol is None else args.tol,
        tol_dual=args.tol_dual if args.tol is None else args.tol,
    )


def _write_report(report, out: Path, config: Dict[str, Any], with_timing: bool = False) -> None:
    """Report to ``out``; wall-clock time always goes to the ``.timing.json`` sidecar as well."""
    payload = report.model_dump(mode="json", exclude=None if with_timing else {"timing_seconds"})
    payload["config"] = config
    write_json(out, payload)
    write_json(out.with_suffix(".timing.json"), {"method": report.method.value, "timing_seconds": report.timing_seconds})


# --- subcommands -------------------------------------------------------------

def _graph_params(args: argparse.Namespace, kind: GraphKind) -> Dict[str, float]:
    wanted = {
        GraphKind.ER: {"n": args.n, "p": args.p_edge},
        GraphKind.SBM: {
            "n": args.n,
            "n_communities": args.n_communities,
            "p_within": args.p_within,
            "p_between": args.p_between,
        },
        GraphKind.BA: {"n": args.n, "m": args.m_attach},
        GraphKind.RG: {"n": args.n, "radius": args.radius},
        GraphKind.KARATE: {},
    }[kind]
    missing = [key for key, value in wanted.items() if value is None]
    if missing:
        raise UsageError(f"--graph {kind.value} needs values for: {', '.join(missing)}")
    return {key: float(value) for key, value in wanted.items()}


def cmd_gen_data(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    seed = 0 if args.seed is None else args.seed
    if args.edge_list:
        graph = read_edge_list(_existing(args.edge_list, "edge list"), n_nodes=args.n)
        descriptor = describe_graph(graph, edge_list=GRAPH_FILE)
    else:
        if args.graph is None:
            raise UsageError("slog gen-data: one of --graph or --edge-list is required")
        kind = GraphKind(args.graph)
        params = _graph_params(args, kind)
        graph = gen_graph(kind, params, seed)
        descriptor = describe_graph(graph, kind=kind, params=params, seed=seed, edge_list=GRAPH_FILE)
    sg = build_shift(graph)

    mode = SourceMode(args.source_mode)
    sizes = {"train": args.ntrain, "val": args.batch, "test": args.ntest or args.batch}
    etas = {"train": args.train_eta, "val": args.train_eta, "test": args.eta}
    splits = {}
    for index, name in enumerate(SPLITS):
        source_model = SourceModel(
            n_nodes=graph.n_nodes,
            sparsity=args.theta,
            seed=derive_seed(seed, SOURCES, index),
            mode=mode,
            communities=graph.communities if mode == SourceMode.COMMUNITY else None,
        )
        filter_model = FilterModel(
            order=args.filter_order, impulsiveness=args.phi, seed=derive_seed(seed, FILTERS, index)
        )
        splits[name] = make_dataset(
            sg,
            source_model,
            filter_model,
            size=sizes[name],
            batch=args.batch,
            eta=etas[name],
            noise_seed=derive_seed(seed, NOISE, index),
            split=name,
            graph=descriptor,
            config=config,
        )
    save_bundle(args.out, graph, splits)


def cmd_solve_admm(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    graph, ds = load_any(_existing(args.data, "dataset"))
    report = bench.evaluate_admm(build_shift(graph), ds, _admm_config(args), args.kappa)
    _write_report(report, Path(args.out), config, with_timing=True)


def cmd_train(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    seed = TrainConfig().seed if args.seed is None else args.seed
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        val_every_batches=args.val_every,
        seed=seed,
    )
    bundle = load_bundle(_existing(args.data, "data bundle"), splits=("train", "val"))
    sg = build_shift(bundle.graph)
    model = init_model(sg.n_nodes, args.d, args.layers, seed, sg)
    best, log = train(model, bundle["train"], bundle["val"], cfg, config)
    save_checkpoint(best, args.out, cfg, best_val_loss=log.best_val_loss, log=log, config=config)


def cmd_infer(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    seed = TrainConfig().seed if args.seed is None else args.seed
    graph, ds = load_any(_existing(args.data, "dataset"))
    model, _ = load_checkpoint(_existing(args.model, "checkpoint"), build_shift(graph))
    report = bench.evaluate_slog(model, ds, seed, args.kappa)
    _write_report(report, Path(args.out), config)


def cmd_bench(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    bench_cfg = BenchConfig(
        eta_sweep=parse_eta_sweep(args.eta_sweep),
        trials=args.trials,
        kappa=args.kappa,
        p_test=args.p_test,
        seed=BenchConfig().seed if args.seed is None else args.seed,
        jobs=args.jobs,
    )
    graph, ds = load_any(_existing(args.data, "dataset"))
    sg = build_shift(graph)
    model = None
    if args.model:
        model, _ = load_checkpoint(_existing(args.model, "checkpoint"), sg)
    result = bench.bench_compare(sg, ds.manifest, _admm_config(args), model, bench_cfg, config)
    bench.write_results(result, args.out)


def cmd_report(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    summary = bench.summarize(_existing(args.in_dir, "results directory"))
    summary["config"] = config
    write_json(args.out, summary)


# --- dispatch ----------------------------------------------------------------

Handler = Callable[[argparse.Namespace, Dict[str, Any]], None]


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on usage errors, 2 on runtime failures
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE

    setup_logging(args.quiet)
    config = resolved_config(args)
    handler: Handler = args.handler
    try:
        handler(args, config)
    except (UsageError, ValidationError) as e:
        sys.stderr.write(f"slog {args.command}: {e}\n")
        return EXIT_USAGE
    except SlogError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"slog {args.command} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> int:
    return dispatch()
