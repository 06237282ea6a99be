"""
Head-to-head evaluation of the ADMM solver and SLoG-Net.

Per-dataset evaluation produces an ``EvalReport``; the benchmark harness draws
fresh test realizations, sweeps the noise level and writes CSV tables plus a
JSON summary.
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.config import settings
from app.core.admm import run_admm
from app.core.errors import GraphMismatchError, NonInvertibleFilterError
from app.core.graph import (
    FilterSpec,
    SpectralGraph,
    check_invertibility,
    projector_norm,
    recover_filter_coeffs,
)
from app.core.rng import FILTERS, NOISE, SOURCES, TRIAL, derive_seed
from app.core.storage import atomic_write_text, fingerprint, write_json
from app.ml.datagen import Dataset, FilterModel, SourceModel, sample_filter, sample_labeled_sources, synthesize
from app.ml.metrics import (
    community_accuracy,
    reference_scale,
    relative_error_aligned,
    relative_error_normalized,
    relative_error_signed,
    support_accuracy,
)
from app.ml.slog_net import SlogModel
from app.ml.train import infer
from app.models.records import AdmmConfig, BenchConfig, DatasetManifest, EvalReport, Method, SourceMode

logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "method", "graph", "N", "P", "theta", "L", "phi", "eta", "seed",
    "re_x", "re_g", "acc", "kappa", "seconds", "iters",
]
COMMUNITY_COLUMNS = ["method", "graph", "N", "P", "eta", "seed", "community_acc"]
CONDITIONING_COLUMNS = ["graph", "N", "P", "eta", "seed", "conditioning"]
GROUP_KEYS = ["method", "graph", "N", "P", "eta"]
METRICS = ["re_x", "re_g", "acc", "seconds", "iters"]

RESULTS_FILE = "results.csv"
COMMUNITIES_FILE = "communities.csv"
CONDITIONING_FILE = "conditioning.csv"
SUMMARY_FILE = "summary.json"


def ground_truth_response(sg: SpectralGraph, taps: np.ndarray) -> Optional[np.ndarray]:
    """Inverse response g~0 = 1 / (Psi_L h) of a planted filter, or None when h is not invertible."""
    h_tilde = FilterSpec.from_coeffs(taps).response(sg)
    if not check_invertibility(h_tilde):
        return None
    return 1.0 / h_tilde


def _graph_label(manifest: DatasetManifest) -> str:
    return manifest.graph.kind.value if manifest.graph.kind else "edgelist"


def check_same_graph(model: SlogModel, sg: SpectralGraph) -> None:
    if fingerprint(model.sg.graph.adjacency) != fingerprint(sg.graph.adjacency):
        raise GraphMismatchError("model and dataset were built on different graphs")


def planted_scale(x_hat: np.ndarray, g_hat: np.ndarray, g0: Optional[np.ndarray]) -> np.ndarray:
    """ADMM fixes the filter scale through c; its sources are scored at the planted scale."""
    if g0 is None:
        return x_hat
    return reference_scale(g_hat, g0) * x_hat


def _finite_mean(values: List[float]) -> float:
    finite = [v for v in values if np.isfinite(v)]
    if not finite:
        raise NonInvertibleFilterError("no batch has an invertible planted filter; re_g is undefined")
    return float(np.mean(finite))


def evaluate_admm(
    sg: SpectralGraph, ds: Dataset, cfg: Optional[AdmmConfig] = None, kappa: float = 0.1
) -> EvalReport:
    """
    Solve every batch of ``ds`` with ADMM and score it against the planted truth.

    The metadata carries per-batch errors, the recovered filter taps and the
    error of g~ under the 1^T g~ = c convention without rescaling.
    """
    cfg = cfg or AdmmConfig()
    communities = sg.graph.communities
    rows = []
    for q, (X_q, Y_q) in enumerate(ds.batches()):
        result = run_admm(sg, Y_q, cfg)
        g0 = ground_truth_response(sg, ds.H[:, q])
        fit = recover_filter_coeffs(sg, result.g_tilde, ds.manifest.filter_order)
        labels = ds.batch_labels(q)
        x_hat = planted_scale(result.x_hat, result.g_tilde, g0)
        rows.append(
            {
                "batch": q,
                "re_x": relative_error_signed(x_hat, X_q),
                "re_g": float("nan") if g0 is None else relative_error_aligned(result.g_tilde, g0),
                "re_g_unaligned": (
                    float("nan") if g0 is None else relative_error_normalized(result.g_tilde, g0, cfg.scale_c)
                ),
                "acc": support_accuracy(x_hat, X_q, kappa),
                "conditioning": float("nan") if g0 is None else projector_norm(g0),
                "seconds": result.seconds,
                "iters": result.state.iter,
                "converged": result.state.converged,
                "g_hat": result.g_tilde.tolist(),
                "h_hat": fit.coeffs.tolist(),
                "community_acc": (
                    None if labels is None or communities is None
                    else community_accuracy(x_hat, labels, communities)
                ),
            }
        )
    return _report(Method.ADMM, rows, ds, kappa)


def evaluate_slog(model: SlogModel, ds: Dataset, seed: int = 0, kappa: float = 0.1) -> EvalReport:
    """Single forward pass per batch of ``ds``; timing covers the forward only."""
    sg = model.sg
    expected = ds.manifest.graph.fingerprint
    if expected is not None and expected != fingerprint(sg.graph.adjacency):
        raise GraphMismatchError("model and dataset were built on different graphs")
    communities = sg.graph.communities
    rows = []
    for q, (X_q, Y_q) in enumerate(ds.batches()):
        x_hat, g_hat, seconds = infer(model, Y_q, seed)
        g0 = ground_truth_response(sg, ds.H[:, q])
        labels = ds.batch_labels(q)
        rows.append(
            {
                "batch": q,
                "re_x": relative_error_signed(x_hat, X_q),
                "re_g": float("nan") if g0 is None else relative_error_aligned(g_hat, g0),
                "acc": support_accuracy(x_hat, X_q, kappa),
                "conditioning": float("nan") if g0 is None else projector_norm(g0),
                "seconds": seconds,
                "iters": model.n_layers,
                "community_acc": (
                    None if labels is None or communities is None
                    else community_accuracy(x_hat, labels, communities)
                ),
            }
        )
    return _report(Method.SLOG, rows, ds, kappa)


def _report(method: Method, rows: List[Dict[str, Any]], ds: Dataset, kappa: float) -> EvalReport:
    frame = pd.DataFrame(rows)
    community = frame["community_acc"].dropna()
    report = EvalReport(
        method=method,
        re_x=float(frame["re_x"].mean()),
        re_g=_finite_mean(frame["re_g"].tolist()),
        acc=float(frame["acc"].mean()),
        kappa=kappa,
        timing_seconds=float(frame["seconds"].mean()),
        conditioning=_finite_mean(frame["conditioning"].tolist()),
        iters=int(round(frame["iters"].mean())),
        community_acc=float(community.mean()) if len(community) else None,
        metadata={
            "split": ds.manifest.split,
            "n_batches": ds.n_batches,
            "batches": [{k: v for k, v in row.items() if k != "seconds"} for row in rows],
            "dataset": ds.manifest.model_dump(mode="json"),
        },
    )
    logger.info(
        f"{method.value}: RE(X)={report.re_x:.4f}, RE(g)={report.re_g:.4f}, "
        f"ACC={report.acc:.4f}, {report.timing_seconds:.3e} s/batch"
    )
    return report


@dataclass
class BenchResult:
    results: pd.DataFrame
    communities: pd.DataFrame
    conditioning: pd.DataFrame
    config: Dict[str, Any] = field(default_factory=dict)

    def reports(self) -> List[EvalReport]:
        """One aggregate report per method over every realization and noise level."""
        out = []
        for method, group in self.results.groupby("method", sort=True):
            community = self.communities[self.communities["method"] == method]["community_acc"]
            out.append(
                EvalReport(
                    method=Method(method),
                    re_x=float(group["re_x"].mean()),
                    re_g=float(group["re_g"].mean()),
                    acc=float(group["acc"].mean()),
                    kappa=float(group["kappa"].iloc[0]),
                    timing_seconds=float(group["seconds"].mean()),
                    conditioning=float(self.conditioning["conditioning"].mean()),
                    iters=int(round(group["iters"].mean())),
                    community_acc=float(community.mean()) if len(community) else None,
                    metadata={"realizations": int(group["seed"].nunique())},
                )
            )
        return out


def _run_trial(
    sg: SpectralGraph,
    template: DatasetManifest,
    trial: int,
    bench_cfg: BenchConfig,
    admm_cfg: AdmmConfig,
    model: Optional[SlogModel],
) -> Tuple[List[dict], List[dict], List[dict]]:
    n = sg.n_nodes
    p = bench_cfg.p_test or template.batch_size
    source_seed = derive_seed(bench_cfg.seed, TRIAL, trial, SOURCES)
    source_model = SourceModel(
        n_nodes=n,
        sparsity=template.theta,
        seed=source_seed,
        mode=template.source_mode,
        communities=sg.graph.communities if template.source_mode == SourceMode.COMMUNITY else None,
    )
    filter_model = FilterModel(
        order=template.filter_order,
        impulsiveness=template.phi,
        seed=derive_seed(bench_cfg.seed, TRIAL, trial, FILTERS),
    )
    noise_seed = derive_seed(bench_cfg.seed, TRIAL, trial, NOISE)

    X, labels = sample_labeled_sources(source_model, p)
    taps = sample_filter(filter_model)
    h = FilterSpec.from_coeffs(taps)
    g0 = ground_truth_response(sg, taps)
    graph = _graph_label(template)
    base = {
        "graph": graph, "N": n, "P": p, "theta": template.theta,
        "L": template.filter_order, "phi": template.phi, "seed": source_seed,
    }

    results, communities, conditioning = [], [], []
    for eta in bench_cfg.eta_sweep:
        Y = synthesize(sg, h, X, eta, noise_seed)
        conditioning.append(
            {"graph": graph, "N": n, "P": p, "eta": eta, "seed": source_seed,
             "conditioning": float("nan") if g0 is None else projector_norm(g0)}
        )
        estimates = []
        admm = run_admm(sg, Y, admm_cfg)
        admm_x = planted_scale(admm.x_hat, admm.g_tilde, g0)
        estimates.append((Method.ADMM, admm_x, admm.g_tilde, admm.seconds, admm.state.iter))
        if model is not None:
            x_hat, g_hat, seconds = infer(model, Y, derive_seed(bench_cfg.seed, TRIAL, trial))
            estimates.append((Method.SLOG, x_hat, g_hat, seconds, model.n_layers))

        for method, x_hat, g_hat, seconds, iters in estimates:
            results.append(
                {
                    **base,
                    "method": method.value,
                    "eta": eta,
                    "re_x": relative_error_signed(x_hat, X),
                    "re_g": float("nan") if g0 is None else relative_error_aligned(g_hat, g0),
                    "acc": support_accuracy(x_hat, X, bench_cfg.kappa),
                    "kappa": bench_cfg.kappa,
                    "seconds": seconds,
                    "iters": iters,
                }
            )
            if labels is not None and sg.graph.communities is not None:
                communities.append(
                    {"method": method.value, "graph": graph, "N": n, "P": p, "eta": eta,
                     "seed": source_seed,
                     "community_acc": community_accuracy(x_hat, labels, sg.graph.communities)}
                )
    logger.debug(f"Trial {trial} done ({len(results)} rows)")
    return results, communities, conditioning


def bench_compare(
    sg: SpectralGraph,
    template: DatasetManifest,
    admm_cfg: Optional[AdmmConfig] = None,
    model: Optional[SlogModel] = None,
    bench_cfg: Optional[BenchConfig] = None,
    config: Optional[Dict[str, Any]] = None,
) -> BenchResult:
    """
    Run both methods on identical fresh realizations drawn like ``template``.

    Args:
        sg: Graph shared by the dataset and the model
        template: Manifest whose theta, L, phi and source mode define the test instances
        admm_cfg: Solver settings
        model: Trained network; ADMM alone is benchmarked when omitted
        bench_cfg: Trials, noise sweep, kappa, P override, seed and worker count
        config: Resolved run configuration to embed in the summary

    Returns:
        BenchResult with one row per (realization, noise level, method)
    """
    admm_cfg = admm_cfg or AdmmConfig()
    bench_cfg = bench_cfg or BenchConfig()
    if model is not None:
        check_same_graph(model, sg)

    logger.info(
        f"Benchmarking {bench_cfg.trials} realizations x {len(bench_cfg.eta_sweep)} noise levels "
        f"on {bench_cfg.jobs} worker(s)"
    )
    outputs = Parallel(n_jobs=bench_cfg.jobs, prefer="threads")(
        delayed(_run_trial)(sg, template, trial, bench_cfg, admm_cfg, model)
        for trial in range(bench_cfg.trials)
    )
    results = [row for out in outputs for row in out[0]]
    communities = [row for out in outputs for row in out[1]]
    conditioning = [row for out in outputs for row in out[2]]
    return BenchResult(
        results=pd.DataFrame(results, columns=RESULT_COLUMNS),
        communities=pd.DataFrame(communities, columns=COMMUNITY_COLUMNS),
        conditioning=pd.DataFrame(conditioning, columns=CONDITIONING_COLUMNS),
        config=dict(config or {}),
    )


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=settings.FLOAT_FORMAT)
    atomic_write_text(path, buffer.getvalue())


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Read a table written by this module; floats come back bit-exact."""
    return pd.read_csv(path, float_precision="round_trip")


def write_results(result: BenchResult, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(result.results, out_dir / RESULTS_FILE)
    _write_csv(result.conditioning, out_dir / CONDITIONING_FILE)
    if len(result.communities):
        _write_csv(result.communities, out_dir / COMMUNITIES_FILE)
    if result.config:
        write_json(out_dir / "config.json", result.config)
    write_json(out_dir / SUMMARY_FILE, summarize(out_dir))
    logger.info(f"Wrote {len(result.results)} result rows to {out_dir}")
    return out_dir


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return frame.astype(object).where(frame.notna(), None).to_dict("records")


def _aggregate(frame: pd.DataFrame, keys: List[str], columns: List[str]) -> pd.DataFrame:
    grouped = frame.groupby(keys, sort=True)
    stats = grouped[columns].agg(["mean", lambda s: s.std(ddof=0)])
    stats.columns = [f"{col}_{'mean' if stat == 'mean' else 'std'}" for col, stat in stats.columns]
    stats["n"] = grouped.size()
    return stats.reset_index()


def summarize(in_dir: Union[str, Path]) -> Dict[str, Any]:
    """
    Aggregate every ``results*.csv`` under ``in_dir`` into mean/std per (method, sweep point).

    Conditioning and community tables are aggregated when present, and the
    SLoG/ADMM time ratio is reported wherever both methods ran.
    """
    in_dir = Path(in_dir)
    paths = sorted(in_dir.glob("results*.csv"))
    if not paths:
        raise FileNotFoundError(f"{in_dir}: no results*.csv files")
    frame = pd.concat([read_csv(p) for p in paths], ignore_index=True)

    summary: Dict[str, Any] = {"sources": [p.name for p in paths]}
    summary["groups"] = _records(_aggregate(frame, GROUP_KEYS, METRICS))

    timing = frame.groupby(GROUP_KEYS, sort=True)["seconds"].mean().unstack("method")
    if Method.ADMM.value in timing and Method.SLOG.value in timing:
        ratio = (timing[Method.SLOG.value] / timing[Method.ADMM.value]).rename("time_ratio")
        summary["time_ratio"] = _records(ratio.reset_index())

    conditioning_path = in_dir / CONDITIONING_FILE
    if conditioning_path.exists():
        conditioning = read_csv(conditioning_path)
        summary["conditioning"] = _records(
            _aggregate(conditioning, ["graph", "N", "P", "eta"], ["conditioning"])
        )

    communities_path = in_dir / COMMUNITIES_FILE
    if communities_path.exists():
        communities = read_csv(communities_path)
        summary["communities"] = _records(_aggregate(communities, GROUP_KEYS, ["community_acc"]))
    return summary
