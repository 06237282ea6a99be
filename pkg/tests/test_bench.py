import json

import numpy as np
import pandas as pd
import pytest

from app.core.bench import (
    COMMUNITIES_FILE,
    RESULT_COLUMNS,
    RESULTS_FILE,
    SUMMARY_FILE,
    bench_compare,
    evaluate_admm,
    evaluate_slog,
    planted_scale,
    read_csv,
    summarize,
    write_results,
)
from app.core.errors import GraphMismatchError
from app.core.graph import build_shift
from app.ml.datagen import FilterModel, SourceModel, make_dataset
from app.ml.graphs import gen_graph
from app.ml.slog_net import init_model
from app.ml.train import train
from app.models.records import AdmmConfig, BenchConfig, Method, SourceMode, TrainConfig

FAST = AdmmConfig(max_iters=200)


@pytest.fixture
def template(er8):
    return make_dataset(
        er8,
        SourceModel(n_nodes=8, sparsity=0.25, seed=1),
        FilterModel(order=3, impulsiveness=0.5, seed=2),
        size=8,
        batch=4,
        split="test",
    )


@pytest.fixture
def bench(er8, template):
    model = init_model(8, 2, 2, seed=0, sg=er8)
    cfg = BenchConfig(trials=2, eta_sweep=[0.0, 0.05], seed=3)
    return bench_compare(er8, template.manifest, FAST, model, cfg)


class TestEvaluate:
    def test_admm_report(self, er8, template):
        report = evaluate_admm(er8, template, FAST)
        assert report.method == Method.ADMM
        assert 0.0 <= report.acc <= 1.0
        batches = report.metadata["batches"]
        assert len(batches) == 2
        assert all("seconds" not in row for row in batches)
        assert len(batches[0]["h_hat"]) == 3

    def test_slog_report(self, er8, template):
        report = evaluate_slog(init_model(8, 2, 2, seed=0, sg=er8), template)
        assert report.method == Method.SLOG
        assert report.iters == 2

    def test_slog_rejects_other_graph(self, template):
        other = build_shift(gen_graph("er", {"n": 8, "p": 0.5}, seed=12))
        with pytest.raises(GraphMismatchError):
            evaluate_slog(init_model(8, 2, 2, seed=0, sg=other), template)

    def test_planted_scale(self, rng):
        g0 = rng.uniform(0.5, 2.0, 6)
        x = rng.standard_normal((6, 3))
        np.testing.assert_allclose(planted_scale(x / 4, g0 / 4, g0), x)
        np.testing.assert_array_equal(planted_scale(x, g0, None), x)


class TestBenchCompare:
    def test_rows_per_sweep_point(self, bench):
        frame = bench.results
        assert list(frame.columns) == RESULT_COLUMNS
        assert len(frame) == 2 * 2 * 2
        counts = frame.groupby(["method", "eta"]).size()
        assert counts.tolist() == [2, 2, 2, 2]

    def test_sweep_shares_the_realization(self, bench):
        admm = bench.results[bench.results["method"] == "admm"]
        assert admm.groupby("seed")["eta"].nunique().tolist() == [2, 2]

    def test_parallel_matches_serial(self, er8, template):
        cfg = BenchConfig(trials=3, eta_sweep=[0.0], seed=5)
        serial = bench_compare(er8, template.manifest, FAST, bench_cfg=cfg).results
        parallel = bench_compare(er8, template.manifest, FAST, bench_cfg=cfg.model_copy(update={"jobs": 2})).results
        columns = [c for c in RESULT_COLUMNS if c != "seconds"]
        pd.testing.assert_frame_equal(serial[columns], parallel[columns])

    def test_model_on_other_graph(self, er8, template):
        other = build_shift(gen_graph("er", {"n": 8, "p": 0.5}, seed=12))
        with pytest.raises(GraphMismatchError):
            bench_compare(other, template.manifest, FAST, init_model(8, 2, 2, seed=0, sg=er8))

    def test_reports(self, bench):
        methods = {report.method for report in bench.reports()}
        assert methods == {Method.ADMM, Method.SLOG}

    def test_community_rows(self):
        graph = gen_graph("sbm", {"n": 12, "n_communities": 2, "p_within": 0.8, "p_between": 0.1}, seed=0)
        sg = build_shift(graph)
        ds = make_dataset(
            sg,
            SourceModel(n_nodes=12, sparsity=0.2, seed=1, mode=SourceMode.COMMUNITY, communities=graph.communities),
            FilterModel(order=2, impulsiveness=0.3, seed=2),
            size=4,
            batch=4,
        )
        result = bench_compare(sg, ds.manifest, FAST, bench_cfg=BenchConfig(trials=2, eta_sweep=[0.0]))
        assert len(result.communities) == 2
        assert result.communities["community_acc"].between(0, 1).all()


class TestOutputs:
    def test_csv_round_trip_is_exact(self, bench, tmp_path):
        write_results(bench, tmp_path)
        back = read_csv(tmp_path / RESULTS_FILE)
        pd.testing.assert_frame_equal(back, bench.results, check_exact=True, check_dtype=False)

    def test_header(self, bench, tmp_path):
        write_results(bench, tmp_path)
        header = (tmp_path / RESULTS_FILE).read_text().splitlines()[0]
        assert header == "method,graph,N,P,theta,L,phi,eta,seed,re_x,re_g,acc,kappa,seconds,iters"

    def test_summary(self, bench, tmp_path):
        write_results(bench, tmp_path)
        summary = json.loads((tmp_path / SUMMARY_FILE).read_text())
        assert summary == summarize(tmp_path)
        assert len(summary["groups"]) == 4
        assert all(group["n"] == 2 for group in summary["groups"])
        assert len(summary["time_ratio"]) == 2
        assert not (tmp_path / COMMUNITIES_FILE).exists()

    def test_summary_std_is_population(self, tmp_path):
        frame = pd.DataFrame(
            [
                {"method": "admm", "graph": "er", "N": 8, "P": 4, "theta": 0.2, "L": 3, "phi": 0.5,
                 "eta": 0.0, "seed": s, "re_x": v, "re_g": v, "acc": v, "kappa": 0.1,
                 "seconds": 1.0, "iters": 10}
                for s, v in [(1, 0.0), (2, 1.0)]
            ],
            columns=RESULT_COLUMNS,
        )
        frame.to_csv(tmp_path / RESULTS_FILE, index=False)
        group = summarize(tmp_path)["groups"][0]
        assert group["acc_mean"] == 0.5
        assert group["acc_std"] == 0.5

    def test_summary_without_results(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            summarize(tmp_path)


@pytest.fixture(scope="module")
def reduced_preset():
    """SLoG-Net trained on 40k ER signals (P=400, K=5, d=2, 30 epochs) plus a 10-realization noise sweep."""
    sg = build_shift(gen_graph("er", {"n": 20, "p": 0.3}, seed=0))

    def split(size, seed, name):
        return make_dataset(
            sg,
            SourceModel(n_nodes=20, sparsity=0.15, seed=seed),
            FilterModel(order=5, impulsiveness=1.0, seed=seed + 1),
            size=size,
            batch=400,
            split=name,
        )

    model, _ = train(
        init_model(20, 2, 5, seed=0, sg=sg),
        split(40000, 10, "train"),
        split(400, 20, "val"),
        cfg=TrainConfig(epochs=30),
    )
    cfg = BenchConfig(trials=10, eta_sweep=[0.0, 0.05, 0.1], seed=11)
    return bench_compare(sg, split(400, 30, "test").manifest, AdmmConfig(), model, cfg).results


@pytest.mark.slow
class TestReducedPreset:
    def test_noiseless_support_accuracy(self, reduced_preset):
        slog = reduced_preset[(reduced_preset["method"] == "slog") & (reduced_preset["eta"] == 0.0)]
        assert len(slog) == 10
        assert slog["acc"].mean() >= 0.85

    def test_inference_is_much_faster_than_admm(self, reduced_preset):
        noiseless = reduced_preset[reduced_preset["eta"] == 0.0]
        seconds = noiseless.groupby("method")["seconds"].mean()
        assert seconds["slog"] <= 0.1 * seconds["admm"]

    @pytest.mark.parametrize("method", ["admm", "slog"])
    def test_accuracy_degrades_with_noise(self, reduced_preset, method):
        rows = reduced_preset[reduced_preset["method"] == method]
        acc = rows.groupby("eta")["acc"].mean().sort_index().to_numpy()
        assert np.all(np.diff(acc) <= 0.02)
