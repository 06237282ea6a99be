import json

import numpy as np
import pytest

from app.core.errors import (
    ConnectivityError,
    CorruptPayloadError,
    DivisibilityError,
    InvalidGraphParamsError,
    VersionMismatchError,
)
from app.core.graph import FilterSpec, apply_filter, build_shift
from app.ml.datagen import (
    GRAPH_FILE,
    FilterModel,
    SourceModel,
    describe_graph,
    load_any,
    load_bundle,
    load_dataset,
    load_graph,
    make_dataset,
    regenerate,
    sample_filter,
    sample_labeled_sources,
    sample_sources,
    save_bundle,
    save_dataset,
    synthesize,
)
from app.ml.graphs import block_sizes, gen_graph
from app.models.records import GraphDescriptor, SourceMode

ER_PARAMS = {"n": 20, "p": 0.3}


class TestGenGraph:
    def test_complete_er_graph(self):
        graph = gen_graph("er", {"n": 3, "p": 1.0}, seed=0)
        np.testing.assert_array_equal(graph.adjacency, np.ones((3, 3)) - np.eye(3))

    def test_same_seed_same_graph(self):
        a = gen_graph("er", ER_PARAMS, seed=5)
        b = gen_graph("er", ER_PARAMS, seed=5)
        np.testing.assert_array_equal(a.adjacency, b.adjacency)

    def test_seeds_differ(self):
        assert not np.array_equal(gen_graph("er", ER_PARAMS, seed=1).adjacency, gen_graph("er", ER_PARAMS, seed=2).adjacency)

    def test_sbm_blocks(self):
        graph = gen_graph("sbm", {"n": 60, "n_communities": 3, "p_within": 0.8, "p_between": 0.05}, seed=2)
        labels = np.array(graph.communities)
        assert block_sizes(60, 3) == (20, 20, 20)
        assert np.bincount(labels).tolist() == [20, 20, 20]
        same = labels[:, None] == labels[None, :]
        off_diag = ~np.eye(60, dtype=bool)
        within = graph.adjacency[same & off_diag].mean()
        between = graph.adjacency[~same].mean()
        assert within > 4 * between

    def test_sbm_densities_over_seeds(self):
        within, between = [], []
        for seed in range(100):
            graph = gen_graph("sbm", {"n": 20, "n_communities": 3, "p_within": 0.8, "p_between": 0.2}, seed=seed)
            labels = np.array(graph.communities)
            same = labels[:, None] == labels[None, :]
            off_diag = ~np.eye(20, dtype=bool)
            within.append(graph.adjacency[same & off_diag].mean())
            between.append(graph.adjacency[~same].mean())
        assert np.mean(within) == pytest.approx(0.8, abs=0.1)
        assert np.mean(between) == pytest.approx(0.2, abs=0.1)

    def test_uneven_blocks(self):
        assert block_sizes(20, 3) == (7, 7, 6)

    def test_karate(self):
        graph = gen_graph("karate")
        assert graph.n_nodes == 34
        assert graph.adjacency.sum() == 2 * 78
        assert graph.communities[0] == 0
        assert set(graph.communities) == {0, 1}

    def test_ba_and_rg_are_connected(self):
        for kind, params in [("ba", {"n": 30, "m": 2}), ("rg", {"n": 30, "radius": 0.5})]:
            graph = gen_graph(kind, params, seed=3)
            assert np.all(graph.degrees > 0)

    def test_sparse_er_never_connects(self):
        with pytest.raises(ConnectivityError):
            gen_graph("er", {"n": 20, "p": 0.01}, seed=0)

    @pytest.mark.parametrize(
        "kind,params",
        [
            ("er", {"n": 20, "p": 0.0}),
            ("er", {"p": 0.3}),
            ("er", {"n": 2.5, "p": 0.3}),
            ("ba", {"n": 10, "m": 10}),
            ("rg", {"n": 10, "radius": -1.0}),
            ("sbm", {"n": 10, "n_communities": 11, "p_within": 0.5, "p_between": 0.1}),
            ("lattice", {"n": 10}),
        ],
    )
    def test_invalid_params(self, kind, params):
        with pytest.raises(InvalidGraphParamsError):
            gen_graph(kind, params)


class TestSources:
    def test_zero_sparsity(self):
        assert not sample_sources(SourceModel(n_nodes=10, sparsity=0.0, seed=1), 50).any()

    def test_full_support(self):
        assert np.all(sample_sources(SourceModel(n_nodes=10, sparsity=1.0, seed=1), 50) != 0)

    def test_moments(self):
        X = sample_sources(SourceModel(n_nodes=50, sparsity=0.2, seed=3), 2000)
        assert abs(np.mean(X != 0) - 0.2) < 0.01
        assert abs(np.std(X[X != 0]) - 1.0) < 0.05

    def test_deterministic(self):
        model = SourceModel(n_nodes=8, sparsity=0.3, seed=9)
        np.testing.assert_array_equal(sample_sources(model, 20), sample_sources(model, 20))

    def test_community_sources_stay_in_one_block(self):
        graph = gen_graph("sbm", {"n": 20, "n_communities": 2, "p_within": 0.7, "p_between": 0.1}, seed=1)
        labels = np.array(graph.communities)
        model = SourceModel(
            n_nodes=20, sparsity=0.15, seed=4, mode=SourceMode.COMMUNITY, communities=graph.communities
        )
        X, blocks = sample_labeled_sources(model, 30)
        for p in range(30):
            support = np.flatnonzero(X[:, p])
            assert support.size == 3
            assert np.all(labels[support] == blocks[p])

    def test_community_mode_needs_labels(self):
        with pytest.raises(InvalidGraphParamsError):
            SourceModel(n_nodes=5, sparsity=0.2, seed=0, mode=SourceMode.COMMUNITY)

    def test_sparsity_range(self):
        with pytest.raises(ValueError):
            SourceModel(n_nodes=5, sparsity=1.5, seed=0)


class TestFilters:
    def test_no_impulsiveness_is_identity(self):
        np.testing.assert_array_equal(sample_filter(FilterModel(order=4, impulsiveness=0.0, seed=0)), [1.0, 0, 0, 0])

    def test_unit_l1_norm(self):
        model = FilterModel(order=5, impulsiveness=1.0, seed=2)
        for index in range(20):
            assert np.abs(sample_filter(model, index)).sum() == pytest.approx(1.0)

    def test_first_tap_dominates(self):
        model = FilterModel(order=5, impulsiveness=0.5, seed=6)
        taps = np.abs([sample_filter(model, index) for index in range(200)])
        assert np.all(taps[:, 0].mean() > taps[:, 1:].mean(axis=0))

    def test_streams_per_index(self):
        model = FilterModel(order=5, impulsiveness=1.0, seed=2)
        np.testing.assert_array_equal(sample_filter(model, 3), sample_filter(model, 3))
        assert not np.array_equal(sample_filter(model, 3), sample_filter(model, 4))


class TestSynthesize:
    def test_noiseless_is_pure_filtering(self, er20, rng):
        X = rng.standard_normal((20, 6))
        h = FilterSpec.from_coeffs([0.6, 0.3, 0.1])
        np.testing.assert_array_equal(synthesize(er20, h, X, eta=0.0, seed=1), apply_filter(er20, h, X))

    def test_noise_is_uniform(self, er20):
        X = np.zeros((20, 5000))
        noise = synthesize(er20, FilterSpec.from_coeffs([1.0]), X, eta=0.1, seed=1)
        assert np.max(np.abs(noise)) <= 0.1
        assert np.var(noise) == pytest.approx(0.01 / 3, rel=0.02)

    def test_negative_noise_level(self, er20):
        with pytest.raises(ValueError):
            synthesize(er20, FilterSpec.from_coeffs([1.0]), np.zeros((20, 2)), eta=-0.1, seed=0)


def small_dataset(sg, size=12, batch=4, eta=0.05, split="train", graph=None):
    return make_dataset(
        sg,
        SourceModel(n_nodes=sg.n_nodes, sparsity=0.2, seed=11),
        FilterModel(order=3, impulsiveness=0.8, seed=12),
        size=size,
        batch=batch,
        eta=eta,
        noise_seed=13,
        split=split,
        graph=graph,
    )


class TestMakeDataset:
    def test_batches(self, er20):
        ds = small_dataset(er20)
        assert ds.n_batches == 3
        assert ds.H.shape == (3, 3)
        X_1, Y_1 = ds.batch(1)
        expected = synthesize(er20, ds.batch_filter(1), X_1, eta=0.05, seed=13, index=1)
        np.testing.assert_array_equal(Y_1, expected)

    def test_batch_size_must_divide(self, er20):
        with pytest.raises(DivisibilityError):
            small_dataset(er20, size=10, batch=4)

    def test_batch_index_out_of_range(self, er20):
        with pytest.raises(IndexError):
            small_dataset(er20).batch(3)

    def test_regenerate_is_bit_identical(self, er20):
        ds = small_dataset(er20)
        again = regenerate(ds.manifest, er20)
        for a, b in [(ds.X, again.X), (ds.Y, again.Y), (ds.H, again.H)]:
            np.testing.assert_array_equal(a, b)

    def test_manifest_fields(self, er20):
        manifest = small_dataset(er20).manifest
        assert (manifest.n_signals, manifest.batch_size, manifest.n_batches) == (12, 4, 3)
        assert manifest.graph.n_nodes == 20
        assert manifest.non_invertible_batches == []


class TestPersistence:
    def test_round_trip(self, er20, tmp_path):
        ds = small_dataset(er20)
        save_dataset(ds, tmp_path / "train")
        back = load_dataset(tmp_path / "train")
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.Y, ds.Y)
        np.testing.assert_array_equal(back.H, ds.H)
        assert back.manifest.shapes["X"] == [20, 12]

    def test_community_labels_round_trip(self, tmp_path):
        graph = gen_graph("sbm", {"n": 12, "n_communities": 2, "p_within": 0.8, "p_between": 0.2}, seed=0)
        sg = build_shift(graph)
        ds = make_dataset(
            sg,
            SourceModel(n_nodes=12, sparsity=0.2, seed=1, mode=SourceMode.COMMUNITY, communities=graph.communities),
            FilterModel(order=2, impulsiveness=0.5, seed=2),
            size=8,
            batch=4,
        )
        save_dataset(ds, tmp_path / "ds")
        np.testing.assert_array_equal(load_dataset(tmp_path / "ds").labels, ds.labels)

    def test_truncated_payload(self, er20, tmp_path):
        save_dataset(small_dataset(er20), tmp_path / "ds")
        path = tmp_path / "ds" / "Y.f64le"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorruptPayloadError):
            load_dataset(tmp_path / "ds")

    def test_unknown_format_version(self, er20, tmp_path):
        save_dataset(small_dataset(er20), tmp_path / "ds")
        manifest = tmp_path / "ds" / "manifest.json"
        raw = json.loads(manifest.read_text())
        raw["format_version"] = 99
        manifest.write_text(json.dumps(raw))
        with pytest.raises(VersionMismatchError):
            load_dataset(tmp_path / "ds")

    def test_bundle(self, tmp_path):
        graph = gen_graph("er", ER_PARAMS, seed=3)
        sg = build_shift(graph)
        descriptor = describe_graph(graph, kind="er", params=ER_PARAMS, seed=3, edge_list=GRAPH_FILE)
        splits = {name: small_dataset(sg, split=name, graph=descriptor) for name in ("train", "val", "test")}
        save_bundle(tmp_path / "data", graph, splits)

        bundle = load_bundle(tmp_path / "data")
        np.testing.assert_array_equal(bundle.graph.adjacency, graph.adjacency)
        assert set(bundle.splits) == {"train", "val", "test"}
        np.testing.assert_array_equal(bundle["val"].Y, splits["val"].Y)

        loaded_graph, test = load_any(tmp_path / "data")
        assert test.manifest.split == "test"
        np.testing.assert_array_equal(loaded_graph.adjacency, graph.adjacency)
        _, train = load_any(tmp_path / "data" / "train")
        assert train.manifest.split == "train"

    def test_empty_bundle(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_bundle(tmp_path)

    def test_graph_regenerated_from_ensemble(self):
        graph = gen_graph("er", ER_PARAMS, seed=3)
        descriptor = describe_graph(graph, kind="er", params=ER_PARAMS, seed=3)
        np.testing.assert_array_equal(load_graph(descriptor).adjacency, graph.adjacency)

    def test_graph_fingerprint_mismatch(self):
        descriptor = GraphDescriptor(kind="er", n_nodes=20, params=ER_PARAMS, seed=3, fingerprint="0" * 64)
        with pytest.raises(CorruptPayloadError):
            load_graph(descriptor)
