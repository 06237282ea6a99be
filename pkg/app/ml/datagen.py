"""
Synthetic blind-deconvolution data: sparse sources, random filters, noisy
observations, batched datasets and their on-disk layout.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.edgelist import read_edge_list, write_edge_list
from app.core.errors import (
    CorruptPayloadError,
    DegenerateFilterError,
    DimensionMismatchError,
    DivisibilityError,
    InvalidGraphParamsError,
    InvalidParameterError,
    VersionMismatchError,
)
from app.core.graph import FilterSpec, Graph, SpectralGraph, apply_filter, check_invertibility
from app.core.rng import FILTERS, NOISE, SOURCES, make_rng
from app.core.storage import fingerprint, read_f64, read_json, write_f64, write_json
from app.ml.graphs import gen_graph
from app.models.records import (
    DATASET_FORMAT_VERSION,
    DatasetManifest,
    GraphDescriptor,
    SourceMode,
)

logger = logging.getLogger(__name__)

MAX_FILTER_DRAWS = 10
DEGENERATE_L1 = 1e-12
SPLITS = ("train", "val", "test")
GRAPH_FILE = "graph.edges"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class SourceModel:
    """Bernoulli-Gaussian sources, or community-localized sources when ``mode`` is community."""

    n_nodes: int
    sparsity: float
    seed: int
    mode: SourceMode = SourceMode.BERNOULLI
    communities: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise InvalidParameterError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if self.mode == SourceMode.COMMUNITY and self.communities is None:
            raise InvalidGraphParamsError("community sources need a graph with community labels")


@dataclass(frozen=True)
class FilterModel:
    order: int
    impulsiveness: float
    seed: int

    def __post_init__(self):
        if self.order < 1:
            raise InvalidParameterError(f"filter order must be >= 1, got {self.order}")
        if self.impulsiveness < 0:
            raise InvalidParameterError(f"impulsiveness must be >= 0, got {self.impulsiveness}")


def _bernoulli_sources(model: SourceModel, count: int, rng: np.random.Generator) -> np.ndarray:
    shape = (model.n_nodes, count)
    support = rng.random(shape) < model.sparsity
    amplitudes = rng.standard_normal(shape)
    return np.where(support, amplitudes, 0.0)


def _community_sources(
    model: SourceModel, count: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(model.communities)
    blocks = np.unique(labels)
    active = int(round(model.sparsity * model.n_nodes))
    X = np.zeros((model.n_nodes, count))
    chosen_blocks = np.empty(count, dtype=np.int64)
    for p in range(count):
        block = blocks[rng.integers(len(blocks))]
        members = np.flatnonzero(labels == block)
        k = min(active, members.size)
        nodes = rng.choice(members, size=k, replace=False)
        X[nodes, p] = rng.standard_normal(k)
        chosen_blocks[p] = block
    return X, chosen_blocks


def sample_labeled_sources(model: SourceModel, count: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Draw ``count`` source signals.

    Returns:
        Tuple of (N x count matrix, per-column community labels or None)
    """
    if count < 1:
        raise InvalidParameterError(f"need at least one signal, got {count}")
    rng = make_rng(model.seed, SOURCES)
    if model.mode == SourceMode.COMMUNITY:
        return _community_sources(model, count, rng)
    return _bernoulli_sources(model, count, rng), None


def sample_sources(model: SourceModel, count: int) -> np.ndarray:
    """X = Omega o R with Omega ~ Bernoulli(theta) and R ~ Normal(0, 1)."""
    return sample_labeled_sources(model, count)[0]


def sample_filter(model: FilterModel, index: int = 0) -> np.ndarray:
    """
    Draw taps h = (e_1 + phi b) / ||e_1 + phi b||_1 with b ~ Normal(0, I_L).

    Args:
        model: Order, impulsiveness and seed
        index: Filter number; each index has its own stream (FILTERS, index)

    Returns:
        Length-L vector with unit l1 norm
    """
    rng = make_rng(model.seed, FILTERS, index)
    e1 = np.zeros(model.order)
    e1[0] = 1.0
    for _ in range(MAX_FILTER_DRAWS):
        taps = e1 + model.impulsiveness * rng.standard_normal(model.order)
        l1 = float(np.abs(taps).sum())
        if l1 >= DEGENERATE_L1:
            return taps / l1
    raise DegenerateFilterError(
        f"||e1 + phi b||_1 < {DEGENERATE_L1} in {MAX_FILTER_DRAWS} draws (filter {index})"
    )


def _synthesize(
    sg: SpectralGraph, h: FilterSpec, X: np.ndarray, eta: float, seed: int, index: int
) -> Tuple[np.ndarray, bool]:
    if eta < 0:
        raise InvalidParameterError(f"noise level must be >= 0, got {eta}")
    invertible = check_invertibility(h.response(sg))
    if not invertible:
        logger.warning(f"Filter {index} is not invertible on '{sg.graph.name}'")
    Y = apply_filter(sg, h, X)
    if eta > 0:
        Y = Y + eta * make_rng(seed, NOISE, index).uniform(-1.0, 1.0, size=Y.shape)
    return Y, invertible


def synthesize(
    sg: SpectralGraph, h: FilterSpec, X: np.ndarray, eta: float, seed: int, index: int = 0
) -> np.ndarray:
    """Y = V diag(Psi_L h) V^T X + eta U with U ~ Uniform(-1, 1); eta = 0 adds nothing."""
    return _synthesize(sg, h, X, eta, seed, index)[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Signals stored batch-contiguously: batch q owns columns [qP, (q+1)P)."""

    X: np.ndarray
    Y: np.ndarray
    H: np.ndarray
    manifest: DatasetManifest
    labels: Optional[np.ndarray] = field(default=None)

    @property
    def n_batches(self) -> int:
        return self.manifest.n_batches

    @property
    def batch_size(self) -> int:
        return self.manifest.batch_size

    def columns(self, q: int) -> slice:
        if not 0 <= q < self.n_batches:
            raise IndexError(f"batch {q} out of range [0, {self.n_batches})")
        return slice(q * self.batch_size, (q + 1) * self.batch_size)

    def batch(self, q: int) -> Tuple[np.ndarray, np.ndarray]:
        cols = self.columns(q)
        return self.X[:, cols], self.Y[:, cols]

    def batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for q in range(self.n_batches):
            yield self.batch(q)

    def batch_filter(self, q: int) -> FilterSpec:
        return FilterSpec.from_coeffs(self.H[:, q])

    def batch_labels(self, q: int) -> Optional[np.ndarray]:
        return None if self.labels is None else self.labels[self.columns(q)]


def describe_graph(
    graph: Graph,
    kind=None,
    params: Optional[Dict[str, float]] = None,
    seed: int = 0,
    edge_list: Optional[str] = None,
) -> GraphDescriptor:
    return GraphDescriptor(
        kind=kind,
        n_nodes=graph.n_nodes,
        params=dict(params or {}),
        seed=seed,
        edge_list=edge_list,
        communities=None if graph.communities is None else list(graph.communities),
        fingerprint=fingerprint(graph.adjacency),
    )


def make_dataset(
    sg: SpectralGraph,
    source_model: SourceModel,
    filter_model: FilterModel,
    size: int,
    batch: int,
    eta: float = 0.0,
    noise_seed: Optional[int] = None,
    split: str = "train",
    graph: Optional[GraphDescriptor] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Dataset:
    """
    Sample |T| = ``size`` sources, split them into Q = size / batch mini-batches and
    filter each batch with its own random filter.

    Args:
        sg: Spectral graph the data lives on
        source_model: Source sampler
        filter_model: Filter sampler; batch q uses filter index q
        size: Number of signals |T|
        batch: Mini-batch size P
        eta: Noise level
        noise_seed: Seed for the noise streams; defaults to the source seed
        split: Name recorded in the manifest
        graph: Graph descriptor for the manifest; derived from ``sg`` when omitted
        config: Resolved run configuration to embed

    Returns:
        Dataset
    """
    if batch < 1 or size < 1 or size % batch:
        raise DivisibilityError(f"batch size {batch} must divide dataset size {size}")
    if source_model.n_nodes != sg.n_nodes:
        raise DimensionMismatchError(
            f"source model has {source_model.n_nodes} nodes, graph has {sg.n_nodes}"
        )
    noise_seed = source_model.seed if noise_seed is None else noise_seed
    n_batches = size // batch

    X, labels = sample_labeled_sources(source_model, size)
    Y = np.empty_like(X)
    H = np.empty((filter_model.order, n_batches))
    non_invertible = []
    for q in range(n_batches):
        cols = slice(q * batch, (q + 1) * batch)
        H[:, q] = sample_filter(filter_model, q)
        Y[:, cols], invertible = _synthesize(
            sg, FilterSpec.from_coeffs(H[:, q]), X[:, cols], eta, noise_seed, q
        )
        if not invertible:
            non_invertible.append(q)

    manifest = DatasetManifest(
        split=split,
        n_nodes=sg.n_nodes,
        n_signals=size,
        batch_size=batch,
        n_batches=n_batches,
        theta=source_model.sparsity,
        source_mode=source_model.mode,
        filter_order=filter_model.order,
        phi=filter_model.impulsiveness,
        eta=eta,
        source_seed=source_model.seed,
        filter_seed=filter_model.seed,
        noise_seed=noise_seed,
        graph=graph or describe_graph(sg.graph),
        non_invertible_batches=non_invertible,
        config=dict(config or {}),
    )
    logger.info(
        f"Generated {split} split: N={sg.n_nodes}, |T|={size}, P={batch}, Q={n_batches}, eta={eta}"
    )
    return Dataset(X=X, Y=Y, H=H, manifest=manifest, labels=labels)


def regenerate(manifest: DatasetManifest, sg: SpectralGraph) -> Dataset:
    """Rebuild a dataset from its manifest; the result is bit-identical to the original."""
    source_model = SourceModel(
        n_nodes=manifest.n_nodes,
        sparsity=manifest.theta,
        seed=manifest.source_seed,
        mode=manifest.source_mode,
        communities=sg.graph.communities if manifest.source_mode == SourceMode.COMMUNITY else None,
    )
    filter_model = FilterModel(
        order=manifest.filter_order, impulsiveness=manifest.phi, seed=manifest.filter_seed
    )
    return make_dataset(
        sg,
        source_model,
        filter_model,
        size=manifest.n_signals,
        batch=manifest.batch_size,
        eta=manifest.eta,
        noise_seed=manifest.noise_seed,
        split=manifest.split,
        graph=manifest.graph,
        config=manifest.config,
    )


def save_dataset(ds: Dataset, directory: Union[str, Path]) -> Path:
    """Write payloads first, then the manifest that describes them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {
        "X": list(write_f64(directory / "X.f64le", ds.X)),
        "Y": list(write_f64(directory / "Y.f64le", ds.Y)),
        "H": list(write_f64(directory / "H.f64le", ds.H)),
    }
    if ds.labels is not None:
        shapes["C"] = list(write_f64(directory / "C.f64le", ds.labels))
    manifest = ds.manifest.model_copy(update={"shapes": shapes})
    write_json(directory / MANIFEST_FILE, manifest.model_dump(mode="json"))
    logger.debug(f"Saved {manifest.split} split to {directory}")
    return directory


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    raw = read_json(directory / MANIFEST_FILE)
    version = raw.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise VersionMismatchError(
            f"{directory}: dataset format_version {version}, expected {DATASET_FORMAT_VERSION}"
        )
    manifest = DatasetManifest.model_validate(raw)
    for key in ("X", "Y", "H"):
        if key not in manifest.shapes:
            raise CorruptPayloadError(f"{directory}: manifest lacks the shape of {key}")

    X = read_f64(directory / "X.f64le", manifest.shapes["X"])
    Y = read_f64(directory / "Y.f64le", manifest.shapes["Y"])
    H = read_f64(directory / "H.f64le", manifest.shapes["H"])
    expected = (manifest.n_nodes, manifest.n_signals)
    if X.shape != expected or Y.shape != expected or H.shape != (manifest.filter_order, manifest.n_batches):
        raise CorruptPayloadError(f"{directory}: payload shapes disagree with the manifest")
    labels = None
    if "C" in manifest.shapes:
        labels = read_f64(directory / "C.f64le", manifest.shapes["C"]).astype(np.int64)
    return Dataset(X=X, Y=Y, H=H, manifest=manifest, labels=labels)


def load_graph(descriptor: GraphDescriptor, base_dir: Union[str, Path, None] = None) -> Graph:
    """
    Recover the graph a manifest refers to: the stored edge list when there is one,
    otherwise a fresh draw from the recorded ensemble and seed.
    """
    if descriptor.edge_list is not None:
        path = Path(base_dir or ".") / descriptor.edge_list
        parsed = read_edge_list(path, n_nodes=descriptor.n_nodes)
        graph = Graph(
            adjacency=parsed.adjacency,
            name=descriptor.kind.value if descriptor.kind else parsed.name,
            communities=descriptor.communities,
        )
    elif descriptor.kind is not None:
        graph = gen_graph(descriptor.kind, descriptor.params, descriptor.seed)
    else:
        raise InvalidGraphParamsError("graph descriptor names neither an edge list nor an ensemble")

    if descriptor.fingerprint is not None and fingerprint(graph.adjacency) != descriptor.fingerprint:
        raise CorruptPayloadError(f"graph does not match the recorded fingerprint {descriptor.fingerprint[:12]}")
    return graph


@dataclass(frozen=True, eq=False)
class Bundle:
    graph: Graph
    splits: Dict[str, Dataset]

    def __getitem__(self, split: str) -> Dataset:
        if split not in self.splits:
            raise KeyError(f"bundle has no '{split}' split")
        return self.splits[split]


def save_bundle(root: Union[str, Path], graph: Graph, splits: Dict[str, Dataset]) -> Path:
    """Write ``root/graph.edges`` and one dataset directory per split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_edge_list(graph, root / GRAPH_FILE)
    for name, ds in splits.items():
        save_dataset(ds, root / name)
    logger.info(f"Wrote data bundle {root} ({', '.join(splits)})")
    return root


def load_bundle(root: Union[str, Path], splits: Sequence[str] = SPLITS) -> Bundle:
    """Load the splits present under ``root`` plus their shared graph."""
    root = Path(root)
    loaded = {name: load_dataset(root / name) for name in splits if (root / name / MANIFEST_FILE).exists()}
    if not loaded:
        raise FileNotFoundError(f"{root}: no dataset splits found")
    descriptor = next(iter(loaded.values())).manifest.graph
    graph = load_graph(descriptor, base_dir=root)
    return Bundle(graph=graph, splits=loaded)


def load_any(path: Union[str, Path]) -> Tuple[Graph, Dataset]:
    """
    Load a single dataset, either a bundle root (its test split) or one split directory.

    Returns:
        Tuple of (graph, dataset)
    """
    path = Path(path)
    if (path / MANIFEST_FILE).exists():
        ds = load_dataset(path)
        return load_graph(ds.manifest.graph, base_dir=path.parent), ds
    bundle = load_bundle(path, splits=("test",))
    return bundle.graph, bundle["test"]
