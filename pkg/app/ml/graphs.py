"""Random graph ensembles (ER, SBM, BA, RG) and the karate club network."""

import logging
from typing import Dict, Mapping, Optional, Tuple

import networkx as nx
import numpy as np

from app.core.errors import ConnectivityError, InvalidGraphParamsError
from app.core.graph import Graph
from app.core.rng import GRAPH, make_rng
from app.models.records import GraphKind

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 100


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidGraphParamsError(message)


def _int_param(params: Mapping[str, float], key: str) -> int:
    _require(key in params, f"missing graph parameter '{key}'")
    value = params[key]
    _require(float(value) == int(value), f"graph parameter '{key}' must be an integer, got {value}")
    return int(value)


def _float_param(params: Mapping[str, float], key: str) -> float:
    _require(key in params, f"missing graph parameter '{key}'")
    return float(params[key])


def block_sizes(n: int, n_communities: int) -> Tuple[int, ...]:
    """Split n nodes into near-equal consecutive blocks, larger blocks first."""
    base, extra = divmod(n, n_communities)
    return tuple(base + (1 if b < extra else 0) for b in range(n_communities))


def _sample(kind: GraphKind, params: Mapping[str, float], rng: np.random.Generator):
    n = _int_param(params, "n") if kind != GraphKind.KARATE else 34
    _require(n >= 2, f"graphs need at least 2 nodes, got {n}")

    if kind == GraphKind.ER:
        p = _float_param(params, "p")
        _require(0 < p <= 1, f"ER edge probability must be in (0, 1], got {p}")
        return nx.erdos_renyi_graph(n, p, seed=rng), None

    if kind == GraphKind.SBM:
        n_c = _int_param(params, "n_communities")
        p_in = _float_param(params, "p_within")
        p_out = _float_param(params, "p_between")
        _require(1 <= n_c <= n, f"need 1 <= n_communities <= {n}, got {n_c}")
        _require(0 <= p_in <= 1 and 0 <= p_out <= 1, "SBM probabilities must lie in [0, 1]")
        sizes = block_sizes(n, n_c)
        probs = [[p_in if a == b else p_out for b in range(n_c)] for a in range(n_c)]
        labels = tuple(b for b, size in enumerate(sizes) for _ in range(size))
        return nx.stochastic_block_model(list(sizes), probs, seed=rng), labels

    if kind == GraphKind.BA:
        m = _int_param(params, "m")
        _require(1 <= m < n, f"BA attachment must satisfy 1 <= m < {n}, got {m}")
        return nx.barabasi_albert_graph(n, m, seed=rng), None

    if kind == GraphKind.RG:
        radius = _float_param(params, "radius")
        _require(radius > 0, f"RG radius must be positive, got {radius}")
        return nx.random_geometric_graph(n, radius, seed=rng), None

    if kind == GraphKind.KARATE:
        g = nx.karate_club_graph()
        labels = tuple(0 if g.nodes[v]["club"] == "Mr. Hi" else 1 for v in range(g.number_of_nodes()))
        return g, labels

    raise InvalidGraphParamsError(f"unknown graph kind '{kind}'")


def gen_graph(kind, params: Optional[Dict[str, float]] = None, seed: int = 0) -> Graph:
    """
    Draw a connected, unweighted graph from an ensemble.

    Args:
        kind: GraphKind or its string value (er, sbm, ba, rg, karate)
        params: er: n, p; sbm: n, n_communities, p_within, p_between; ba: n, m; rg: n, radius
        seed: Graph seed; attempt ``a`` uses the stream (GRAPH, a)

    Returns:
        Graph, with block labels for SBM and karate
    """
    try:
        kind = GraphKind(kind)
    except ValueError as e:
        raise InvalidGraphParamsError(f"unknown graph kind '{kind}'") from e
    params = dict(params or {})

    for attempt in range(MAX_ATTEMPTS):
        g, labels = _sample(kind, params, make_rng(seed, GRAPH, attempt))
        if nx.is_connected(g):
            n = g.number_of_nodes()
            adjacency = nx.to_numpy_array(g, nodelist=range(n), weight=None, dtype=np.float64)
            if attempt:
                logger.debug(f"{kind.value} graph connected after {attempt + 1} draws")
            return Graph(adjacency=adjacency, name=kind.value, communities=labels)

    raise ConnectivityError(
        f"no connected {kind.value} graph with {params} after {MAX_ATTEMPTS} attempts (seed {seed})"
    )
