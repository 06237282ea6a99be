"""
Edge-list text format: one ``u v [w]`` per line, 0-based node ids, optional
weight (default 1.0); lines starting with ``#`` are comments.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from app.core.errors import DuplicateEdgeError, InvalidGraphParamsError
from app.core.graph import Graph
from app.core.storage import atomic_write_text

logger = logging.getLogger(__name__)


def parse_edge_list(text: str, n_nodes: Optional[int] = None, name: str = "edgelist") -> Graph:
    """
    Parse edge-list text into a Graph.

    Args:
        text: File contents
        n_nodes: Node count; defaults to the largest id + 1
        name: Label for the graph

    Returns:
        Graph with a symmetric adjacency matrix
    """
    edges = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise InvalidGraphParamsError(f"line {lineno}: expected 'u v [w]', got '{line}'")
        u, v = int(parts[0]), int(parts[1])
        w = float(parts[2]) if len(parts) == 3 else 1.0
        if u < 0 or v < 0:
            raise InvalidGraphParamsError(f"line {lineno}: node ids must be non-negative")
        if u == v:
            raise InvalidGraphParamsError(f"line {lineno}: self-loop on node {u}")
        key = (min(u, v), max(u, v))
        if key in edges:
            raise DuplicateEdgeError(f"line {lineno}: duplicate edge {key}")
        edges[key] = w

    size = n_nodes if n_nodes is not None else 1 + max((max(k) for k in edges), default=-1)
    adjacency = np.zeros((size, size))
    for (u, v), w in edges.items():
        if v >= size:
            raise InvalidGraphParamsError(f"edge ({u}, {v}) exceeds n_nodes={size}")
        adjacency[u, v] = adjacency[v, u] = w
    return Graph(adjacency=adjacency, name=name)


def read_edge_list(
    path: Union[str, Path], n_nodes: Optional[int] = None, name: Optional[str] = None
) -> Graph:
    path = Path(path)
    graph = parse_edge_list(path.read_text(encoding="utf-8"), n_nodes, name or path.stem)
    logger.debug(f"Read {path}: N={graph.n_nodes}")
    return graph


def format_edge_list(graph: Graph) -> str:
    lines = [f"# {graph.name} N={graph.n_nodes}"]
    rows, cols = np.nonzero(np.triu(graph.adjacency, k=1))
    for u, v in zip(rows, cols):
        w = float(graph.adjacency[u, v])
        lines.append(f"{u} {v}" if w == 1.0 else f"{u} {v} {w!r}")
    return "\n".join(lines) + "\n"


def write_edge_list(graph: Graph, path: Union[str, Path]) -> None:
    atomic_write_text(path, format_edge_list(graph))
