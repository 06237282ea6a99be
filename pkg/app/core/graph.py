"""
Graph shift operators, their spectra and polynomial graph filters.

A filter H = sum_l h_l S^l acts in the frequency domain as V diag(Psi_L h) V^T,
where S = V diag(lambda) V^T and Psi_L is the eigenvalue Vandermonde matrix.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from app.core.errors import (
    AsymmetricGraphError,
    DimensionMismatchError,
    IsolatedNodeError,
    NegativeWeightError,
    NonInvertibleFilterError,
    OrderOutOfRangeError,
    SelfLoopError,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
INVERTIBILITY_TOL = 1e-8


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph held as a dense adjacency matrix."""

    adjacency: np.ndarray
    name: str = "graph"
    communities: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatchError(f"adjacency must be square, got shape {a.shape}")
        if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
            raise AsymmetricGraphError(f"adjacency of '{self.name}' is not symmetric")
        if np.any(a < 0):
            raise NegativeWeightError(f"adjacency of '{self.name}' has negative weights")
        if np.any(np.diag(a) != 0):
            raise SelfLoopError(f"adjacency of '{self.name}' has self-loops")
        if self.communities is not None and len(self.communities) != a.shape[0]:
            raise DimensionMismatchError("community labels must cover every node")
        object.__setattr__(self, "adjacency", _frozen(a))
        if self.communities is not None:
            object.__setattr__(self, "communities", tuple(int(c) for c in self.communities))

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


@dataclass(eq=False)
class SpectralGraph:
    """Graph plus its degree-normalized shift operator and eigendecomposition."""

    graph: Graph
    shift: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    psi_l_cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes


@dataclass(frozen=True, eq=False)
class FilterSpec:
    """
    Filter taps ``coeffs`` (length L) and/or a frequency response (length N).

    For a forward filter the response is h~ = Psi_L h; an inverse filter is
    usually given only by its response g~.
    """

    coeffs: Optional[np.ndarray] = None
    freq_response: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.coeffs is None and self.freq_response is None:
            raise DimensionMismatchError("a filter needs coefficients or a frequency response")
        if self.coeffs is not None:
            object.__setattr__(self, "coeffs", _frozen(np.ravel(self.coeffs)))
        if self.freq_response is not None:
            object.__setattr__(self, "freq_response", _frozen(np.ravel(self.freq_response)))

    @classmethod
    def from_coeffs(cls, coeffs) -> "FilterSpec":
        return cls(coeffs=np.asarray(coeffs, dtype=np.float64))

    @classmethod
    def from_response(cls, response) -> "FilterSpec":
        return cls(freq_response=np.asarray(response, dtype=np.float64))

    @property
    def order(self) -> Optional[int]:
        return None if self.coeffs is None else len(self.coeffs)

    def response(self, sg: SpectralGraph) -> np.ndarray:
        """Frequency response on ``sg``'s spectrum."""
        if self.freq_response is not None:
            if len(self.freq_response) != sg.n_nodes:
                raise DimensionMismatchError(
                    f"response has length {len(self.freq_response)}, graph has {sg.n_nodes} nodes"
                )
            return self.freq_response
        return vandermonde(sg, len(self.coeffs)) @ self.coeffs


def _sign_convention(v: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column positive; argmax keeps the lowest index on ties.
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivots, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def build_shift(graph: Graph) -> SpectralGraph:
    """
    Build S = D^{-1/2} A D^{-1/2} and its ascending symmetric eigendecomposition.

    Args:
        graph: Graph with strictly positive degrees

    Returns:
        SpectralGraph with deterministic eigenvector signs
    """
    degrees = graph.degrees
    isolated = np.flatnonzero(degrees <= 0)
    if isolated.size:
        raise IsolatedNodeError(f"graph '{graph.name}' has isolated nodes: {isolated.tolist()}")

    d_inv_sqrt = 1.0 / np.sqrt(degrees)
    shift = d_inv_sqrt[:, None] * graph.adjacency * d_inv_sqrt[None, :]
    shift = 0.5 * (shift + shift.T)

    eigvals, eigvecs = np.linalg.eigh(shift)
    eigvecs = _sign_convention(eigvecs)

    logger.debug(
        f"Spectrum of '{graph.name}': N={graph.n_nodes}, "
        f"lambda in [{eigvals[0]:.4f}, {eigvals[-1]:.4f}]"
    )
    return SpectralGraph(
        graph=graph,
        shift=_frozen(shift),
        eigvecs=_frozen(eigvecs),
        eigvals=_frozen(eigvals),
    )


def vandermonde(sg: SpectralGraph, order: int) -> np.ndarray:
    """N x L matrix with entries lambda_i^(j-1); cached per order."""
    if not 1 <= order <= sg.n_nodes:
        raise OrderOutOfRangeError(f"filter order must be in [1, {sg.n_nodes}], got {order}")
    with sg._lock:
        psi = sg.psi_l_cache.get(order)
        if psi is None:
            psi = _frozen(np.vander(sg.eigvals, order, increasing=True))
            sg.psi_l_cache[order] = psi
    return psi


def gft(sg: SpectralGraph, signals: np.ndarray) -> np.ndarray:
    """Graph Fourier transform V^T x."""
    return sg.eigvecs.T @ signals


def igft(sg: SpectralGraph, spectra: np.ndarray) -> np.ndarray:
    return sg.eigvecs @ spectra


def _as_signals(sg: SpectralGraph, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != sg.n_nodes or X.ndim > 2:
        raise DimensionMismatchError(f"signals of shape {X.shape} do not live on {sg.n_nodes} nodes")
    return X


def apply_filter(sg: SpectralGraph, h: FilterSpec, X: np.ndarray) -> np.ndarray:
    """Apply H = V diag(h~) V^T to the columns of ``X``."""
    X = _as_signals(sg, X)
    response = h.response(sg)
    spectra = gft(sg, X)
    if X.ndim == 1:
        return igft(sg, response * spectra)
    return igft(sg, response[:, None] * spectra)


def apply_filter_vertex(sg: SpectralGraph, coeffs: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Vertex-domain form sum_l h_l S^l X (Horner recursion)."""
    X = _as_signals(sg, X)
    coeffs = np.ravel(coeffs)
    if not 1 <= len(coeffs) <= sg.n_nodes:
        raise OrderOutOfRangeError(f"filter order must be in [1, {sg.n_nodes}], got {len(coeffs)}")
    out = coeffs[-1] * X
    for h_l in coeffs[-2::-1]:
        out = sg.shift @ out + h_l * X
    return out


def check_invertibility(h_tilde: np.ndarray, tol: float = INVERTIBILITY_TOL) -> bool:
    """True iff min |h~_i| > tol * max |h~_i|."""
    magnitudes = np.abs(np.ravel(h_tilde))
    if magnitudes.size == 0:
        return False
    return bool(magnitudes.min() > tol * magnitudes.max())


def inverse_response(h_tilde: np.ndarray, tol: float = INVERTIBILITY_TOL) -> np.ndarray:
    """Frequency response g~ = 1 / h~ of the inverse filter."""
    h_tilde = np.asarray(h_tilde, dtype=np.float64)
    if not check_invertibility(h_tilde, tol):
        raise NonInvertibleFilterError(
            f"filter response vanishes (min |h~| = {np.min(np.abs(h_tilde)):.3e})"
        )
    return 1.0 / h_tilde


@dataclass(frozen=True, eq=False)
class FilterFit:
    coeffs: np.ndarray
    residual: float
    rank: int
    rank_deficient: bool


def recover_filter_coeffs(sg: SpectralGraph, g_tilde: np.ndarray, order: int) -> FilterFit:
    """
    Least-squares taps h with Psi_L h ~= 1 / g~.

    Rank deficiency (e.g. repeated eigenvalues with L close to N) is reported
    in the result; the minimum-norm solution is returned in that case.
    """
    g_tilde = np.asarray(g_tilde, dtype=np.float64)
    if g_tilde.shape != (sg.n_nodes,):
        raise DimensionMismatchError(f"g~ must have length {sg.n_nodes}, got shape {g_tilde.shape}")
    if np.any(g_tilde == 0):
        raise NonInvertibleFilterError("g~ has zero entries; 1/g~ is undefined")

    psi = vandermonde(sg, order)
    target = 1.0 / g_tilde
    coeffs, _, rank, _ = np.linalg.lstsq(psi, target, rcond=None)
    residual = float(np.linalg.norm(psi @ coeffs - target))
    deficient = int(rank) < order
    if deficient:
        logger.warning(f"Vandermonde matrix of order {order} has rank {rank}; returning min-norm taps")
    return FilterFit(coeffs=coeffs, residual=residual, rank=int(rank), rank_deficient=deficient)


def projector_norm(g_tilde: np.ndarray) -> float:
    """||(I - 11^T/N) g~||_2, the conditioning diagnostic of the recovery problem."""
    g_tilde = np.ravel(np.asarray(g_tilde, dtype=np.float64))
    return float(np.linalg.norm(g_tilde - g_tilde.mean()))
