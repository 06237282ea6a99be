"""
Lifted operator Z = Y^T V (Khatri-Rao) V and the linear algebra around it.

Z is never formed: Z g~ = vec(V diag(g~) Y~) and Z^T x = diag(V^T unvec(x) Y~^T)
with Y~ = V^T Y. Z^T Z is diagonal with entries z_i = ||row i of Y~||^2, so the
filter updates only need solves against diagonal-plus-low-rank matrices.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import (
    DimensionMismatchError,
    InvalidParameterError,
    NegativeThresholdError,
    SingularSystemError,
    ZeroScaleError,
)

logger = logging.getLogger(__name__)

Z_FLOOR_EPS = 1e-12
DENSE_LIMIT = 10_000


def vec(X: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(X).ravel(order="F")


def unvec(x: np.ndarray, n_nodes: int) -> np.ndarray:
    return np.asarray(x).reshape((n_nodes, -1), order="F")


@dataclass(frozen=True, eq=False)
class LiftedOperator:
    v: np.ndarray
    y_tilde: np.ndarray
    ztz_diag: np.ndarray
    z: np.ndarray
    floored: bool

    @property
    def n_nodes(self) -> int:
        return self.v.shape[0]

    @property
    def n_signals(self) -> int:
        return self.y_tilde.shape[1]

    def apply(self, g_tilde: np.ndarray) -> np.ndarray:
        """unvec(Z g~) as an N x P matrix."""
        return self.v @ (np.asarray(g_tilde)[:, None] * self.y_tilde)

    def adjoint(self, X: np.ndarray) -> np.ndarray:
        """Z^T vec(X) for an N x P matrix ``X``."""
        return np.einsum("ip,ip->i", self.v.T @ X, self.y_tilde)

    def dense(self) -> np.ndarray:
        """Explicit NP x N matrix; only for small verification instances."""
        n, p = self.n_nodes, self.n_signals
        if n * p > DENSE_LIMIT:
            raise DimensionMismatchError(f"refusing to materialize a {n * p} x {n} lifted matrix")
        return (self.y_tilde.T[:, None, :] * self.v[None, :, :]).reshape(p * n, n)


def regularize_z(ztz_diag: np.ndarray, eps: float = Z_FLOOR_EPS):
    """
    Floor z_i below eps * max(z) (eps alone when z vanishes entirely).

    Returns:
        Tuple of (regularized z, whether any entry was floored)
    """
    top = float(np.max(ztz_diag, initial=0.0))
    floor = eps * top if top > 0 else eps
    floored = bool(np.any(ztz_diag < floor))
    return np.maximum(ztz_diag, floor), floored


def build_lifted(V: np.ndarray, Y: np.ndarray, eps: float = Z_FLOOR_EPS) -> LiftedOperator:
    """
    Precompute Y~ = V^T Y and the diagonal of Z^T Z.

    Args:
        V: N x N orthonormal eigenvectors
        Y: N x P observations
        eps: relative floor applied to z

    Returns:
        LiftedOperator
    """
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if V.ndim != 2 or V.shape[0] != V.shape[1] or Y.shape[0] != V.shape[0]:
        raise DimensionMismatchError(f"V {V.shape} and Y {Y.shape} are incompatible")

    y_tilde = V.T @ Y
    ztz_diag = np.einsum("ip,ip->i", y_tilde, y_tilde)
    z, floored = regularize_z(ztz_diag, eps)
    if floored:
        logger.warning(f"Floored {int(np.sum(ztz_diag < z))} diagonal entries of Z^T Z")
    return LiftedOperator(v=V, y_tilde=y_tilde, ztz_diag=ztz_diag, z=z, floored=floored)


def lifted_matvec(op: LiftedOperator, g_tilde: np.ndarray) -> np.ndarray:
    """Z g~ as a length-NP vector."""
    return vec(op.apply(g_tilde))


def lifted_adjoint(op: LiftedOperator, x: np.ndarray) -> np.ndarray:
    """Z^T x for a length-NP vector ``x``."""
    return op.adjoint(unvec(x, op.n_nodes))


class WoodburyFactor:
    """
    Cached inverse of diag(z) + rho M M^T.

    Uses (D + rho M M^T)^{-1} = D^{-1} - rho D^{-1} M (I_d + rho M^T D^{-1} M)^{-1} M^T D^{-1},
    which equals the rho^{-1} I_d + M^T D^{-1} M form of the matrix inversion lemma and
    stays defined at rho = 0. For d = 1 the inner matrix is the scalar zeta.
    """

    def __init__(self, z: np.ndarray, rho: float, M: np.ndarray):
        z = np.asarray(z, dtype=np.float64)
        M = np.asarray(M, dtype=np.float64)
        if M.ndim == 1:
            M = M[:, None]
        if M.shape[0] != z.shape[0]:
            raise DimensionMismatchError(f"M has {M.shape[0]} rows, z has length {z.shape[0]}")
        if rho < 0:
            raise InvalidParameterError(f"rho must be non-negative, got {rho}")
        if np.any(z <= 0):
            raise ZeroScaleError("diag(z) must be positive; regularize z first")

        self.z_inv = 1.0 / z
        self.rho = float(rho)
        self.M = M
        self.w = self.z_inv[:, None] * M
        self.rank = M.shape[1]

        inner = np.eye(self.rank) + self.rho * (M.T @ self.w)
        if self.rank == 1:
            zeta = float(inner[0, 0])
            if not np.isfinite(zeta) or zeta == 0:
                raise SingularSystemError(f"rank-one correction is singular (zeta={zeta})")
            self.inner_inv = np.array([[1.0 / zeta]])
        else:
            try:
                self.inner_inv = np.linalg.inv(inner)
            except np.linalg.LinAlgError as e:
                raise SingularSystemError(f"capacitance matrix is singular: {e}") from e
        if not np.all(np.isfinite(self.inner_inv)):
            raise SingularSystemError("capacitance matrix inverse is not finite")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=np.float64)
        z_inv = self.z_inv if rhs.ndim == 1 else self.z_inv[:, None]
        base = z_inv * rhs
        if self.rho == 0.0:
            return base
        return base - self.rho * (self.w @ (self.inner_inv @ (self.w.T @ rhs)))

    def dense_inverse(self) -> np.ndarray:
        return self.solve(np.eye(len(self.z_inv)))


def woodbury_solve(
    z: np.ndarray, rho: float, M: np.ndarray, rhs: np.ndarray, factor: Optional[WoodburyFactor] = None
) -> np.ndarray:
    """(diag(z) + rho M M^T)^{-1} rhs."""
    factor = factor or WoodburyFactor(z, rho, M)
    return factor.solve(rhs)


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    """Elementwise sign(v) * max(|v| - t, 0)."""
    if t < 0:
        raise NegativeThresholdError(f"threshold must be non-negative, got {t}")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
