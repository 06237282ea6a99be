"""
SLoG-Net: the ADMM iterations for graph blind deconvolution unrolled into K
trainable layers.

Layer k maps the states (x, lambda, mu) of index k-1 to index k through

    filter      g~ = (Z^T Z + rho2 M M^T)^{-1} [Z^T (x - rho1 lambda) + M (rho2 m - rho1 mu)]
    sources     x  = S_tau(alpha1 Z g~ + alpha2 lambda)
    multipliers lambda = beta1 lambda + beta2 Z g~ + beta3 x,   mu = gamma mu + M^T g~ + m

with Z the lifted operator of the current batch. Every layer has its own
parameters; rho1, rho2 and tau are kept non-negative by projection.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.core.errors import (
    DimensionMismatchError,
    InvalidParameterError,
    SingularSystemError,
    StaleTraceError,
    ZeroScaleError,
)
from app.core.graph import SpectralGraph
from app.core.lifted import build_lifted
from app.core.rng import INIT_STATE, MODEL_INIT, make_rng
from app.models.records import TrainConfig

logger = logging.getLogger(__name__)

DTYPE = torch.float64

SCALAR_FIELDS = ("rho1", "rho2", "alpha1", "alpha2", "tau", "beta1", "beta2", "beta3", "gamma")
FIELD_ORDER = SCALAR_FIELDS + ("M", "m")
NON_NEGATIVE = ("rho1", "rho2", "tau")

ArrayLike = Union[np.ndarray, torch.Tensor]


def _tensor(value: ArrayLike) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    return torch.tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


@dataclass(eq=False)
class LayerParams:
    """Plain numeric values of one layer, in checkpoint field order."""

    rho1: float
    rho2: float
    alpha1: float
    alpha2: float
    tau: float
    beta1: float
    beta2: float
    beta3: float
    gamma: float
    M: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.M.ndim == 1:
            self.M = self.M[:, None]
        self.m = np.ravel(np.asarray(self.m, dtype=np.float64))
        if self.M.shape[1] != self.m.shape[0]:
            raise DimensionMismatchError(f"M is {self.M.shape}, m has length {self.m.shape[0]}")

    @property
    def n_nodes(self) -> int:
        return self.M.shape[0]

    @property
    def constraint_dim(self) -> int:
        return self.M.shape[1]

    def flatten(self) -> np.ndarray:
        scalars = np.array([getattr(self, name) for name in SCALAR_FIELDS], dtype=np.float64)
        return np.concatenate([scalars, self.M.ravel(order="F"), self.m])

    @classmethod
    def unflatten(cls, flat: np.ndarray, n_nodes: int, constraint_dim: int) -> "LayerParams":
        n_scalars = len(SCALAR_FIELDS)
        if flat.shape != (layer_size(n_nodes, constraint_dim),):
            raise DimensionMismatchError(
                f"expected {layer_size(n_nodes, constraint_dim)} values per layer, got {flat.shape}"
            )
        scalars = dict(zip(SCALAR_FIELDS, (float(v) for v in flat[:n_scalars])))
        split = n_scalars + n_nodes * constraint_dim
        M = flat[n_scalars:split].reshape((n_nodes, constraint_dim), order="F")
        return cls(**scalars, M=M, m=flat[split:])


def layer_size(n_nodes: int, constraint_dim: int) -> int:
    """Scalars per layer: nine weights plus M (N x d) and m (d)."""
    return len(SCALAR_FIELDS) + n_nodes * constraint_dim + constraint_dim


class SlogLayer(nn.Module):
    """One unrolled iteration; holds its parameters as float64 ``nn.Parameter``s."""

    def __init__(self, params: LayerParams):
        super().__init__()
        for name in SCALAR_FIELDS:
            setattr(self, name, nn.Parameter(torch.tensor(float(getattr(params, name)), dtype=DTYPE)))
        self.M = nn.Parameter(_tensor(params.M).clone())
        self.m = nn.Parameter(_tensor(params.m).clone())

    def to_params(self) -> LayerParams:
        values = {name: float(getattr(self, name).detach()) for name in SCALAR_FIELDS}
        return LayerParams(
            **values, M=self.M.detach().cpu().numpy().copy(), m=self.m.detach().cpu().numpy().copy()
        )

    def named_fields(self) -> List[Tuple[str, nn.Parameter]]:
        return [(name, getattr(self, name)) for name in FIELD_ORDER]


class TorchLifted:
    """Lifted operator of one batch as float64 tensors; see ``app.core.lifted``."""

    def __init__(self, v: torch.Tensor, y_tilde: torch.Tensor, z: torch.Tensor):
        self.v = v
        self.y_tilde = y_tilde
        self.z = z

    @classmethod
    def from_observations(cls, v: torch.Tensor, Y: np.ndarray) -> "TorchLifted":
        op = build_lifted(v.numpy(), Y)
        return cls(v=v, y_tilde=_tensor(op.y_tilde), z=_tensor(op.z))

    def apply(self, g_tilde: torch.Tensor) -> torch.Tensor:
        return self.v @ (g_tilde[:, None] * self.y_tilde)

    def adjoint(self, X: torch.Tensor) -> torch.Tensor:
        return ((self.v.T @ X) * self.y_tilde).sum(dim=1)


def woodbury_solve(
    z: torch.Tensor, rho: torch.Tensor, M: torch.Tensor, rhs: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (diag(z) + rho M M^T)^{-1} rhs through the d x d capacitance matrix.

    Returns:
        Tuple of (solution, capacitance matrix I_d + rho M^T diag(z)^{-1} M)
    """
    z_inv = 1.0 / z
    w = z_inv[:, None] * M
    inner = torch.eye(M.shape[1], dtype=DTYPE) + rho * (M.T @ w)
    try:
        correction = w @ torch.linalg.solve(inner, w.T @ rhs)
    except RuntimeError as e:
        raise SingularSystemError(f"capacitance matrix is singular: {e}") from e
    return z_inv * rhs - rho * correction, inner


def soft_threshold(v: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    # relu'(0) = 0 and sign(0) = 0 give the zero subgradient at |v| = tau and at v = 0
    return torch.sign(v) * torch.relu(torch.abs(v) - tau)


def filter_sublayer(
    op: TorchLifted, x: torch.Tensor, lam: torch.Tensor, mu: torch.Tensor, p: SlogLayer
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Inverse filter refinement.

    Returns:
        Tuple of (g~, capacitance matrix of the solve)
    """
    rhs = op.adjoint(x - p.rho1 * lam) + p.M @ (p.rho2 * p.m - p.rho1 * mu)
    return woodbury_solve(op.z, p.rho2, p.M, rhs)


def sources_sublayer(
    op: TorchLifted, g_tilde: torch.Tensor, lam: torch.Tensor, p: SlogLayer
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Returns:
        Tuple of (x, pre-threshold activation)
    """
    pre = p.alpha1 * op.apply(g_tilde) + p.alpha2 * lam
    return soft_threshold(pre, p.tau), pre


def multipliers_sublayer(
    op: TorchLifted,
    g_tilde: torch.Tensor,
    x: torch.Tensor,
    lam_prev: torch.Tensor,
    mu_prev: torch.Tensor,
    p: SlogLayer,
) -> Tuple[torch.Tensor, torch.Tensor]:
    lam = p.beta1 * lam_prev + p.beta2 * op.apply(g_tilde) + p.beta3 * x
    mu = p.gamma * mu_prev + p.M.T @ g_tilde + p.m
    return lam, mu


@dataclass(eq=False)
class InitStates:
    """Layer-0 states: x and lambda are N x P, mu has length d."""

    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    @classmethod
    def zeros(cls, n_nodes: int, n_signals: int, constraint_dim: int) -> "InitStates":
        return cls(
            x=np.zeros((n_nodes, n_signals)),
            lam=np.zeros((n_nodes, n_signals)),
            mu=np.zeros(constraint_dim),
        )

    @classmethod
    def random(
        cls, n_nodes: int, n_signals: int, constraint_dim: int, seed: int, *stream: int
    ) -> "InitStates":
        """Standard normal states from the (INIT_STATE, *stream) stream of ``seed``."""
        rng = make_rng(seed, INIT_STATE, *stream)
        x = rng.standard_normal((n_nodes, n_signals))
        lam = rng.standard_normal((n_nodes, n_signals))
        mu = rng.standard_normal(constraint_dim)
        return cls(x=x, lam=lam, mu=mu)


class SlogModel(nn.Module):
    """K decoupled layers sharing (N, d), bound to one graph's eigenvectors."""

    def __init__(self, sg: SpectralGraph, layers: Sequence[LayerParams]):
        super().__init__()
        if not layers:
            raise InvalidParameterError("a model needs at least one layer")
        n_nodes, constraint_dim = layers[0].n_nodes, layers[0].constraint_dim
        for p in layers:
            if (p.n_nodes, p.constraint_dim) != (n_nodes, constraint_dim):
                raise DimensionMismatchError("all layers must share N and d")
        if n_nodes != sg.n_nodes:
            raise DimensionMismatchError(f"layers have N={n_nodes}, graph has {sg.n_nodes} nodes")

        self.sg = sg
        self.n_nodes = n_nodes
        self.constraint_dim = constraint_dim
        self.layers = nn.ModuleList(SlogLayer(p) for p in layers)
        self.register_buffer("v", _tensor(sg.eigvecs).clone())
        self.version = 0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def bump_version(self) -> None:
        self.version += 1

    def layer_params(self) -> List[LayerParams]:
        return [layer.to_params() for layer in self.layers]

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.flatten() for p in self.layer_params()])

    def load_flat(self, flat: np.ndarray) -> None:
        """Overwrite every parameter from a flat vector in checkpoint order."""
        size = layer_size(self.n_nodes, self.constraint_dim)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size * self.n_layers,):
            raise DimensionMismatchError(f"expected {size * self.n_layers} parameters, got {flat.shape}")
        with torch.no_grad():
            for k, layer in enumerate(self.layers):
                params = LayerParams.unflatten(flat[k * size:(k + 1) * size], self.n_nodes, self.constraint_dim)
                for name in SCALAR_FIELDS:
                    getattr(layer, name).fill_(getattr(params, name))
                layer.M.copy_(_tensor(params.M))
                layer.m.copy_(_tensor(params.m))
        self.bump_version()


def init_model(n_nodes: int, constraint_dim: int, n_layers: int, seed: int, sg: SpectralGraph) -> SlogModel:
    """
    Random initialization: rho1, rho2, tau ~ Uniform[0, 1]; everything else ~ Normal(0, 1).

    Draws happen layer by layer in checkpoint field order from the MODEL_INIT stream.
    """
    if n_layers < 1:
        raise InvalidParameterError(f"need at least one layer, got K={n_layers}")
    if not 1 <= constraint_dim <= n_nodes:
        raise InvalidParameterError(f"constraint dimension must be in [1, {n_nodes}], got d={constraint_dim}")

    rng = make_rng(seed, MODEL_INIT)
    layers = []
    for _ in range(n_layers):
        values = {
            name: float(rng.uniform(0.0, 1.0) if name in NON_NEGATIVE else rng.standard_normal())
            for name in SCALAR_FIELDS
        }
        M = rng.standard_normal((n_nodes, constraint_dim))
        m = rng.standard_normal(constraint_dim)
        layers.append(LayerParams(**values, M=M, m=m))
    return SlogModel(sg, layers)


def admm_specialization(
    n_nodes: int, rho_lambda: float, rho_mu: float, scale_c: float, n_layers: int
) -> Tuple[List[LayerParams], "InitStatesFactory"]:
    """
    Layer parameters under which the network runs ADMM exactly.

    With r = rho_mu / rho_lambda: rho1 = rho2 = alpha2 = r, alpha1 = beta1 = gamma = 1,
    beta2 = -beta3 = 1 / r, tau = 1 / rho_lambda, M = 1_N and m = -c. Starting from
    x = 0, lambda = 0, mu = -2c, the layer states relate to the ADMM iterates by
    lambda = lambda_admm / rho_mu and mu = mu_admm / rho_mu - 2c.

    Returns:
        Tuple of (layers, factory giving the matching initial states for P signals)
    """
    r = rho_mu / rho_lambda
    params = [
        LayerParams(
            rho1=r,
            rho2=r,
            alpha1=1.0,
            alpha2=r,
            tau=1.0 / rho_lambda,
            beta1=1.0,
            beta2=1.0 / r,
            beta3=-1.0 / r,
            gamma=1.0,
            M=np.ones((n_nodes, 1)),
            m=np.array([-scale_c]),
        )
        for _ in range(n_layers)
    ]
    return params, InitStatesFactory(n_nodes=n_nodes, mu0=-2.0 * scale_c)


@dataclass(frozen=True)
class InitStatesFactory:
    n_nodes: int
    mu0: float

    def __call__(self, n_signals: int) -> InitStates:
        states = InitStates.zeros(self.n_nodes, n_signals, 1)
        states.mu[:] = self.mu0
        return states


@dataclass(eq=False)
class ForwardTrace:
    """Per-layer tensors of one forward pass; ``output`` carries the autograd graph."""

    model_version: int
    init_states: InitStates
    g_tilde: List[torch.Tensor] = field(default_factory=list)
    pre_activation: List[torch.Tensor] = field(default_factory=list)
    x: List[torch.Tensor] = field(default_factory=list)
    lam: List[torch.Tensor] = field(default_factory=list)
    mu: List[torch.Tensor] = field(default_factory=list)
    capacitance: List[torch.Tensor] = field(default_factory=list)
    output: Optional[torch.Tensor] = None
    n_signals: int = 0

    def __len__(self) -> int:
        return len(self.g_tilde)


def forward(
    model: SlogModel,
    Y: np.ndarray,
    init_seed: int = 0,
    init_states: Optional[InitStates] = None,
    stream: Tuple[int, ...] = (),
) -> Tuple[torch.Tensor, torch.Tensor, ForwardTrace]:
    """
    Run the K layers on observations ``Y``.

    Args:
        model: Network
        Y: N x P observations
        init_seed: Seed of the random initial states
        init_states: Explicit initial states; overrides ``init_seed``
        stream: Extra stream ids for the initial states, e.g. the batch index

    Returns:
        Tuple of (X^ = unvec(Z g~[K]), g~[K], trace)
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != model.n_nodes:
        raise DimensionMismatchError(f"observations of shape {Y.shape} do not match N={model.n_nodes}")
    n_signals = Y.shape[1]
    if init_states is None:
        init_states = InitStates.random(model.n_nodes, n_signals, model.constraint_dim, init_seed, *stream)

    op = TorchLifted.from_observations(model.v, Y)
    x, lam, mu = _tensor(init_states.x), _tensor(init_states.lam), _tensor(init_states.mu)
    if x.shape != (model.n_nodes, n_signals) or lam.shape != x.shape or mu.shape != (model.constraint_dim,):
        raise DimensionMismatchError("initial states do not match the model and batch shapes")

    trace = ForwardTrace(model_version=model.version, init_states=init_states, n_signals=n_signals)
    g_tilde = None
    for layer in model.layers:
        g_tilde, capacitance = filter_sublayer(op, x, lam, mu, layer)
        x, pre = sources_sublayer(op, g_tilde, lam, layer)
        lam, mu = multipliers_sublayer(op, g_tilde, x, lam, mu, layer)
        trace.g_tilde.append(g_tilde)
        trace.pre_activation.append(pre)
        trace.x.append(x)
        trace.lam.append(lam)
        trace.mu.append(mu)
        trace.capacitance.append(capacitance)

    x_hat = op.apply(g_tilde)
    trace.output = x_hat
    return x_hat, g_tilde, trace


def loss(x_hat: ArrayLike, x: ArrayLike) -> torch.Tensor:
    """
    Sign-invariant relative error min(||X^ - X||_F, ||X^ + X||_F) / ||X||_F.

    Ties pick the "-" branch, so its gradient is the one propagated.
    """
    x_hat, x = _tensor(x_hat), _tensor(x)
    if x_hat.shape != x.shape:
        raise DimensionMismatchError(f"prediction {tuple(x_hat.shape)} vs target {tuple(x.shape)}")
    scale = torch.linalg.norm(x)
    if scale.item() == 0.0:
        raise ZeroScaleError("loss is undefined for an all-zero target")
    minus = torch.linalg.norm(x_hat - x)
    plus = torch.linalg.norm(x_hat + x)
    best = minus if minus.detach().item() <= plus.detach().item() else plus
    return best / scale


Gradients = List[Dict[str, torch.Tensor]]


def backward(model: SlogModel, trace: ForwardTrace, Y: np.ndarray, X: np.ndarray) -> Gradients:
    """
    Reverse-mode gradients of ``loss(X^, X)`` for every layer field.

    The trace must come from a forward pass under the model's current parameters.

    Returns:
        One {field: gradient} dict per layer
    """
    if trace.model_version != model.version or trace.output is None:
        raise StaleTraceError(
            f"trace was recorded at model version {trace.model_version}, model is at {model.version}"
        )
    if np.shape(Y) != tuple(trace.output.shape):
        raise DimensionMismatchError(f"observations {np.shape(Y)} do not match the traced batch")

    value = loss(trace.output, X)
    fields = [param for layer in model.layers for _, param in layer.named_fields()]
    grads = torch.autograd.grad(value, fields, allow_unused=True)

    out: Gradients = []
    it = iter(grads)
    for layer in model.layers:
        per_layer = {}
        for name, param in layer.named_fields():
            grad = next(it)
            per_layer[name] = torch.zeros_like(param) if grad is None else grad.detach()
        out.append(per_layer)
    return out


def make_optimizer(model: SlogModel, cfg: Optional[TrainConfig] = None) -> torch.optim.Adam:
    cfg = cfg or TrainConfig()
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps)


def project(model: SlogModel) -> None:
    """Clamp rho1, rho2 and tau of every layer to [0, inf)."""
    with torch.no_grad():
        for layer in model.layers:
            for name in NON_NEGATIVE:
                getattr(layer, name).clamp_(min=0.0)


def adam_step(model: SlogModel, grads: Gradients, optimizer: torch.optim.Adam) -> SlogModel:
    """
    One bias-corrected Adam update followed by the non-negativity projection.

    The optimizer carries the moment estimates and the step count.
    """
    if len(grads) != model.n_layers:
        raise DimensionMismatchError(f"got gradients for {len(grads)} layers, model has {model.n_layers}")
    for layer, layer_grads in zip(model.layers, grads):
        for name, param in layer.named_fields():
            grad = layer_grads[name]
            if grad.shape != param.shape:
                raise DimensionMismatchError(f"gradient of {name} has shape {tuple(grad.shape)}")
            param.grad = grad.to(DTYPE).clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    project(model)
    model.bump_version()
    return model


def predict(
    model: SlogModel, Y: np.ndarray, init_seed: int = 0, stream: Tuple[int, ...] = ()
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient-free forward pass returning numpy (X^, g~)."""
    with torch.no_grad():
        x_hat, g_tilde, _ = forward(model, Y, init_seed=init_seed, stream=stream)
    return x_hat.numpy().copy(), g_tilde.numpy().copy()
