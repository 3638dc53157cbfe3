"""ReSIREN / SIREN coordinate network in numpy.

Layer ``j`` (1-based) computes ``h_j = z_j @ W_j + b_j``, mixes it with the running
skip ``h'_{j-1}`` when the residual chain is active, and applies ``A_j``::

    A_1 = sin(w0 * sinh(2x))   (H-SIREN, or plain sine for the ablation)
    A_j = sin(w0 * x)          for 1 < j < D
    A_D = identity             (the embedding)

The chain starts at layer 2, the first hidden-to-hidden pre-activation, and mixes
layers 3..D-1. Layer 1 (input -> hidden, feeding sinh) and layer D (hidden ->
embedding) never take a skip. An affine head maps the embedding to the regression
targets.

All parameters live in one flat buffer; per-layer weights and biases are views
into it, which keeps the optimizer and the checkpoint writer trivial.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np

from .rng import SplitMix64


class Activation(str, Enum):
    HSIREN = "hsiren"
    SINE = "sine"
    IDENTITY = "identity"


class Residual(str, Enum):
    OFF = "off"
    HALF = "half"
    SQRT2 = "sqrt2"


RESIDUAL_FACTOR = {Residual.OFF: 1.0, Residual.HALF: 0.5, Residual.SQRT2: 1.0 / math.sqrt(2.0)}


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str, message: str = "non-finite values"):
        super().__init__(f"{message} in {layer}")
        self.layer = layer


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 16
    input_dim: int = 4
    hidden_dim: int = 512
    embedding_dim: int = 256
    output_dim: int = 11
    omega0: float = 30.0
    residual: Residual = Residual.HALF
    first_layer: Activation = Activation.HSIREN

    def __post_init__(self):
        object.__setattr__(self, "residual", Residual(self.residual))
        object.__setattr__(self, "first_layer", Activation(self.first_layer))
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        for name in ("input_dim", "hidden_dim", "embedding_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be > 0")
        if self.first_layer is Activation.IDENTITY:
            raise ValueError("first_layer must be hsiren or sine")

    def activation(self, j: int) -> Activation:
        if j == self.depth:
            return Activation.IDENTITY
        if j == 1:
            return self.first_layer
        return Activation.SINE

    def mixes(self, j: int) -> bool:
        """True when layer ``j`` adds the skip ``h'_{j-1}`` to its pre-activation."""
        return self.residual is not Residual.OFF and 3 <= j <= self.depth - 1

    @property
    def residual_factor(self) -> float:
        return RESIDUAL_FACTOR[self.residual]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) for layers 1..D followed by the head."""
        shapes = [(self.input_dim, self.hidden_dim)]
        shapes += [(self.hidden_dim, self.hidden_dim)] * (self.depth - 2)
        shapes.append((self.hidden_dim, self.embedding_dim))
        shapes.append((self.embedding_dim, self.output_dim))
        return shapes

    @property
    def n_parameters(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["residual"] = self.residual.value
        d["first_layer"] = self.first_layer.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def segment_names(cfg: NetworkConfig) -> List[str]:
    names = [f"layer{j}" for j in range(1, cfg.depth + 1)]
    return names + ["head"]


class ParameterSet:
    """Flat parameter buffer with per-layer ``(weight, bias)`` views.

    Layout per segment: weight ``(fan_in, fan_out)`` row-major, then bias
    ``(fan_out,)``; segments ordered layer 1..D then head.
    """

    def __init__(self, cfg: NetworkConfig, flat: np.ndarray):
        if flat.ndim != 1 or flat.size != cfg.n_parameters:
            raise ValueError(f"expected {cfg.n_parameters} parameters, got {flat.size}")
        self.cfg = cfg
        self.flat = flat
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        self.offsets: List[int] = []
        pos = 0
        for fan_in, fan_out in cfg.layer_shapes():
            self.offsets.append(pos)
            self.weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            self.biases.append(flat[pos:pos + fan_out])
            pos += fan_out

    @classmethod
    def zeros(cls, cfg: NetworkConfig, dtype=np.float32) -> "ParameterSet":
        return cls(cfg, np.zeros(cfg.n_parameters, dtype=dtype))

    @property
    def dtype(self):
        return self.flat.dtype

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(self.cfg, self.flat.astype(dtype))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.cfg, self.flat.copy())

    def segment_of(self, index: int) -> str:
        """Name of the layer owning flat position ``index``."""
        seg = int(np.searchsorted(self.offsets, index, side="right")) - 1
        return segment_names(self.cfg)[seg]


def init_parameters(cfg: NetworkConfig, seed: int, dtype=np.float32) -> ParameterSet:
    """SIREN initialization drawn from a SplitMix64 stream.

    Layer 1: U(-1/fan_in, 1/fan_in). Layers 2..D: U(+-sqrt(6/fan_in)/w0).
    Head: U(+-sqrt(6/fan_in)). Biases zero. Weights are drawn in layout order.
    """
    stream = SplitMix64(seed)
    params = ParameterSet.zeros(cfg, dtype=np.float64)
    for k, (fan_in, fan_out) in enumerate(cfg.layer_shapes()):
        if k == 0:
            bound = 1.0 / fan_in
        elif k < cfg.depth:
            bound = math.sqrt(6.0 / fan_in) / cfg.omega0
        else:
            bound = math.sqrt(6.0 / fan_in)
        params.weights[k][...] = stream.uniform(fan_in * fan_out, -bound, bound).reshape(fan_in, fan_out)
    return params.astype(dtype)


def mix(h: np.ndarray, skip: np.ndarray, residual: Residual) -> np.ndarray:
    """Residual rule ``h'_j = (h_j + h'_{j-1}) * r``; identity on ``h`` when residual is off."""
    residual = Residual(residual)
    if residual is Residual.OFF:
        return h
    return (h + skip) * h.dtype.type(RESIDUAL_FACTOR[residual])


def activation(kind: Activation, omega0: float, x):
    kind = Activation(kind)
    if kind is Activation.HSIREN:
        return np.sin(omega0 * np.sinh(2.0 * x))
    if kind is Activation.SINE:
        return np.sin(omega0 * x)
    return x


def activation_derivative(kind: Activation, omega0: float, x):
    kind = Activation(kind)
    if kind is Activation.HSIREN:
        return 2.0 * omega0 * np.cosh(2.0 * x) * np.cos(omega0 * np.sinh(2.0 * x))
    if kind is Activation.SINE:
        return omega0 * np.cos(omega0 * x)
    return np.ones_like(x)


@dataclass
class ForwardTrace:
    inputs: List[np.ndarray]  # z_j fed into layer j
    pre: List[np.ndarray]  # h_j
    mixed: List[np.ndarray]  # h'_j
    post: List[np.ndarray]  # z_{j+1}
    embedding: np.ndarray
    output: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.pre)


def forward(
    cfg: NetworkConfig,
    params: ParameterSet,
    x: np.ndarray,
    keep_trace: bool = False,
    with_head: bool = True,
    observer: Optional[Callable[[int, np.ndarray], None]] = None,
):
    """Run the network on a batch ``x`` of shape ``(B, input_dim)``.

    Returns ``(embedding, output, trace)``; ``output`` is None without the head and
    ``trace`` is None unless ``keep_trace``. ``observer(j, h'_j)`` is called per layer.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input of shape (B, {cfg.input_dim}), got {x.shape}")
    z = x.astype(params.dtype, copy=False)
    w0 = params.dtype.type(cfg.omega0)
    trace = ForwardTrace([], [], [], [], embedding=None) if keep_trace else None
    skip = None
    for j in range(1, cfg.depth + 1):
        W, b = params.weights[j - 1], params.biases[j - 1]
        h = z @ W + b
        hp = mix(h, skip, cfg.residual) if cfg.mixes(j) else h
        z_next = activation(cfg.activation(j), w0, hp)
        if not np.all(np.isfinite(z_next)):
            raise NonFiniteError(f"layer{j}")
        if trace is not None:
            trace.inputs.append(z)
            trace.pre.append(h)
            trace.mixed.append(hp)
            trace.post.append(z_next)
        if observer is not None:
            observer(j, hp)
        skip = hp
        z = z_next
    embedding = z
    output = None
    if with_head:
        output = embedding @ params.weights[-1] + params.biases[-1]
        if not np.all(np.isfinite(output)):
            raise NonFiniteError("head")
    if trace is not None:
        trace.embedding = embedding
        trace.output = output
    return embedding, output, trace


def backward(
    cfg: NetworkConfig,
    params: ParameterSet,
    trace: Optional[ForwardTrace],
    grad_output: Optional[np.ndarray] = None,
    grad_embedding: Optional[np.ndarray] = None,
) -> ParameterSet:
    """Exact parameter gradients of a scalar loss.

    Pass ``grad_output`` (dL/d head output) and/or ``grad_embedding`` (dL/de);
    contributions from both are summed. The head gradient stays zero when no
    ``grad_output`` is given.
    """
    if trace is None or len(trace) != cfg.depth:
        raise ValueError("backward needs the trace of a forward pass run with keep_trace=True")
    if grad_output is None and grad_embedding is None:
        raise ValueError("need grad_output or grad_embedding")
    grads = ParameterSet.zeros(cfg, dtype=params.dtype)
    dtype = params.dtype.type
    r = dtype(cfg.residual_factor)
    w0 = dtype(cfg.omega0)

    de = np.zeros_like(trace.embedding)
    if grad_output is not None:
        grad_output = np.asarray(grad_output, dtype=params.dtype)
        grads.weights[-1][...] = trace.embedding.T @ grad_output
        grads.biases[-1][...] = grad_output.sum(axis=0)
        de = de + grad_output @ params.weights[-1].T
    if grad_embedding is not None:
        de = de + np.asarray(grad_embedding, dtype=params.dtype)

    dz = de
    carry = None  # dL/dh'_{j} arriving through the skip of layer j+1
    for j in range(cfg.depth, 0, -1):
        dhp = dz * activation_derivative(cfg.activation(j), w0, trace.mixed[j - 1])
        if carry is not None:
            dhp = dhp + carry
        if cfg.mixes(j):
            dh = dhp * r
            carry = dh
        else:
            dh = dhp
            carry = None
        grads.weights[j - 1][...] = trace.inputs[j - 1].T @ dh
        grads.biases[j - 1][...] = dh.sum(axis=0)
        if j > 1:
            dz = dh @ params.weights[j - 1].T
    return grads


def preactivation_std(cfg: NetworkConfig, params: ParameterSet, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Per-layer std of ``w0 * h'_j`` over all units and inputs, the sine argument SIREN's init keeps near N(0, 1)."""
    s1 = np.zeros(cfg.depth)
    s2 = np.zeros(cfg.depth)
    count = np.zeros(cfg.depth)

    def observe(j, hp):
        v = cfg.omega0 * hp.astype(np.float64)
        s1[j - 1] += v.sum()
        s2[j - 1] += np.square(v).sum()
        count[j - 1] += v.size

    for s in range(0, x.shape[0], chunk):
        forward(cfg, params, x[s:s + chunk], with_head=False, observer=observe)
    mean = s1 / count
    return np.sqrt(np.maximum(s2 / count - mean ** 2, 0.0))
