"""Minimal reverse-mode network engine.

Six layer kinds (conv2d, maxpool2d, fullyconnected, relu, dropout, flatten),
a fused softmax cross-entropy and ADAM. Everything runs in float64 on numpy.

Conventions:
  * inverted dropout: active masks are scaled by 1/(1-p), eval is identity
  * max-pool ties go to the first row-major index, and so does the gradient
  * relu'(0) = 0
  * conv is valid convolution over an optionally zero-padded input

Dropout masks are reproducible: train mode draws one stream per
(seed, step, layer), mc_dropout draws one stream per (seed, sample id, pass, layer)
so batching and thread scheduling never change a result.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, DomainError, OptimizerError, StateError

logger = logging.getLogger("qpi-explain")

MODES = ("train", "eval", "mc_dropout")
LAYER_KINDS = ("conv2d", "maxpool2d", "fullyconnected", "relu", "dropout", "flatten")
PROB_EPS = 1e-12


@dataclass
class Tensor:
    """Row-major float64 array with an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                raise DimensionError("tensor.grad", self.data.shape, self.grad.shape)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


@dataclass
class LayerSpec:
    """Declarative description of one layer."""

    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind '{self.kind}'", hint=f"Use one of {', '.join(LAYER_KINDS)}.")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind in ("conv2d", "maxpool2d") and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ConfigError(f"{self.kind}: kernel and stride must be >= 1, padding >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class ForwardContext:
    mode: str = "eval"
    seed: int = 0
    sample_ids: Optional[np.ndarray] = None
    pass_index: int = 0


# ============================================================================
# LAYERS
# ============================================================================

class Layer:
    kind = "layer"

    def __init__(self, spec: LayerSpec, name: str):
        self.spec = spec
        self.name = name
        self.params: Dict[str, Tensor] = {}

    def output_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, ctx: ForwardContext, index: int):
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache: Any, guided: bool = False, param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, spec: LayerSpec, name: str, rng: np.random.Generator):
        super().__init__(spec, name)
        k, cin, cout = spec.kernel, spec.in_channels, spec.out_channels
        if cin < 1 or cout < 1:
            raise ConfigError(f"{name}: conv2d needs in_channels and out_channels >= 1")
        std = np.sqrt(2.0 / (cin * k * k))
        self.params["weight"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.params["bias"] = Tensor(np.zeros(cout))

    def output_shape(self, in_shape):
        s = self.spec
        if len(in_shape) != 3 or in_shape[0] != s.in_channels:
            raise DimensionError(self.name, f"({s.in_channels}, H, W)", in_shape)
        h, w = in_shape[1] + 2 * s.padding, in_shape[2] + 2 * s.padding
        if s.kernel > h or s.kernel > w:
            raise DimensionError(self.name, f"spatial extent >= {s.kernel}", in_shape)
        return (s.out_channels, (h - s.kernel) // s.stride + 1, (w - s.kernel) // s.stride + 1)

    def forward(self, x, ctx, index):
        self.output_shape(x.shape[1:])
        s = self.spec
        p = s.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (s.kernel, s.kernel), axis=(2, 3))[:, :, ::s.stride, ::s.stride]
        w = self.params["weight"].data
        y = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
        y += self.params["bias"].data[None, :, None, None]
        return y, (x.shape, xp.shape, win)

    def backward(self, grad, cache, guided=False, param_grads=True):
        x_shape, xp_shape, win = cache
        s = self.spec
        w = self.params["weight"].data
        if param_grads:
            self.params["weight"].accumulate(np.einsum("nohw,nchwij->ocij", grad, win, optimize=True))
            self.params["bias"].accumulate(grad.sum(axis=(0, 2, 3)))
        ho, wo = grad.shape[2], grad.shape[3]
        dxp = np.zeros(xp_shape)
        for i in range(s.kernel):
            for j in range(s.kernel):
                dxp[:, :, i:i + s.stride * ho:s.stride, j:j + s.stride * wo:s.stride] += np.einsum(
                    "nohw,oc->nchw", grad, w[:, :, i, j], optimize=True
                )
        p = s.padding
        if p:
            dxp = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return dxp


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def output_shape(self, in_shape):
        s = self.spec
        stride = s.stride
        if len(in_shape) != 3 or s.kernel > in_shape[1] or s.kernel > in_shape[2]:
            raise DimensionError(self.name, f"(C, H>={s.kernel}, W>={s.kernel})", in_shape)
        return (in_shape[0], (in_shape[1] - s.kernel) // stride + 1, (in_shape[2] - s.kernel) // stride + 1)

    def forward(self, x, ctx, index):
        self.output_shape(x.shape[1:])
        k, st = self.spec.kernel, self.spec.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::st, ::st]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, grad, cache, guided=False, param_grads=True):
        x_shape, idx = cache
        k, st = self.spec.kernel, self.spec.stride
        n, c, ho, wo = idx.shape
        rows = np.arange(ho)[None, None, :, None] * st + idx // k
        cols = np.arange(wo)[None, None, None, :] * st + idx % k
        nn_ = np.broadcast_to(np.arange(n)[:, None, None, None], idx.shape)
        cc = np.broadcast_to(np.arange(c)[None, :, None, None], idx.shape)
        dx = np.zeros(x_shape)
        np.add.at(dx, (nn_, cc, rows, cols), grad)
        return dx


class FullyConnected(Layer):
    kind = "fullyconnected"

    def __init__(self, spec: LayerSpec, name: str, rng: np.random.Generator):
        super().__init__(spec, name)
        fin, fout = spec.in_features, spec.out_features
        if fin < 1 or fout < 1:
            raise ConfigError(f"{name}: fullyconnected needs in_features and out_features >= 1")
        self.params["weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fin), size=(fout, fin)))
        self.params["bias"] = Tensor(np.zeros(fout))

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.spec.in_features:
            raise DimensionError(self.name, f"({self.spec.in_features},)", in_shape)
        return (self.spec.out_features,)

    def forward(self, x, ctx, index):
        self.output_shape(x.shape[1:])
        y = x @ self.params["weight"].data.T + self.params["bias"].data
        return y, x

    def backward(self, grad, cache, guided=False, param_grads=True):
        x = cache
        if param_grads:
            self.params["weight"].accumulate(grad.T @ x)
            self.params["bias"].accumulate(grad.sum(axis=0))
        return grad @ self.params["weight"].data


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx, index):
        active = x > 0
        return np.where(active, x, 0.0), active

    def backward(self, grad, cache, guided=False, param_grads=True):
        # guided: pass only where forward input > 0 and incoming gradient > 0
        out = grad * cache
        if guided:
            out = out * (grad > 0)
        return out


class Dropout(Layer):
    kind = "dropout"

    def forward(self, x, ctx, index):
        p = self.spec.rate
        if ctx.mode == "eval" or p == 0.0:
            return x, None
        if ctx.mode == "train":
            rng = np.random.default_rng([ctx.seed, ctx.pass_index, index])
            keep = rng.random(x.shape) >= p
        else:
            ids = ctx.sample_ids if ctx.sample_ids is not None else np.arange(x.shape[0])
            keep = np.empty(x.shape, dtype=bool)
            for row, sid in enumerate(ids):
                rng = np.random.default_rng([ctx.seed, int(sid), ctx.pass_index, index])
                keep[row] = rng.random(x.shape[1:]) >= p
        mask = keep / (1.0 - p)
        return x * mask, mask

    def backward(self, grad, cache, guided=False, param_grads=True):
        return grad if cache is None else grad * cache


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx, index):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, guided=False, param_grads=True):
        return grad.reshape(cache)


def make_layer(spec: LayerSpec, name: str, rng: np.random.Generator) -> Layer:
    if spec.kind == "conv2d":
        return Conv2D(spec, name, rng)
    if spec.kind == "fullyconnected":
        return FullyConnected(spec, name, rng)
    return {"maxpool2d": MaxPool2D, "relu": ReLU, "dropout": Dropout, "flatten": Flatten}[spec.kind](spec, name)


# ============================================================================
# NETWORK
# ============================================================================

class Tape:
    """Recorded forward pass: per-layer caches, activations and output gradients."""

    def __init__(self, network: "Network", caches: List[Any], activations: List[np.ndarray]):
        self.network = network
        self.caches = caches
        self.activations = activations
        self.output_grads: Dict[int, np.ndarray] = {}

    def backward(self, grad: np.ndarray, guided: bool = False, param_grads: bool = True) -> np.ndarray:
        """Propagate d(loss)/d(logits) back to the input; returns d(loss)/d(input)."""
        layers = self.network.layers
        for i in range(len(layers) - 1, -1, -1):
            self.output_grads[i] = grad
            grad = layers[i].backward(grad, self.caches[i], guided=guided, param_grads=param_grads)
        return grad


class Network:
    """Sequential stack of layers with a declared per-sample input shape."""

    def __init__(self, layers: List[Layer], input_shape: Tuple[int, ...], name: str = "network"):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.name = name
        self._tape: Optional[Tape] = None
        self.architecture: Optional[Any] = None
        shape = self.input_shape
        self.shapes: List[Tuple[int, ...]] = []
        for layer in layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], input_shape: Tuple[int, ...],
                   seed: int = 0, name: str = "network") -> "Network":
        layers = []
        for i, spec in enumerate(specs):
            rng = np.random.default_rng([seed, i])
            layers.append(make_layer(spec, f"{i}.{spec.kind}", rng))
        return cls(layers, input_shape, name)

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape

    @property
    def has_dropout(self) -> bool:
        return any(l.kind == "dropout" and l.spec.rate > 0 for l in self.layers)

    def last_conv_index(self) -> Optional[int]:
        """Index of the last conv layer's activation (its ReLU when one follows)."""
        idx = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                idx = i
        if idx is not None and idx + 1 < len(self.layers) and self.layers[idx + 1].kind == "relu":
            idx += 1
        return idx

    def _run(self, x, mode, rng_seed, sample_ids, pass_index, keep):
        if mode not in MODES:
            raise ConfigError(f"unknown mode '{mode}'", hint=f"Use one of {', '.join(MODES)}.")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionError("input", self.input_shape, x.shape[1:])
        ids = None if sample_ids is None else np.asarray(sample_ids)
        ctx = ForwardContext(mode=mode, seed=int(rng_seed), sample_ids=ids, pass_index=int(pass_index))
        caches, acts = [], []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x, ctx, i)
            if keep:
                caches.append(cache)
                acts.append(x)
        return x, caches, acts

    def forward(self, x: np.ndarray, mode: str = "eval", rng_seed: int = 0,
                sample_ids: Optional[Sequence[int]] = None, pass_index: int = 0,
                record: bool = False) -> np.ndarray:
        logits, caches, acts = self._run(x, mode, rng_seed, sample_ids, pass_index, record)
        if record:
            self._tape = Tape(self, caches, acts)
        return logits

    def trace(self, x: np.ndarray, mode: str = "eval", rng_seed: int = 0,
              sample_ids: Optional[Sequence[int]] = None, pass_index: int = 0) -> Tuple[np.ndarray, Tape]:
        """Forward pass returning its own tape (safe to use from several threads)."""
        logits, caches, acts = self._run(x, mode, rng_seed, sample_ids, pass_index, True)
        return logits, Tape(self, caches, acts)

    def backward(self, grad_logits: np.ndarray, guided: bool = False) -> np.ndarray:
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass",
                             hint="Call forward(..., record=True) first.")
        tape, self._tape = self._tape, None
        return tape.backward(grad_logits, guided=guided)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{layer.name}.{key}", t) for layer in self.layers for key, t in layer.params.items()]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for _, t in self.parameters()))

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            if name not in state:
                raise DimensionError(name, t.shape, ())
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(name, t.shape, arr.shape)
            t.data = arr.copy()


# ============================================================================
# OPERATIONS
# ============================================================================

def forward(model: Network, input: np.ndarray, mode: str = "eval", rng_seed: int = 0,
            sample_ids: Optional[Sequence[int]] = None, pass_index: int = 0,
            record: bool = False) -> np.ndarray:
    return model.forward(input, mode=mode, rng_seed=rng_seed, sample_ids=sample_ids,
                         pass_index=pass_index, record=record)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CrossEntropy:
    value: float
    grad_logits: np.ndarray
    clamp_count: int = 0


def cross_entropy(probs: np.ndarray, labels: Sequence[int]) -> CrossEntropy:
    """Mean negative log-likelihood of the true labels.

    The gradient is the fused softmax/cross-entropy one w.r.t. the logits:
    (probs - onehot) / N.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise DimensionError("cross_entropy", "probs [N,K] with N labels", p.shape)
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise DomainError("probability rows must sum to 1 (+/- 1e-6)")
    k = p.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    picked = p[np.arange(len(y)), y]
    clamped = picked < PROB_EPS
    clamp_count = int(clamped.sum())
    if clamp_count:
        logger.warning(f"cross_entropy: clamped {clamp_count} true-label probabilities to {PROB_EPS}")
    value = float(-np.mean(np.log(np.maximum(picked, PROB_EPS)))) if len(y) else 0.0
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    grad = (p - onehot) / max(len(y), 1)
    return CrossEntropy(value=value, grad_logits=grad, clamp_count=clamp_count)


def backward(model: Network, loss: Union[CrossEntropy, np.ndarray]) -> Dict[str, np.ndarray]:
    """Populate every parameter's gradient; returns them by name."""
    grad = loss.grad_logits if isinstance(loss, CrossEntropy) else np.asarray(loss, dtype=np.float64)
    model.backward(grad)
    return {name: t.grad for name, t in model.parameters()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    """One bias-corrected ADAM update, in place. NaN gradients abort the step."""
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise OptimizerError(f"non-finite gradients in {len(bad)} parameter(s); step aborted", diagnostics=bad)
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise DimensionError(name, p.shape, np.shape(g))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
