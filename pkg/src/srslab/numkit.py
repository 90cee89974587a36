"""Dense feed-forward networks with hand-written backprop.

All parameters of a network live in one contiguous float64 vector; layers
expose weight/bias *views* into it. That keeps optimizer steps, target-network
syncs and finite-difference probes down to a handful of vector operations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "softmax")


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class NonFiniteError(ArithmeticError):
    """A loss or gradient contained NaN/Inf."""


def _layout(sizes: Sequence[tuple[int, int]]) -> list[tuple[int, int, int]]:
    # (offset of W, offset of b, end) per layer
    out, pos = [], 0
    for n_in, n_out in sizes:
        w_end = pos + n_in * n_out
        out.append((pos, w_end, w_end + n_out))
        pos = w_end + n_out
    return out


class _FlatLayers:
    def __init__(self, sizes: Sequence[tuple[int, int]], flat: np.ndarray | None = None):
        self.sizes = [(int(i), int(o)) for i, o in sizes]
        spans = _layout(self.sizes)
        total = spans[-1][2] if spans else 0
        if flat is None:
            flat = np.zeros(total)
        elif flat.shape != (total,):
            raise ConfigurationError(f"flat vector has {flat.shape}, layout needs ({total},)")
        self.flat = flat
        self._views = [
            (flat[w0:b0].reshape(n_out, n_in), flat[b0:end])
            for (n_in, n_out), (w0, b0, end) in zip(self.sizes, spans)
        ]

    @property
    def weights(self) -> list[np.ndarray]:
        return [w for w, _ in self._views]

    @property
    def biases(self) -> list[np.ndarray]:
        return [b for _, b in self._views]

    def __len__(self) -> int:
        return len(self._views)


class NetworkParams(_FlatLayers):
    """Layered dense network: weight [out x in], bias [out], activation per layer."""

    def __init__(self, sizes, activations: Sequence[str], flat: np.ndarray | None = None):
        if len(sizes) != len(activations):
            raise ConfigurationError("one activation per layer required")
        for k in range(1, len(sizes)):
            if sizes[k][0] != sizes[k - 1][1]:
                raise ConfigurationError(
                    f"layer {k} expects {sizes[k][0]} inputs but layer {k - 1} emits {sizes[k - 1][1]}"
                )
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        super().__init__(sizes, flat)
        self.activations = list(activations)

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray, str]]) -> NetworkParams:
        sizes = [(np.shape(w)[1], np.shape(w)[0]) for w, _, _ in layers]
        net = cls(sizes, [a for _, _, a in layers])
        for (w, b, _), wv, bv in zip(layers, net.weights, net.biases):
            wv[...] = w
            bv[...] = b
        return net

    @property
    def input_size(self) -> int:
        return self.sizes[0][0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1][1]

    def copy(self) -> NetworkParams:
        return NetworkParams(self.sizes, self.activations, self.flat.copy())

    def zeros_like(self) -> ParamGrads:
        return ParamGrads(self.sizes)

    def __reduce__(self):
        return (NetworkParams, (self.sizes, self.activations, self.flat))

    def __repr__(self) -> str:
        arch = " -> ".join(f"{o}:{a}" for (_, o), a in zip(self.sizes, self.activations))
        return f"NetworkParams({self.input_size} -> {arch})"


class ParamGrads(_FlatLayers):
    """Gradient container laid out exactly like a NetworkParams."""

    def __reduce__(self):
        return (ParamGrads, (self.sizes, self.flat))


def init_network(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights, zero biases. ``sizes`` lists widths input-first."""
    pairs = list(zip(sizes[:-1], sizes[1:]))
    net = NetworkParams(pairs, activations)
    for (n_in, n_out), w in zip(pairs, net.weights):
        limit = math.sqrt(6.0 / (n_in + n_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return net


def mlp(n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator,
        hidden_activation: str = "relu", output_activation: str = "identity") -> NetworkParams:
    sizes = [n_in, *hidden, n_out]
    acts = [hidden_activation] * len(hidden) + [output_activation]
    return init_network(sizes, acts, rng)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(z, dtype=float))


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "identity":
        return z
    if act == "tanh":
        return np.tanh(z)
    if act == "sigmoid":
        return expit(z)
    return _softmax(z)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    vector: bool = False


def dense_forward(net: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate ``net`` on a vector or a row-batch of inputs."""
    x = np.asarray(x, dtype=float)
    vector = x.ndim == 1
    h = x[None, :] if vector else x
    if h.shape[1] != net.input_size:
        raise ConfigurationError(f"input has {h.shape[1]} features, network expects {net.input_size}")
    cache = ForwardCache(vector=vector)
    for (w, b), act in zip(net._views, net.activations):
        z = h @ w.T + b
        cache.inputs.append(h)
        cache.pre.append(z)
        h = _activate(z, act)
        cache.post.append(h)
    return (h[0] if vector else h), cache


def predict(net: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a cache."""
    h = np.asarray(x, dtype=float)
    for (w, b), act in zip(net._views, net.activations):
        h = _activate(h @ w.T + b, act)
    return h


def dense_backward(net: NetworkParams, cache: ForwardCache, d_out: np.ndarray, *,
                   wrt: str = "output", grads: ParamGrads | None = None,
                   input_grad: bool = True) -> tuple[ParamGrads, np.ndarray | None]:
    """Backpropagate an upstream gradient through the cached forward pass.

    ``wrt="preact"`` means ``d_out`` is already the gradient at the last layer's
    pre-activation (useful for fused softmax/sigmoid + log-likelihood losses).
    Gradients are *added* into ``grads`` when one is passed in. With
    ``input_grad=False`` the gradient w.r.t. the input is skipped (returns None).
    """
    if len(cache.pre) != len(net) or any(
        z.shape[1] != o for z, (_, o) in zip(cache.pre, net.sizes)
    ):
        raise ConfigurationError("cache does not belong to this network")
    g = np.asarray(d_out, dtype=float)
    if cache.vector:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ConfigurationError(f"upstream gradient {g.shape} vs output {cache.post[-1].shape}")
    if grads is None:
        grads = ParamGrads(net.sizes)
    for k in range(len(net) - 1, -1, -1):
        act = net.activations[k]
        if k == len(net) - 1 and wrt == "preact":
            dz = g
        elif act == "relu":
            dz = g * (cache.pre[k] > 0)
        elif act == "identity":
            dz = g
        elif act == "tanh":
            dz = g * (1.0 - cache.post[k] ** 2)
        elif act == "sigmoid":
            y = cache.post[k]
            dz = g * y * (1.0 - y)
        else:
            y = cache.post[k]
            dz = y * (g - (g * y).sum(axis=1, keepdims=True))
        gw, gb = grads._views[k]
        gw += dz.T @ cache.inputs[k]
        gb += dz.sum(axis=0)
        if k == 0 and not input_grad:
            return grads, None
        g = dz @ net._views[k][0]
    return grads, (g[0] if cache.vector else g)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: NetworkParams, grads: ParamGrads, state: OptimizerState):
    """In-place parameter update. Rejects non-finite gradients before touching anything.

    An identically zero gradient carries no information and is a no-op for
    both optimizers (Adam's moments and step count are left alone too).
    """
    g = grads.flat
    if g.shape != params.flat.shape:
        raise ConfigurationError("gradient and parameter shapes differ")
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient entries; update rejected")
    if not g.any():
        return params, state
    state.step += 1
    if state.kind == "sgd":
        params.flat -= state.lr * g
        return params, state
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    b1, b2, t = state.beta1, state.beta2, state.step
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    # bias corrections folded into the step size (same update, fewer array passes)
    c2 = math.sqrt(1.0 - b2 ** t)
    step = state.lr * c2 / (1.0 - b1 ** t)
    denom = np.sqrt(v)
    denom += state.eps * c2
    params.flat -= step * (m / denom)
    return params, state


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_flat(params: Sequence[np.ndarray], loss_and_grads: Callable[[], tuple[float, Sequence[np.ndarray]]],
                    h: float = 1e-5) -> float:
    """Central-difference check of an arbitrary loss over several flat parameter vectors.

    ``loss_and_grads`` reads the current contents of ``params`` and returns the
    loss and its analytic gradients (same order as ``params``).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    _, analytic = loss_and_grads()
    analytic = [np.array(a, dtype=float, copy=True) for a in analytic]
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = np.empty_like(p)
        for i in range(p.size):
            old = p[i]
            p[i] = old + h
            up = loss_and_grads()[0]
            p[i] = old - h
            down = loss_and_grads()[0]
            p[i] = old
            numeric[i] = (up - down) / (2 * h)
        worst = max(worst, _rel_error(a, numeric))
    return worst


def grad_check(net: NetworkParams, loss: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
               h: float = 1e-5, analytic: ParamGrads | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``loss`` maps the network output to ``(value, d_value/d_output)``. Pass
    ``analytic`` to audit an externally computed gradient instead of backprop.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if net.flat.size == 0:
        return 0.0
    if analytic is None:
        out, cache = dense_forward(net, x)
        analytic, _ = dense_backward(net, cache, loss(out)[1])
    a = analytic.flat.copy()
    p = net.flat
    numeric = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        up = loss(predict(net, x))[0]
        p[i] = old - h
        down = loss(predict(net, x))[0]
        p[i] = old
        numeric[i] = (up - down) / (2 * h)
    return _rel_error(a, numeric)


def min_relu_margin(net: NetworkParams, x: np.ndarray) -> float:
    """Smallest |pre-activation| feeding a relu; inf when the net has none."""
    _, cache = dense_forward(net, x)
    margins = [np.abs(z).min() for z, a in zip(cache.pre, net.activations) if a == "relu"]
    return float(min(margins)) if margins else math.inf


class SeededRng:
    """PCG64 stream identified by a 64-bit seed; ``counter`` counts draw calls."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))
        self.counter = 0

    def random(self, size=None):
        self.counter += 1
        return self.generator.random(size)

    def normal(self, size=None):
        self.counter += 1
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self.generator.integers(low, high, size=size)

    def child(self, key: int) -> np.random.Generator:
        """Independent generator derived from (seed, key) without touching this stream."""
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(key),)))
