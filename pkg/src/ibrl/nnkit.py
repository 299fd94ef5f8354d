"""Dense float64 tensors with tape-free reverse-mode autodiff, small networks and Adam.

Every op builds a node that remembers its parents and a closure that pushes the
output gradient back into them.  ``backward`` walks the recorded graph once and
then tears it down, so each forward recording supports exactly one backward.

Only what the policy networks need is here: dense layers, 2x2 valid
convolutions, elementwise nonlinearities, reductions and a few indexing ops.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
LAYER_KINDS = ("dense", "conv2x2")


class NumericalError(FloatingPointError):
    """A NaN or Inf showed up where finite numbers are required."""


class ConfigurationError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording parents (inference and finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: a._accumulate(-g * out * out))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * g * a.data))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient wherever the bound is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: a._accumulate(g * inside))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _node(np.where(take_a, a.data, b.data), (a, b), back)


ACTIVATION_FNS = {"tanh": tanh, "relu": relu, "identity": lambda t: t}


# ------------------------------------------------------------------ reductions


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _node(out, (a,), lambda g: a._accumulate(g - probs * g.sum(axis=-1, keepdims=True)))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` for every row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        a._accumulate(full)

    return _node(a.data[rows, index], (a,), back)


# ---------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.outer(a.data, g))
            else:
                b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back)


def _patches(x: np.ndarray) -> np.ndarray:
    # (N,H,W,C) -> (N,H-1,W-1,4C), kernel offsets in (0,0),(0,1),(1,0),(1,1) order
    return np.concatenate(
        (x[:, :-1, :-1], x[:, :-1, 1:], x[:, 1:, :-1], x[:, 1:, 1:]), axis=-1
    )


def conv2x2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, unpadded 2x2 convolution on NHWC input.

    ``weight`` has shape (2, 2, C_in, C_out); output is (N, H-1, W-1, C_out).
    """
    n, h, w, c = x.shape
    c_out = weight.shape[-1]
    cols = _patches(x.data)
    wmat = weight.data.reshape(4 * c, c_out)
    out = cols @ wmat + bias.data

    def back(g):
        if weight.requires_grad:
            weight._accumulate((cols.reshape(-1, 4 * c).T @ g.reshape(-1, c_out)).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, c_out).sum(axis=0))
        if x.requires_grad:
            dcols = g @ wmat.T
            dx = np.zeros_like(x.data)
            dx[:, :-1, :-1] += dcols[..., 0:c]
            dx[:, :-1, 1:] += dcols[..., c : 2 * c]
            dx[:, 1:, :-1] += dcols[..., 2 * c : 3 * c]
            dx[:, 1:, 1:] += dcols[..., 3 * c :]
            x._accumulate(dx)

    return _node(out, (x, weight, bias), back)


# -------------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, then release the recording."""
    if loss._consumed:
        raise GraphError("backward called twice on the same recording; run a new forward pass")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any parameter")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {loss.data!r}")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            # interior nodes: drop graph and buffers, keep leaf grads
            node._backward = None
            node._parents = ()
            node.grad = None
    loss._consumed = True


# ---------------------------------------------------------------------- layers


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv2x2"
    size: int  # output features or channels
    activation: str = "tanh"
    gain: float = float(np.sqrt(2.0))
    bias_init: float = 0.0
    # Store weights sqrt(fan_in) larger and scale the product back down.  Same
    # function at init, but an Adam step moves the pre-activation by about
    # lr * sqrt(fan_in) instead of lr * fan_in, which matters for wide inputs.
    fan_in_scaled: bool = False


@dataclass
class Layer:
    kind: str
    weight: Tensor
    bias: Tensor
    activation: str
    scale: float = 1.0


@dataclass
class Network:
    input_shape: tuple
    layers: list[Layer]

    @property
    def output_size(self) -> int:
        return self.layers[-1].bias.shape[0]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def orthogonal(shape: tuple, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix of ``shape`` (rows, cols) scaled by ``gain``."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def build_network(input_shape: Sequence[int], layers: Sequence[LayerSpec], rng: np.random.Generator) -> Network:
    """Build a conv/dense chain.  Conv layers must precede dense ones; the
    conv output is flattened before the first dense layer."""
    shape = tuple(int(s) for s in input_shape)
    if not shape or any(s <= 0 for s in shape):
        raise ConfigurationError(f"input shape must be positive, got {shape}")
    built: list[Layer] = []
    for i, spec in enumerate(layers):
        if spec.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {i}: unknown kind {spec.kind!r}")
        if spec.activation not in ACTIVATIONS:
            raise ConfigurationError(f"layer {i}: unknown activation {spec.activation!r}")
        if spec.size <= 0:
            raise ConfigurationError(f"layer {i}: size must be positive, got {spec.size}")
        if spec.kind == "conv2x2":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: conv2x2 needs a (height, width, channels) input, got {shape}")
            h, w, c = shape
            if h < 2 or w < 2:
                raise ConfigurationError(f"layer {i}: spatial size {h}x{w} too small for a 2x2 kernel")
            wmat = orthogonal((4 * c, spec.size), spec.gain, rng)
            weight = Tensor(wmat.reshape(2, 2, c, spec.size), requires_grad=True)
            shape = (h - 1, w - 1, spec.size)
            scale = 1.0
        else:
            fan_in = int(np.prod(shape))
            scale = 1.0 / np.sqrt(fan_in) if spec.fan_in_scaled else 1.0
            weight = Tensor(orthogonal((fan_in, spec.size), spec.gain, rng) / scale, requires_grad=True)
            shape = (spec.size,)
        bias = Tensor(np.full(spec.size, spec.bias_init), requires_grad=True)
        built.append(Layer(spec.kind, weight, bias, spec.activation, float(scale)))
    if not built:
        raise ConfigurationError("network needs at least one layer")
    return Network(tuple(int(s) for s in input_shape), built)


def mlp_spec(sizes: Sequence[int], activation: str = "tanh", out_activation: str | None = None,
             out_gain: float | None = None) -> list[LayerSpec]:
    """Dense layer specs for ``sizes = [in, h1, ..., out]`` (input size not included in output)."""
    specs = []
    for k, size in enumerate(sizes[1:]):
        last = k == len(sizes) - 2
        act = (out_activation or activation) if last else activation
        gain = out_gain if (last and out_gain is not None) else float(np.sqrt(2.0))
        specs.append(LayerSpec("dense", size, act, gain))
    return specs


def _check_input(net: Network, x: np.ndarray) -> bool:
    """Return True if ``x`` carries a leading batch axis."""
    exp_shape = net.input_shape
    if x.shape == exp_shape:
        return False
    if x.ndim == len(exp_shape) + 1 and x.shape[1:] == exp_shape:
        return True
    raise ValueError(f"input shape mismatch: expected {exp_shape} (optionally batched), got {x.shape}")


def forward(net: Network, x) -> Tensor:
    """Recorded forward pass; accepts one input or a leading batch axis."""
    x = _as_tensor(x)
    batched = _check_input(net, x.data)
    if not batched:
        x = reshape(x, (1,) + x.shape)
    h = x
    for layer in net.layers:
        if layer.kind == "conv2x2":
            h = conv2x2(h, layer.weight, layer.bias)
        else:
            if h.data.ndim > 2:
                h = reshape(h, (h.shape[0], -1))
            z = matmul(h, layer.weight)
            if layer.scale != 1.0:
                z = mul(z, layer.scale)
            h = add(z, layer.bias)
        h = ACTIVATION_FNS[layer.activation](h)
    if not np.isfinite(h.data).all():
        raise NumericalError("network produced non-finite output")
    if not batched:
        h = reshape(h, h.shape[1:])
    return h


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass, nothing recorded (rollouts, evaluation)."""
    x = np.asarray(x, dtype=np.float64)
    batched = _check_input(net, x)
    h = x if batched else x[None]
    for layer in net.layers:
        if layer.kind == "conv2x2":
            c = h.shape[-1]
            h = _patches(h) @ layer.weight.data.reshape(4 * c, -1) + layer.bias.data
        else:
            if h.ndim > 2:
                h = h.reshape(h.shape[0], -1)
            z = h @ layer.weight.data
            h = (z * layer.scale if layer.scale != 1.0 else z) + layer.bias.data
        if layer.activation == "tanh":
            h = np.tanh(h)
        elif layer.activation == "relu":
            h = np.maximum(h, 0.0)
    if not np.isfinite(h).all():
        raise NumericalError("network produced non-finite output")
    return h if batched else h[0]


# ----------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-5) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def adam_step(params: Sequence[Tensor], state: AdamState) -> AdamState:
    """Bias-corrected Adam update in place; clears the grads.

    Parameters without a grad are treated as having a zero gradient.
    """
    if len(state.m) != len(params):
        raise ValueError(f"optimizer tracks {len(state.m)} tensors but got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericalError(f"parameter {i} ({p.name or p.shape}) has {bad} non-finite gradient entries")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else 0.0
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = p.data - update
        p.grad = None
    return state


# ------------------------------------------------------------ gradient checks


def analytic_gradients(params: Sequence[Tensor], loss_fn: Callable[[], Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    return grads


def numeric_gradients(params: Sequence[Tensor], loss_fn: Callable[[], Tensor], h: float = 1e-5,
                      entries: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Central differences.  ``entries[i]`` optionally restricts which flat indices
    of parameter ``i`` are probed; the rest are left as NaN."""
    if h <= 0:
        raise ValueError("step h must be positive")
    out = []
    with no_grad():
        for i, p in enumerate(params):
            p.data = np.ascontiguousarray(p.data)  # reshape must give a view
            flat = p.data.reshape(-1)
            g = np.full(flat.size, np.nan)
            idx = range(flat.size) if entries is None else entries[i]
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                up = float(loss_fn().data)
                flat[j] = orig - h
                down = float(loss_fn().data)
                flat[j] = orig
                g[j] = (up - down) / (2.0 * h)
            out.append(g.reshape(p.shape))
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        a, n = a[mask], n[mask]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def sample_entries(params: Sequence[Tensor], max_entries: int | None, rng: np.random.Generator):
    if max_entries is None:
        return None
    return [
        np.arange(p.size) if p.size <= max_entries else rng.choice(p.size, size=max_entries, replace=False)
        for p in params
    ]


def gradient_check(params: Sequence[Tensor], loss_fn: Callable[[], Tensor], h: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences over ``params``."""
    entries = sample_entries(params, max_entries, rng or np.random.default_rng(0))
    return max_relative_error(analytic_gradients(params, loss_fn), numeric_gradients(params, loss_fn, h, entries))


def finite_diff_check(net: Network, x, loss_fn: Callable[[Tensor], Tensor], h: float = 1e-5,
                      max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backprop against central differences for ``loss_fn(forward(net, x))``."""
    x = np.asarray(x, dtype=np.float64)
    return gradient_check(net.parameters(), lambda: loss_fn(forward(net, x)), h, max_entries, rng)
