"""Minimal dense-network engine on float64 numpy arrays.

Reverse-mode autodiff over a dynamically recorded graph of matrix
operations, plus affine+ReLU stacks, Adam with decoupled weight decay,
stop-gradient, and a finite-difference gradient checker. Everything is
64-bit: gradient-check tolerances and sort stability matter more than
speed at the scales this package runs at.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the computation graph: a float64 array plus backward closure.

    Tensors with requires_grad=True are leaves (parameters). Operation
    results carry a closure that routes the incoming gradient to their
    parents; backward() visits each node exactly once in reverse
    topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward=None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data, parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    out._backward = backward
    return out


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.data), parents=(a,))

    def backward(g):
        _accumulate(a, g * out.data)

    out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), parents=(a,))

    def backward(g):
        _accumulate(a, g / a.data)

    out._backward = backward
    return out


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * a.data, parents=(a,))

    def backward(g):
        _accumulate(a, 2.0 * g * a.data)

    out._backward = backward
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where lo < value < hi."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi), parents=(a,))
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accumulate(a, g * inside)

    out._backward = backward
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 parents=tuple(parts))
    widths = [p.data.shape[1] for p in parts]

    def backward(g):
        start = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, start:start + w])
            start += w

    out._backward = backward
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data[:, start:stop].copy(), parents=(a,))

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    out._backward = backward
    return out


def sort_columns(a: Tensor) -> Tensor:
    """Sort each column ascending; gradient is scattered back through the permutation."""
    a = _wrap(a)
    order = np.argsort(a.data, axis=0, kind="stable")
    out = Tensor(np.take_along_axis(a.data, order, axis=0), parents=(a,))

    def backward(g):
        scattered = np.zeros_like(a.data)
        np.put_along_axis(scattered, order, g, axis=0)
        _accumulate(a, scattered)

    out._backward = backward
    return out


def l2norm_rows(a: Tensor) -> Tensor:
    """Per-row Euclidean norm, shape (n, 1). Gradient at an all-zero row is 0."""
    a = _wrap(a)
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    out = Tensor(norms, parents=(a,))

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        _accumulate(a, g * a.data / safe)

    out._backward = backward
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _wrap(a)
    shift = a.data - a.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    out = Tensor(shift - logz, parents=(a,))
    softmax = np.exp(out.data)

    def backward(g):
        _accumulate(a, g - softmax * g.sum(axis=1, keepdims=True))

    out._backward = backward
    return out


def softmax_rows(a: Tensor) -> Tensor:
    return exp(log_softmax_rows(a))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; contributes zero gradient to ancestors."""
    return Tensor(_wrap(a).data.copy())


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dnode into .grad for every node reachable from loss.

    Grads of nodes already carrying one are added to, so callers zero
    parameter grads (grad = None) before each step.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_of(t: Tensor) -> Array:
    """Gradient of the last backward pass; zeros when the tensor was unused."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# MLP stacks
# ---------------------------------------------------------------------------

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class MlpSpec:
    """Widths and activations of a dense stack; consecutive widths chain."""

    in_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ValueError("MlpSpec needs at least one layer")
        if len(self.widths) != len(self.activations):
            raise ValueError("one activation per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.in_dim < 1 or any(w < 1 for w in self.widths):
            raise ValueError("dimensions must be positive")

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        fan_in = self.in_dim
        for w in self.widths:
            dims.append((fan_in, w))
            fan_in = w
        return dims


def mlp_spec(in_dim: int, *widths: int, final_activation: str = "none") -> MlpSpec:
    """ReLU on every layer except the last, which gets final_activation."""
    acts = ("relu",) * (len(widths) - 1) + (final_activation,)
    return MlpSpec(in_dim, tuple(widths), acts)


@dataclass
class MlpParams:
    """Weight/bias leaves for one MLP, in layer order."""

    layers: list[tuple[Tensor, Tensor]]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def arrays(self) -> list[Array]:
        return [t.data for t in self.tensors()]


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """He-uniform weights, small uniform biases (keeps embeddings off exact zero)."""
    layers = []
    for fan_in, fan_out in spec.layer_dims():
        limit = math.sqrt(6.0 / fan_in)
        w = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                   requires_grad=True)
        b_limit = 1.0 / math.sqrt(fan_in)
        b = Tensor(rng.uniform(-b_limit, b_limit, size=(1, fan_out)),
                   requires_grad=True)
        layers.append((w, b))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, spec: MlpSpec, batch) -> Tensor:
    """Run the affine+activation stack; records onto the graph."""
    x = _wrap(batch)
    if x.data.ndim != 2 or x.data.shape[1] != spec.in_dim:
        raise ValueError(
            f"batch width {x.data.shape} does not match in_dim {spec.in_dim}")
    for (w, b), act in zip(params.layers, spec.activations):
        x = add(matmul(x, w), b)
        if act == "relu":
            x = relu(x)
    return x


def mlp_forward_data(params: MlpParams, spec: MlpSpec, batch: Array) -> Array:
    """Plain-numpy forward pass: no graph, used for frozen-parameter inference."""
    x = _as_f64(batch)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(
            f"batch width {x.shape} does not match in_dim {spec.in_dim}")
    for (w, b), act in zip(params.layers, spec.activations):
        x = x @ w.data + b.data
        if act == "relu":
            x = np.maximum(x, 0.0)
    return x


def mlp_from_arrays(spec: MlpSpec, arrays: list[Array]) -> MlpParams:
    """Rebuild parameters from a flat array list, validating shapes."""
    dims = spec.layer_dims()
    if len(arrays) != 2 * len(dims):
        raise ValueError(f"expected {2 * len(dims)} arrays, got {len(arrays)}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(dims):
        w, b = _as_f64(arrays[2 * i]), _as_f64(arrays[2 * i + 1])
        if w.shape != (fan_in, fan_out) or b.shape != (1, fan_out):
            raise ValueError(
                f"layer {i}: got {w.shape}/{b.shape}, "
                f"expected {(fan_in, fan_out)}/{(1, fan_out)}")
        layers.append((Tensor(w.copy(), requires_grad=True),
                       Tensor(b.copy(), requires_grad=True)))
    return MlpParams(layers)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor],
              grads: list[Array] | None = None) -> list[Tensor]:
    """One Adam update in place.

    Weight decay is decoupled: params shrink by (1 - lr*wd) before the
    Adam delta is applied. Grads default to each tensor's accumulated
    .grad (zeros when unused).
    """
    if grads is None:
        grads = [grad_of(p) for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in adam_step")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError("non-finite parameter after adam_step")
    return params


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst: tuple[int, int] | None  # (param index, flat coordinate)

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_err < tolerance


def grad_check(params: list[Tensor], loss_fn, *, n_coords: int = 120,
               h: float = 1e-5, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    loss_fn must be a deterministic closure over params (draw any noise
    once, outside). Samples at least n_coords parameter coordinates
    (all of them when the model is smaller than that).

    The relative-error denominator is floored at 1e-6 so coordinates
    whose true gradient is zero do not amplify finite-difference noise.
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [grad_of(p).copy() for p in params]

    sizes = [p.data.size for p in params]
    coords = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    if len(coords) > n_coords:
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in picked]

    max_rel, worst = 0.0, None
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        saved = flat[j]
        flat[j] = saved + h
        up = float(loss_fn().data)
        flat[j] = saved - h
        down = float(loss_fn().data)
        flat[j] = saved
        fd = (up - down) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        if rel > max_rel:
            max_rel, worst = rel, (i, j)
    return GradCheckReport(max_rel_err=max_rel, n_checked=len(coords), worst=worst)
