"""Minimal reverse-mode differentiable array engine.

Values are double-precision numpy arrays wrapped in :class:`Tensor`.  Every
differentiable op records a :class:`Node` (op name, inputs, and a closure over
the forward values it needs) on its output.  :func:`backward` walks the
recorded :class:`Graph` in reverse topological order and accumulates
gradients into the ``grad`` slots of leaf tensors.

Only the primitives the classifier and the consistency losses need are
provided.  Apart from scalar-with-tensor arithmetic there is no broadcasting;
shape mismatches raise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BoundsError, ConfigError, InputError, UsageError

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "backward",
    "zero_grad",
    "SGD",
    "conv2d",
    "bias_add",
    "relu",
    "maxpool2",
    "global_average_pool",
    "gather_spatial",
    "softmax_cross_entropy",
    "squared_l2_mean",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "mean_rows",
    "concat_rows",
    "stack_rows",
    "kink_margin",
    "numerical_grad",
    "gradcheck",
]


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``grad`` array of the same shape.  Op outputs never hold a ``grad``;
    their cotangents live only for the duration of :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 4:
            raise InputError(f"tensor rank must be at most 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self._node.op}" if self._node else ""
        return f"Tensor(shape={self.shape}{label}{op})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True, eq=False)
class Node:
    """One recorded op: maps the output cotangent to one cotangent per input."""

    op: str
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _emit(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = Node(op, tuple(inputs), vjp) if out.requires_grad else None
    return out


class Graph:
    """Topologically ordered view of everything that feeds ``output``.

    ``order`` lists gradient-carrying tensors such that each op's inputs
    precede it; :func:`backward` visits it back to front.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in reversed(t._node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        self.order = order

    @property
    def ops(self) -> list[Node]:
        return [t._node for t in self.order if t._node is not None]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t._node is None]

    def __len__(self) -> int:
        return len(self.order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls accumulate; clearing is explicit (:func:`zero_grad`).
    """
    if loss.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is None:
        graph = Graph(loss)
    elif graph.output is not loss:
        raise UsageError("graph was built for a different output tensor")

    cot: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(graph.order):
        g = cot.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad += g
            continue
        for inp, gi in zip(t._node.inputs, t._node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


class SGD:
    """Heavy-ball SGD: ``v <- momentum*v + grad``, ``p <- p - lr*v``.

    Gradients are zeroed after each step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if not lr > 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {p.name or p!r} has no gradient slot")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Convolutional primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation, ``[N,C,H,W] * [O,C,kh,kw] -> [N,O,H',W']``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ConfigError(f"conv2d channel mismatch: input has C={c}, kernel expects C={kc}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigError(
            f"conv2d output extent not integral: H+2*pad-kh={hp - kh}, W+2*pad-kw={wp - kw}, stride={stride}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk

    return _emit(out, "conv2d", (x, kernel), vjp)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``[C]`` to ``[N,C,H,W]``."""
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise InputError(f"bias of shape {bias.shape} does not match channels of {x.shape}")
    out = x.data + bias.data[None, :, None, None]

    def vjp(g):
        return g, g.sum(axis=(0, 2, 3))

    return _emit(out, "bias_add", (x, bias), vjp)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    out = np.maximum(x.data, 0.0)  # unlike a masked select, keeps NaN visible

    def vjp(g):
        return (np.where(active, g, 0.0),)

    return _emit(out, "relu", (x,), vjp)


def maxpool2(x: Tensor) -> Tensor:
    """Max over disjoint 2x2 windows; ties route to the first row-major maximiser."""
    if x.ndim != 4:
        raise ConfigError(f"maxpool2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even spatial extents, got H={h} W={w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _emit(out, "maxpool2", (x,), vjp)


def global_average_pool(maps: Tensor) -> Tensor:
    if maps.ndim != 4:
        raise InputError(f"global_average_pool expects [N,C,H,W], got {maps.shape}")
    n, c, h, w = maps.shape
    if h < 1 or w < 1:
        raise InputError(f"empty spatial extent {h}x{w}")
    out = maps.data.mean(axis=(2, 3))
    area = float(h * w)

    def vjp(g):
        return (np.broadcast_to((g / area)[:, :, None, None], maps.shape).copy(),)

    return _emit(out, "global_average_pool", (maps,), vjp)


def gather_spatial(features: Tensor, coords) -> Tensor:
    """Pick feature columns at spatial locations.

    ``features`` is ``[D,H,W]`` with ``(row, col)`` coordinates, or a batch
    ``[N,D,H,W]`` with ``(image, row, col)`` coordinates.  Returns ``[K,D]``.
    The backward pass scatter-adds, so duplicate coordinates sum.
    """
    cs = np.asarray(coords, dtype=np.int64)
    batched = features.ndim == 4
    width = 3 if batched else 2
    if features.ndim not in (3, 4):
        raise InputError(f"gather_spatial expects [D,H,W] or [N,D,H,W], got {features.shape}")
    if cs.ndim != 2 or cs.shape[1] != width or cs.shape[0] < 1:
        raise InputError(f"coords must be a non-empty sequence of {width}-tuples, got shape {cs.shape}")
    limits = (features.shape[0],) + features.shape[-2:] if batched else features.shape[-2:]
    for coord in cs:
        if any(v < 0 or v >= lim for v, lim in zip(coord, limits)):
            raise BoundsError(f"coordinate {tuple(int(v) for v in coord)} outside grid {tuple(limits)}")

    if batched:
        index = (cs[:, 0], slice(None), cs[:, 1], cs[:, 2])
        out = features.data[index]
    else:
        index = (slice(None), cs[:, 0], cs[:, 1])
        out = features.data[index].T.copy()

    def vjp(g):
        gf = np.zeros(features.shape)
        np.add.at(gf, index, g if batched else g.T)
        return (gf,)

    return _emit(out, "gather_spatial", (features,), vjp)


# ---------------------------------------------------------------------------
# Losses and small algebra
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise InputError(f"logits must be [N,Y], got {logits.shape}")
    n, y = logits.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise InputError(f"{lab.shape[0]} labels for {n} rows of logits")
    if np.any(lab < 0) or np.any(lab >= y):
        raise InputError(f"labels must lie in [0, {y}), got {lab.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = np.array(-logp[rows, lab].mean())

    def vjp(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        return (d * (g / n),)

    return _emit(out, "softmax_cross_entropy", (logits,), vjp)


def squared_l2_mean(a: Tensor, b: Tensor) -> Tensor:
    """``(1/K) * sum_k ||a_k - b_k||^2`` for ``[K,D]`` operands."""
    if a.shape != b.shape or a.ndim != 2:
        raise InputError(f"squared_l2_mean needs two equal [K,D] shapes, got {a.shape} and {b.shape}")
    k = a.shape[0]
    diff = a.data - b.data
    out = np.array((diff * diff).sum() / k)

    def vjp(g):
        ga = diff * (2.0 * g / k)
        return ga, -ga

    return _emit(out, "squared_l2_mean", (a, b), vjp)


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise InputError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.array(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _emit(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _emit(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _emit(a.data * b.data, "mul", (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _emit(a.data * factor, "scale", (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(a.shape, float(g)),)

    return _emit(np.array(a.data.sum()), "sum_all", (a,), vjp)


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a ``[K,D]`` tensor."""
    if a.ndim != 2 or a.shape[0] < 1:
        raise InputError(f"mean_rows expects non-empty [K,D], got {a.shape}")
    k = a.shape[0]

    def vjp(g):
        return (np.broadcast_to(g / k, a.shape).copy(),)

    return _emit(a.data.mean(axis=0), "mean_rows", (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise InputError("concat_rows needs at least one tensor")
    width = parts[0].shape[1:]
    if any(p.ndim != 2 or p.shape[1:] != width for p in parts):
        raise InputError(f"concat_rows needs [K_i,D] tensors with one D, got {[p.shape for p in parts]}")
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _emit(np.concatenate([p.data for p in parts], axis=0), "concat_rows", tuple(parts), vjp)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise InputError("stack_rows needs at least one tensor")
    if any(r.ndim != 1 or r.shape != rows[0].shape for r in rows):
        raise InputError(f"stack_rows needs equal 1-D tensors, got {[r.shape for r in rows]}")

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))

    return _emit(np.stack([r.data for r in rows]), "stack_rows", tuple(rows), vjp)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def kink_margin(output: Tensor) -> float:
    """Distance of the recorded forward pass from the nearest non-differentiable point.

    Looks at every relu input (distance to 0) and every max-pool window
    (gap between the two largest entries).  Windows of a relu output that
    are entirely clamped to zero are skipped: their inputs already sit clear
    of the relu kink, so a small perturbation cannot separate the tie.
    Central differences are only meaningful when each perturbation stays
    well inside this margin.
    """
    margin = np.inf
    for node in Graph(output).ops:
        src = node.inputs[0].data
        if node.op == "relu":
            margin = min(margin, float(np.abs(src).min(initial=np.inf)))
        elif node.op == "maxpool2":
            n, c, h, w = src.shape
            win = src.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top2 = np.sort(win, axis=1)[:, -2:]
            src_node = node.inputs[0]._node
            if src_node is not None and src_node.op == "relu":
                top2 = top2[top2[:, 1] > 0]
            margin = min(margin, float((top2[:, 1] - top2[:, 0]).min(initial=np.inf)))
    return margin


def numerical_grad(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``wrt.data``."""
    grad = np.zeros(wrt.shape)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def gradcheck_terms(
    fn: Callable[[], Sequence[Tensor]],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> list[float]:
    """Check several scalar terms that share one forward pass.

    ``fn`` returns a sequence of scalar tensors.  Each central-difference
    probe evaluates ``fn`` once and reads every term, so checking k terms
    costs no more forward passes than checking one.  An entry passes when
    ``|analytic - numeric| <= max(rtol * max(|analytic|, |numeric|), atol)``;
    the result holds, per term, the worst ratio of error to allowance, so
    ``<= 1`` means every entry passed.
    """
    analytic = []
    for k in range(len(fn())):
        zero_grad(inputs)
        backward(fn()[k])
        analytic.append([t.grad.copy() for t in inputs])
    zero_grad(inputs)

    worst = [0.0] * len(analytic)
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        numeric = np.zeros((len(analytic), flat.size))
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = [v.item() for v in fn()]
            flat[j] = orig - eps
            lo = [v.item() for v in fn()]
            flat[j] = orig
            numeric[:, j] = (np.array(hi) - np.array(lo)) / (2.0 * eps)
        for k, grads in enumerate(analytic):
            a = grads[i].reshape(-1)
            allowance = np.maximum(rtol * np.maximum(np.abs(a), np.abs(numeric[k])), atol)
            worst[k] = max(worst[k], float((np.abs(a - numeric[k]) / allowance).max(initial=0.0)))
    return worst


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> float:
    """Single-loss form of :func:`gradcheck_terms`; ``<= 1`` means every entry passed."""
    return gradcheck_terms(lambda: (fn(),), inputs, eps, rtol, atol)[0]
