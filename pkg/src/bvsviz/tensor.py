"""Dense tensors with a recorded tape for reverse-mode differentiation.

Only the small layer set needed by the residual classifier is provided:
convolution, ReLU, 2x2 max pooling, global average pooling, dense layers and
elementwise add/mul/sum. ReLU's backward rule is switchable between the
standard rule and the guided-backpropagation rule.
"""

from __future__ import annotations

import contextlib
import enum
import logging
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)


class GradMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32}
# the ReLU rule is per thread so guided and standard passes can run side by side
_local = threading.local()


def _grad_mode() -> GradMode:
    return getattr(_local, "mode", GradMode.STANDARD)


def set_precision(name: str) -> None:
    """Set the global floating point precision ("float32" or "float64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An array plus the tape entry that produced it.

    ``grad`` is populated by :meth:`backward` for leaves with
    ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap the result of a forward computation and record it on the tape."""
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by forward op '{op}'")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._released = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic helpers
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / scalar)

    def __pow__(self, exponent: int):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, mode: GradMode = GradMode.STANDARD, inputs: Optional[Iterable["Tensor"]] = None,
                 grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode accumulation from this tensor.

        ``self`` must be a scalar unless ``grad`` (the seed) is given. When
        ``inputs`` is given, only those leaves receive gradients and branches
        that cannot reach them are skipped. The tape is released afterwards;
        a second call without a new forward pass raises.
        """
        if self._released:
            raise RuntimeError("backward called twice on the same graph; run the forward pass again")
        if self._backward is None:
            raise RuntimeError("backward called on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        elif grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} does not match output {self.shape}")

        order = _topological_order(self)
        targets = None if inputs is None else {id(t) for t in inputs}
        reaches: dict[int, bool] = {}
        for node in order:  # leaves first
            if node._backward is None:
                reaches[id(node)] = node.requires_grad and (targets is None or id(node) in targets)
            else:
                reaches[id(node)] = any(reaches[id(p)] for p in node._parents)

        grads: dict[int, np.ndarray] = {id(self): grad}
        previous_mode = _grad_mode()
        _local.mode = mode
        try:
            for node in reversed(order):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if node._backward is None:
                    if reaches[id(node)]:
                        node.grad = g.copy() if node.grad is None else node.grad + g
                    continue
                needs = [reaches[id(p)] for p in node._parents]
                parent_grads = node._backward(g, needs)
                for parent, pg, need in zip(node._parents, parent_grads, needs):
                    if not need or pg is None:
                        continue
                    if not np.all(np.isfinite(pg)):
                        raise FloatingPointError(f"non-finite gradient produced by backward of '{node._op}'")
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        finally:
            _local.mode = previous_mode

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ops

def add(a, b) -> Tensor:
    """Elementwise sum. ``b`` may also be a per-channel bias of shape (C,) for NCHW ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return Tensor.from_op(a.data + b.data, (a, b), lambda g, needs: (g, g), "add")
    if b.data.ndim == 0:
        return Tensor.from_op(a.data + b.data, (a, b), lambda g, needs: (g, g.sum()), "add")
    if a.data.ndim == 4 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        out = a.data + b.data[None, :, None, None]
        return Tensor.from_op(out, (a, b), lambda g, needs: (g, g.sum(axis=(0, 2, 3))), "add_bias")
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return Tensor.from_op(a.data + b.data, (a, b), lambda g, needs: (g, g.sum(axis=0)), "add_bias")
    raise ValueError(f"add: cannot combine shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or tensor times a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        a = as_tensor(a)
        return Tensor.from_op(a.data * c, (a,), lambda g, needs: (g * c,), "scale")
    a = as_tensor(a)
    _check_same_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g, needs: (g * bd, g * ad), "mul")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor.from_op(np.asarray(a.data.sum()), (a,),
                          lambda g, needs: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(original),), "reshape")


def select(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``a[rows, cols]`` from a 2-D tensor (used to pick class logits)."""
    shape = a.shape

    def backward(g, needs):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return Tensor.from_op(a.data[rows, cols], (a,), backward, "select")


# activations

def relu_backward(upstream: np.ndarray, forward_input: np.ndarray, mode: GradMode) -> np.ndarray:
    """ReLU gradient. Guided mode also drops non-positive upstream gradient."""
    _check_same_shape(upstream, forward_input, "relu_backward")
    mask = forward_input > 0
    if mode is GradMode.GUIDED:
        mask &= upstream > 0
    return np.where(mask, upstream, np.zeros_like(upstream))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def backward(g, needs):
        return (relu_backward(g, xd, _grad_mode()),)

    return Tensor.from_op(out, (x,), backward, "relu")


# convolution and pooling

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with a KCkhkw kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, kc, kh, kw = w.shape
    if kc != c:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but kernel {w.shape} expects {kc}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (padding {padding})")
    if b is not None and b.shape != (k,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (N, C, Ho, Wo, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    wdata = w.data

    def backward(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        dx = dw = db = None
        if needs[0]:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if needs[1]:
            dw = (g2.T @ cols).reshape(wdata.shape)
        if b is not None and needs[2]:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; the first maximum in each window gets the gradient."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d needs even spatial extents, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g, needs):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g, needs):
        dx = g @ wd if needs[0] else None
        dw = g.T @ xd if needs[1] else None
        if b is None:
            return dx, dw
        return dx, dw, (g.sum(axis=0) if needs[2] else None)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "dense")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# saliency

def guided_gradient(model, x: Tensor | np.ndarray, class_index: int) -> np.ndarray:
    """Guided-backprop gradient of the ``class_index`` logit w.r.t. the input pixels.

    ``model`` is any callable mapping an (N, 1, h, w) tensor to (N, n_classes)
    logits. Samples are independent, so for N > 1 every sample receives the
    gradient of its own logit. Parameter gradients are left untouched.
    """
    data = x.data if isinstance(x, Tensor) else x
    inp = Tensor(np.array(data, dtype=get_dtype()), requires_grad=True)
    logits = model(inp)
    n_classes = logits.shape[1]
    if not 0 <= class_index < n_classes:
        raise ValueError(f"class_index {class_index} outside [0, {n_classes})")
    seed = np.zeros(logits.shape, dtype=logits.data.dtype)
    seed[:, class_index] = 1
    logits.backward(mode=GradMode.GUIDED, inputs=[inp], grad=seed)
    if inp.grad is None:
        return np.zeros_like(inp.data)
    return inp.grad


# gradient checking

def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
