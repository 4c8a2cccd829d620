"""Dense float32 tensors with reverse-mode automatic differentiation.

Each operation returns a new :class:`Tensor` that keeps references to its
parents and a closure computing the vector-Jacobian product. ``backward``
walks the graph once in reverse topological order.

Shape rules
-----------
add, sub, mul
    numpy broadcasting; gradients are summed back to each operand's shape.
matmul
    ``(n, k) @ (k, m) -> (n, m)``.
conv2d
    input ``(B, C, H, W)``, weight ``(O, C, kh, kw)``, integer stride and
    zero padding; output ``(B, O, (H + 2p - kh) // s + 1, ...)``.
avgpool2d
    non-overlapping ``k x k`` windows; H and W must be divisible by k.
batch_norm
    input ``(B, C, H, W)`` or ``(B, C)``, per-channel weight/bias ``(C,)``.
reshape, relu, scale
    elementwise or size-preserving.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "strict_finite",
    "precision",
    "default_dtype",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "conv2d",
    "avgpool2d",
    "global_avgpool",
    "relu",
    "batch_norm",
    "reshape",
    "sum",
    "mean",
    "cross_entropy_mean",
    "toposort",
    "backward",
    "grad",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


_state = {"grad": True, "strict": False, "dtype": np.float32, "relu_log": None}


def default_dtype():
    return _state["dtype"]


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def _setting(key, value):
    old = _state[key]
    _state[key] = value
    try:
        yield
    finally:
        _state[key] = old


def no_grad():
    """Context manager: operations inside do not record the graph."""
    return _setting("grad", False)


def strict_finite(enabled: bool = True):
    """Context manager: reject NaN/inf operands in every primitive."""
    return _setting("strict", enabled)


def precision(dtype):
    """Context manager switching the dtype of newly created tensors.

    Production code runs in float32; gradient checks evaluate finite
    differences under ``precision(np.float64)``.
    """
    return _setting("dtype", np.dtype(dtype).type)


@contextlib.contextmanager
def record_relu_masks():
    """Collect the on/off mask of every ReLU evaluated inside the block.

    Finite-difference checks use it to tell whether a perturbation moved
    some unit across the kink at zero.
    """
    log: list[np.ndarray] = []
    with _setting("relu_log", log):
        yield log


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_vjp", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        dtype = dtype or _state["dtype"]
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def backward(self) -> int:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(opname: str, arrays: Iterable[np.ndarray]) -> None:
    if not _state["strict"]:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{opname}: non-finite input of shape {a.shape}")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(opname: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are incompatible") from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", (a.data, b.data))

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", (a.data, b.data))

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", (a.data, b.data))

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    _check_finite("scale", (a.data,))
    c = float(c)

    def vjp(g, needs):
        return (g * a.data.dtype.type(c),)

    return _make(a.data * a.data.dtype.type(c), (a,), vjp, "scale")


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", (a.data,))
    mask = a.data > 0
    if _state["relu_log"] is not None:
        _state["relu_log"].append(mask)

    def vjp(g, needs):
        return (g * mask,)

    return _make(np.where(mask, a.data, a.data.dtype.type(0)), (a,), vjp, "relu")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    orig = a.shape

    def vjp(g, needs):
        return (g.reshape(orig),)

    return _make(out, (a,), vjp, "reshape")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def vjp(g, needs):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size

    def vjp(g, needs):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), vjp, "mean")


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    _check_finite("matmul", (a.data, b.data))

    def vjp(g, needs):
        return (
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        )

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-d cross-correlation via explicit im2col."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} are incompatible")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
    _check_finite("conv2d", (x.data, w.data))
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} are incompatible")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, Ho, Wo, C, kh, kw) -> rows of the im2col matrix
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g, needs):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = None
        if needs[1]:
            gw = (gmat.T @ cols).reshape(w.shape)
        if needs[0]:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return _make(out, (x, w), vjp, "conv2d")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got shape {x.shape}")
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avgpool2d: shape {x.shape} not divisible by window ({k}, {k})")
    _check_finite("avgpool2d", (x.data,))
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
    inv = x.data.dtype.type(1.0 / (k * k))

    def vjp(g, needs):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * inv, (B, C, H // k, k, W // k, k))
        return (gx.reshape(B, C, H, W),)

    return _make(out, (x,), vjp, "avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """Average over the spatial extent: ``(B, C, H, W) -> (B, C)``."""
    B, C, H, W = x.shape
    if H != W:
        raise ShapeError(f"global_avgpool: expected square maps, got shape {x.shape}")
    return reshape(avgpool2d(x, H), (B, C))


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel affine normalization.

    Training mode normalizes with the batch statistics (and differentiates
    through them) and, when ``update_stats``, folds them into the running
    buffers in place. Eval mode uses the frozen running statistics.
    """
    if x.data.ndim not in (2, 4) or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: shapes {x.shape} and {weight.shape} are incompatible")
    _check_finite("batch_norm", (x.data, weight.data, bias.data))
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    dt = x.data.dtype.type
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            n = x.data.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * weight.data.reshape(bshape) + bias.data.reshape(bshape)

    def vjp(g, needs):
        gw = (g * xhat).sum(axis=axes) if needs[1] else None
        gb = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * weight.data.reshape(bshape)
            if training:
                m = dt(x.data.size // x.shape[1])
                gx = (
                    inv_std.reshape(bshape)
                    / m
                    * (
                        m * gxhat
                        - gxhat.sum(axis=axes).reshape(bshape)
                        - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                    )
                )
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gw, gb

    return _make(out.astype(x.data.dtype, copy=False), (x, weight, bias), vjp, "batch_norm")


# --- loss ------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean: expected (B, C) logits, got shape {logits.shape}")
    B, C = logits.shape
    if B == 0:
        raise ValueError("cross_entropy_mean: empty batch")
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy_mean: shapes {logits.shape} and {labels.shape} are incompatible")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"cross_entropy_mean: labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    _check_finite("cross_entropy_mean", (logits.data,))
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def vjp(g, needs):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / B),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp, "cross_entropy")


# --- graph traversal -------------------------------------------------------

def toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through recorded parents, parents first."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, wanted: set[int] | None) -> tuple[dict[int, np.ndarray], list[Tensor], int]:
    if root.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = toposort(root)
    # live[id] marks nodes whose gradient must be computed
    if wanted is None:
        live = {id(n) for n in order if n.requires_grad}
    else:
        live = set()
        for n in order:
            if id(n) in wanted or any(id(p) in live for p in n.parents):
                live.add(id(n))
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.data.dtype)}
    visits = 0
    for node in reversed(order):
        visits += 1
        g = grads.get(id(node))
        if g is None or not node.parents:
            continue
        needs = tuple(p.requires_grad and id(p) in live for p in node.parents)
        if not any(needs):
            continue
        for p, pg, need in zip(node.parents, node._vjp(g, needs), needs):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if node is not root and (wanted is None or id(node) not in wanted):
            del grads[id(node)]
    return grads, order, visits


def backward(loss: Tensor) -> int:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the number of graph nodes visited (each exactly once).
    """
    grads, order, visits = _propagate(loss, None)
    for node in order:
        if node.is_leaf and node.requires_grad and id(node) in grads:
            g = grads[id(node)]
            node.grad = g.copy() if node.grad is None else node.grad + g
    return visits


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``.grad``.

    Only the subgraph connecting ``loss`` to ``inputs`` is differentiated, so
    parameter gradients are never formed during input attacks.
    """
    grads, _, _ = _propagate(loss, {id(t) for t in inputs})
    return [grads.get(id(t), np.zeros(t.shape, dtype=t.data.dtype)) for t in inputs]
