"""Dense tensors with reverse-mode automatic differentiation.

A small define-by-run engine backed by numpy. Every operation records its
parent tensors and a backward rule on the output; calling ``backward`` on a
scalar loss replays the reachable subgraph in reverse topological order and
accumulates gradients into every tensor that requires them.

Training runs in float32. Gradient checking requires float64 inputs because
central finite differences are unreliable in single precision.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)


class Tensor:
    """N-dimensional array participating in the autodiff graph.

    ``grad`` is eagerly allocated (zeros) for tensors created with
    ``requires_grad=True``, so a leaf that never appears in a loss reports an
    all-zero gradient after any backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        backward(self)


class Tape:
    """Topologically ordered record of the operations reachable from a root.

    Every node's parents appear before it, so a single reversed traversal
    propagates gradients to all participating tensors.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.grad = np.zeros_like(out.data)
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad += g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``grad`` for every reachable tensor.

    The loss must be scalar. Gradients add onto existing ``grad`` buffers;
    call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.trace(loss)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    data = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), back)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def back(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), back)


def flatten(a: Tensor) -> Tensor:
    """N x ... -> N x (product of the rest)."""
    return reshape(a, (a.data.shape[0], -1))


def tsum(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), back)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), back)


def global_avg_pool(a: Tensor) -> Tensor:
    """N x C x H x W -> N x C, averaging over the spatial grid."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {a.data.shape}")
    n_spatial = a.data.shape[2] * a.data.shape[3]
    data = a.data.mean(axis=(2, 3))

    def back(g):
        _accum(a, np.broadcast_to((g / n_spatial)[:, :, None, None], a.data.shape))

    return _make(data, (a,), back)


def max_pool2d(a: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties send the gradient to the first
    occupant of the window (flat index order)."""
    if a.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {a.data.shape}")
    n, c, h, w = a.data.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d window {k} does not tile input {a.data.shape}")
    ho, wo = h // k, w // k
    windows = a.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = windows.argmax(axis=4)
    data = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]

    def back(g):
        gw = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=4)
        _accum(a, gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _make(data, (a,), back)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    return cols, (n, ho, wo), x.shape


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: N x C x H x W, w: F x C x k x k. Output spatial size must be integral:
    H' = (H + 2*padding - k) / stride + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    f, cw, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {w.data.shape}")
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded input {(h + 2 * padding, wd + 2 * padding)}")
    if (h + 2 * padding - k) % stride or (wd + 2 * padding - k) % stride:
        raise ShapeError(
            f"conv2d output size is not integral for input {x.data.shape}, "
            f"kernel {k}, stride {stride}, padding {padding}"
        )

    cols, (_, ho, wo), padded_shape = _im2col(x.data, k, stride, padding)
    w_flat = w.data.reshape(f, -1)
    out = (cols @ w_flat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def back(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        if w.requires_grad:
            _accum(w, (g_flat.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (g_flat @ w_flat).reshape(n, ho, wo, c, k, k)
            gx = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + wd]
            _accum(x, gx)

    return _make(np.ascontiguousarray(out), (x, w), back)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class labels.

    reduction "mean" gives a scalar with gradient (softmax - onehot)/N;
    "none" gives the per-sample loss vector.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): min={labels.min()}, max={labels.max()}")

    logp = _log_softmax(logits.data)
    per_sample = -logp[np.arange(n), labels]
    softmax = np.exp(logp)
    onehot = np.zeros_like(softmax)
    onehot[np.arange(n), labels] = 1.0

    if reduction == "mean":
        def back(g):
            _accum(logits, g * (softmax - onehot) / n)

        return _make(np.asarray(per_sample.mean(), dtype=logits.data.dtype), (logits,), back)
    if reduction == "none":
        def back(g):
            _accum(logits, g[:, None] * (softmax - onehot))

        return _make(per_sample.astype(logits.data.dtype, copy=False), (logits,), back)
    raise ContractError(f"unknown reduction {reduction!r}")


def grad_check(f, x: Tensor, eps: float = 1e-5, skip_near_kink=None, return_details: bool = False):
    """Max relative error between the analytic gradient of f at x and central
    finite differences.

    f must map a Tensor to a scalar Tensor and x must be float64; finite
    differences are only valid where f is differentiable throughout the eps
    window, so ``skip_near_kink`` (a predicate on x.data returning a boolean
    mask) excludes coordinates too close to a nondifferentiable point. With
    ``return_details`` the number of checked and skipped coordinates is
    returned alongside the error.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires float64 input (64-bit mode)")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if loss.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(loss)
    analytic = leaf.grad.reshape(-1).copy()

    skip = np.zeros(x.data.size, dtype=bool)
    if skip_near_kink is not None:
        skip = np.asarray(skip_near_kink(x.data), dtype=bool).reshape(-1)

    flat = x.data.reshape(-1)
    max_err = 0.0
    checked = 0
    for i in range(flat.size):
        if skip[i]:
            continue
        xp = flat.copy()
        xp[i] += eps
        fp = f(Tensor(xp.reshape(x.data.shape))).item()
        xm = flat.copy()
        xm[i] -= eps
        fm = f(Tensor(xm.reshape(x.data.shape))).item()
        cd = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - cd) / (abs(analytic[i]) + abs(cd) + 1e-12)
        max_err = max(max_err, err)
        checked += 1
    if return_details:
        return max_err, checked, int(skip.sum())
    return max_err
