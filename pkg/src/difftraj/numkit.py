"""Dense float64 arrays with a reverse-mode tape and an Adam optimizer.

Kernels wrap numpy arrays in :class:`Tensor` nodes and record backward
closures, micrograd style. The differentiable primitive set is fixed:

* ``affine`` (x @ w + b), elementwise ``relu`` / ``gelu``
* ``softmax`` over the last axis, ``layer_norm`` over the last axis
* ``concat``, ``reduce_sum`` / ``reduce_mean``
* fused multi-head scaled dot-product ``attention``
* ``segment_max`` (bin-wise max pooling for point-set encoders)
* elementwise ``+ - *`` and scalar scaling, as composition glue

There is no generic elementwise differentiation of user functions; new
primitives get an explicit backward here or nowhere. Everything runs in
float64 and every kernel output is checked finite, so NaN/Inf surfaces at
the op that produced it instead of three modules later. All reductions go
through numpy's deterministic evaluation order: identical inputs produce
bit-identical outputs and gradients.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor", "Adam", "NonFiniteError", "ShapeError",
    "affine", "relu", "gelu", "softmax", "layer_norm", "concat",
    "reduce_sum", "reduce_mean", "attention", "segment_max", "mse",
    "reshape", "broadcast_to",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class NumkitError(RuntimeError):
    pass


class ShapeError(NumkitError):
    pass


class NonFiniteError(NumkitError):
    pass


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """A float64 array plus its place in the tape.

    Leaf tensors hold data only; op results carry their parents and a
    closure that routes the output gradient back to them. ``backward``
    walks the tape in reverse topological order.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name: str = ""):
        self.data = _check_finite(_as_array(data), name or "tensor")
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None):
        """Accumulate gradients of a scalarized output into every leaf.

        ``seed`` defaults to ones (i.e. gradient of ``sum(self)``); for a
        scalar output that is the ordinary derivative.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(seed)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match output {self.data.shape}"
                )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = seed.astype(np.float64, copy=True)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                _check_finite(node.grad, f"backward of {node.name or 'op'}")

    # -- operator glue -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise glue
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, (a, b), name="add")

    def backward(grad):
        a.grad += _unbroadcast(grad, a.shape)
        b.grad += _unbroadcast(grad, b.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, (a, b), name="mul")

    def backward(grad):
        a.grad += _unbroadcast(grad * b.data, a.shape)
        b.grad += _unbroadcast(grad * a.data, b.shape)

    out._backward = backward
    return out


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    out = Tensor(a.data * c, (a,), name="scale")

    def backward(grad):
        a.grad += grad * c

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitive kernels
# ---------------------------------------------------------------------------


def affine(x, w, b=None) -> Tensor:
    """x @ w + b over the last axis; leading axes are batch."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: x {x.shape} incompatible with w {w.shape}")
    data = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine: bias {b.shape} incompatible with w {w.shape}")
        data = data + b.data
        parents.append(b)
    out = Tensor(data, parents, name="affine")

    def backward(grad):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = grad.reshape(-1, w.shape[1])
        x.grad += (g2 @ w.data.T).reshape(x.shape)
        w.grad += x2.T @ g2
        if b is not None:
            b.grad += g2.sum(axis=0)

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,), name="relu")

    def backward(grad):
        x.grad += grad * (x.data > 0.0)

    out._backward = backward
    return out


def gelu(x) -> Tensor:
    """tanh-approximation gelu; smooth, cheap, and derivative in closed form."""
    x = _wrap(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t), (x,), name="gelu")

    def backward(grad):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        x.grad += grad * d

    out._backward = backward
    return out


def softmax(x) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (x,), name="softmax")

    def backward(grad):
        inner = (grad * y).sum(axis=-1, keepdims=True)
        x.grad += y * (grad - inner)

    out._backward = backward
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = Tensor(xn * gain.data + bias.data, (x, gain, bias), name="layer_norm")

    def backward(grad):
        gx_hat = grad * gain.data
        # d/dx of (x - mu) * inv with mu, inv functions of x
        term = gx_hat - gx_hat.mean(axis=-1, keepdims=True) \
            - xn * (gx_hat * xn).mean(axis=-1, keepdims=True)
        x.grad += term * inv
        axes = tuple(range(grad.ndim - 1))
        gain.grad += (grad * xn).sum(axis=axes)
        bias.grad += grad.sum(axis=axes)

    out._backward = backward
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, name="concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        for t, piece in zip(tensors, np.split(grad, splits, axis=axis)):
            t.grad += piece

    out._backward = backward
    return out


def reduce_sum(x, axis=None) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.data.sum(axis=axis), (x,), name="reduce_sum")

    def backward(grad):
        if axis is None:
            x.grad += grad * np.ones_like(x.data)
        else:
            x.grad += np.expand_dims(grad, axis) * np.ones_like(x.data)

    out._backward = backward
    return out


def reduce_mean(x, axis=None) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.data.mean(axis=axis), (x,), name="reduce_mean")
    count = x.size if axis is None else x.shape[axis]

    def backward(grad):
        if axis is None:
            x.grad += (grad / count) * np.ones_like(x.data)
        else:
            x.grad += np.expand_dims(grad, axis) / count * np.ones_like(x.data)

    out._backward = backward
    return out


def attention(q, k, v, n_heads: int = 1) -> Tensor:
    """Fused multi-head scaled dot-product attention.

    ``q`` is (..., L, d); ``k`` and ``v`` are (..., M, d) with d divisible
    by ``n_heads``. Head split/merge is internal bookkeeping of this one
    tape node, which keeps its backward auditable in a single place.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("attention: q/k/v widths or key/value lengths disagree")
    dh = d // n_heads

    def split(a):  # (..., N, d) -> (..., H, N, dh)
        return np.swapaxes(a.reshape(a.shape[:-1] + (n_heads, dh)), -3, -2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ np.swapaxes(kh, -1, -2)) / math.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)  # (..., H, L, M)
    oh = w @ vh
    merged = np.swapaxes(oh, -3, -2).reshape(q.shape)
    out = Tensor(merged, (q, k, v), name="attention")

    def backward(grad):
        gh = np.swapaxes(grad.reshape(grad.shape[:-1] + (n_heads, dh)), -3, -2)
        gv = np.swapaxes(w, -1, -2) @ gh
        gw = gh @ np.swapaxes(vh, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
        gq = (gs @ kh) / math.sqrt(dh)
        gk = (np.swapaxes(gs, -1, -2) @ qh) / math.sqrt(dh)

        def merge(a, like):
            return np.swapaxes(a, -3, -2).reshape(like.shape)

        q.grad += merge(gq, q.data)
        k.grad += merge(gk, k.data)
        v.grad += merge(gv, v.data)

    out._backward = backward
    return out


def segment_max(x, segment_ids, n_segments: int) -> Tensor:
    """Row-wise max pooling of ``x`` (M, d) into ``n_segments`` bins.

    ``segment_ids`` assigns each row to a bin; empty bins pool to zero.
    The gradient routes to the first argmax row per (bin, feature), which
    keeps backward deterministic under ties.
    """
    x = _wrap(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (x.shape[0],):
        raise ShapeError("segment_max: one segment id per row required")
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise ShapeError("segment_max: segment id out of range")
    d = x.shape[1]
    pooled = np.zeros((n_segments, d))
    arg_rows = np.full((n_segments, d), -1, dtype=np.int64)
    for seg in range(n_segments):
        rows = np.nonzero(ids == seg)[0]
        if rows.size == 0:
            continue
        block = x.data[rows]
        pooled[seg] = block.max(axis=0)
        arg_rows[seg] = rows[np.argmax(block, axis=0)]
    out = Tensor(pooled, (x,), name="segment_max")

    def backward(grad):
        for seg in range(n_segments):
            if arg_rows[seg, 0] < 0:
                continue
            for j in range(d):
                x.grad[arg_rows[seg, j], j] += grad[seg, j]

    out._backward = backward
    return out


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.data.reshape(shape), (x,), name="reshape")

    def backward(grad):
        x.grad += grad.reshape(x.shape)

    out._backward = backward
    return out


def broadcast_to(x, shape) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy(), (x,), name="broadcast")

    def backward(grad):
        x.grad += _unbroadcast(grad, x.shape)

    out._backward = backward
    return out


def mse(a, b) -> Tensor:
    """Mean squared error over all entries."""
    diff = add(_wrap(a), scale(_wrap(b), -1.0))
    return reduce_mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None):
        """Apply one update. ``grads`` defaults to each parameter's .grad."""
        if grads is None:
            grads = {}
            for name, p in self.params.items():
                if p.grad is None:
                    raise NumkitError(f"parameter {name!r} has no gradient")
                grads[name] = p.grad
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, "
                    f"parameter is {p.data.shape}"
                )
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
