"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every trainable computation in this package (encoders, heads, the contrastive
loss) is built from the primitives in this module so that one gradient
implementation serves the whole library.  Ops execute eagerly on numpy arrays;
when a :class:`GradTape` is active and any input requires gradients, the op is
recorded so :func:`backward` can replay the tape in reverse.

Conventions:

* all values are float64; integer inputs are converted on construction,
* elementwise binary ops follow numpy broadcasting (gradients are summed back
  over broadcast axes),
* any op whose forward result contains NaN/Inf raises :class:`NumericError`,
* tapes are single-threaded; distinct tapes may run on distinct threads.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "backward",
    "forward_op",
    "finite_difference_check",
    "cosine_similarity",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "gather", "relu", "exp", "log", "mean", "tsum", "l2_norm",
    "softmax", "softmax_cross_entropy", "group_norm", "weight_standardize",
    "conv2d",
]


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Operands have shapes the op does not accept."""


class NumericError(AutodiffError):
    """An op produced NaN/Inf or hit a degenerate value (zero norm, log<=0)."""


_tensor_ids = itertools.count(1)


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    ``requires_grad`` marks leaves the caller wants gradients for; tensors
    produced by recorded ops inherit it.  ``tid`` is a process-unique id used
    as the key into gradient maps.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tid = next(_tensor_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _TapeEntry:
    __slots__ = ("name", "input_ids", "output_id", "backward_fn")

    def __init__(self, name, input_ids, output_id, backward_fn):
        self.name = name
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of ops; context manager activating it on this thread.

    Entries are appended in execution order, which is already a topological
    order of the graph, so :func:`backward` is a single reverse sweep that
    visits each recorded op exactly once.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise AutodiffError("tape stack corrupted (exited out of order)")
        return False

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)

    def _record(self, name, inputs, output, backward_fn):
        for t in inputs:
            if t.requires_grad and t.tid not in self._produced:
                self._leaves[t.tid] = t
        self._produced.add(output.tid)
        self._entries.append(
            _TapeEntry(name, tuple(t.tid for t in inputs), output.tid, backward_fn)
        )

    def gradients(self, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Convenience wrapper: gradient of ``loss`` for each named tensor."""
        gmap = backward(self, loss)
        return {
            name: gmap.get(t.tid, np.zeros_like(t.data)) for name, t in params.items()
        }


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape``; returns {leaf tid: gradient array}.

    Leaves recorded on the tape but not reachable from ``loss`` get zero
    gradients.  ``loss`` must be a scalar (size-1) tensor.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for entry in reversed(tape._entries):
        g_out = grads.pop(entry.output_id, None)
        if g_out is None:
            continue
        g_inputs = entry.backward_fn(g_out)
        for tid, g in zip(entry.input_ids, g_inputs):
            if g is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
    out: dict[int, np.ndarray] = {}
    for tid, leaf in tape._leaves.items():
        out[tid] = grads.get(tid, np.zeros_like(leaf.data))
    return out


# ---------------------------------------------------------------------------
# op plumbing


def _finish(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"op '{name}' produced a non-finite value")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(name, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _finish("mul", (a, b), out, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise NumericError("op 'div' has a zero divisor")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _finish("div", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (-g,)

    return _finish("neg", (a,), -a.data, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _finish("matmul", (a, b), out, bw)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def bw(g):
        return (g.T,)

    return _finish("transpose", (a,), a.data.T.copy(), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _finish("reshape", (a,), out, bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bw(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", tuple(ts), out, bw)


def gather(a: Tensor, indices) -> Tensor:
    """Select rows of ``a`` (axis 0); backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= a.shape[0]):
        raise ShapeError(f"gather index out of range for first dim {a.shape[0]}")
    out = a.data[idx]
    shape = a.shape

    def bw(g):
        acc = np.zeros(shape, dtype=np.float64)
        np.add.at(acc, idx, g)
        return (acc,)

    return _finish("gather", (a,), out, bw)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    out = np.where(mask, a.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _finish("relu", (a,), out, bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="raise"):
        try:
            out = np.exp(a.data)
        except FloatingPointError as e:
            raise NumericError("op 'exp' overflowed") from e

    def bw(g):
        return (g * out,)

    return _finish("exp", (a,), out, bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("op 'log' needs strictly positive input")
    out = np.log(a.data)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _finish("log", (a,), out, bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size if axis is None else a.shape[axis]

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(np.float64) / count,)

    return _finish("mean", (a,), np.asarray(out), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum reduction (named ``tsum`` to avoid shadowing the builtin)."""
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(np.float64).copy(),)

    return _finish("sum", (a,), np.asarray(out), bw)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over all elements or along ``axis``.

    The backward rule divides by the norm, so zero norms raise rather than
    silently emitting NaN.
    """
    a = _as_tensor(a)
    sq = np.sum(a.data * a.data, axis=axis, keepdims=keepdims)
    out = np.sqrt(sq)
    ad = a.data

    def bw(g):
        if np.any(out == 0.0):
            raise NumericError("op 'l2_norm' backward at a zero-norm point")
        g = np.asarray(g)
        n = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            n = np.expand_dims(n, axis)
        return (g * ad / n,)

    return _finish("l2_norm", (a,), np.asarray(out), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", (a,), out, bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between softmax(logits) and target distributions.

    ``logits`` is (N, K); ``targets`` is (N, K) rows of probabilities (one-hot
    for hard labels, arbitrary distributions for soft labels).  Targets are
    treated as constants.  Uses the log-sum-exp shift for stability.
    """
    logits = _as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(
            f"softmax_cross_entropy expects matching (N, K) shapes, got {logits.shape} and {t.shape}"
        )
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = -(t * logp).sum() / n
    p = np.exp(logp)

    def bw(g):
        return (np.asarray(g) * (p - t) / n, None)

    return _finish("softmax_cross_entropy", (logits, _as_tensor(t)), np.asarray(out), bw)


# ---------------------------------------------------------------------------
# normalization ops


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (N, C, H, W): per-sample, per-group zero mean
    and unit variance, then per-channel affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm affine params must have shape (C,)")
    grouped = x.data.reshape(n, groups, c // groups * h * w)
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    gdata = gamma.data
    m = c // groups * h * w

    def bw(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = (g * gdata.reshape(1, c, 1, 1)).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        # standard normalization backward: remove the mean and the projection
        # onto xhat inside each group
        dx = inv * (
            dxhat
            - dxhat.mean(axis=2, keepdims=True)
            - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        return dx.reshape(n, c, h, w), dgamma, dbeta

    return _finish("group_norm", (x, gamma, beta), out, bw)


def weight_standardize(w: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize conv filters to zero mean / unit variance per output channel."""
    w = _as_tensor(w)
    if w.ndim != 4:
        raise ShapeError(f"weight_standardize expects (O, I, KH, KW), got {w.shape}")
    o = w.shape[0]
    flat = w.data.reshape(o, -1)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    what = (flat - mu) * inv
    out = what.reshape(w.shape)
    m = flat.shape[1]

    def bw(g):
        gf = g.reshape(o, -1)
        dw = inv * (
            gf - gf.mean(axis=1, keepdims=True) - what * (gf * what).mean(axis=1, keepdims=True)
        )
        return (dw.reshape(w.shape),)

    return _finish("weight_standardize", (w,), out, bw)


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW layout.

    Output spatial size per axis: floor((in + 2*pad - k) / stride) + 1.
    Implemented as im2col + matmul; the backward pass runs the transposed
    slice-accumulation (col2im).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: x has {c}, w expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding {ph}x{pw}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # im2col via one strided slice per kernel offset
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    cols_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    w_mat = w.data.reshape(o, -1).T
    out = (cols_mat @ w_mat).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    x_shape, w_shape = x.shape, w.shape

    def bw(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        dw = (cols_mat.T @ g_mat).T.reshape(w_shape)
        dcols = (g_mat @ w_mat.T).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, i, j]
        if ph or pw:
            dx = dxp[:, :, ph : ph + h, pw : pw + wd]
        else:
            dx = dxp
        return dx.reshape(x_shape), dw

    return _finish("conv2d", (x, w), out, bw)


# ---------------------------------------------------------------------------
# composed helpers


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two 1-D tensors, differentiable; zero-norm inputs raise."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity expects equal 1-D shapes, got {u.shape}, {v.shape}")
    if np.linalg.norm(u.data) == 0.0 or np.linalg.norm(v.data) == 0.0:
        raise NumericError("cosine_similarity of a zero-norm vector")
    num = tsum(mul(u, v))
    return div(num, mul(l2_norm(u), l2_norm(v)))


# registry exposing every differentiable primitive under a stable name;
# the per-op gradient test suite iterates over this table
OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "gather": gather,
    "relu": relu,
    "exp": exp,
    "log": log,
    "mean": mean,
    "sum": tsum,
    "l2_norm": l2_norm,
    "softmax": softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
    "group_norm": group_norm,
    "weight_standardize": weight_standardize,
    "conv2d": conv2d,
}


def forward_op(name: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch an op by name: ``forward_op("conv2d", (x, w), {"stride": 2})``."""
    if name not in OPS:
        raise KeyError(f"unknown op '{name}'")
    return OPS[name](*inputs, **(attrs or {}))


def finite_difference_check(fn, point: Tensor, epsilon: float = 1e-5) -> float:
    """Compare the tape gradient of ``fn`` at ``point`` against central
    differences; returns the max relative error
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8) over all elements.

    ``fn`` must map a Tensor to a scalar Tensor and be deterministic.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    with GradTape() as tape:
        loss = fn(x)
    if loss.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued fn")
    g_ad = backward(tape, loss).get(x.tid, np.zeros_like(x.data)).reshape(-1)

    flat = x.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = fn(Tensor(x.data)).item()
        flat[i] = orig - epsilon
        f_minus = fn(Tensor(x.data)).item()
        flat[i] = orig
        g_fd[i] = (f_plus - f_minus) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))
