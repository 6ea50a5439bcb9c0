"""Dense row-major tensors with a reverse-mode autodiff tape.

Storage is a numpy float32/float64 array; every differentiable op records a
backward rule on the active Tape. Broadcasting is deliberately restricted to
trailing-dimension elementwise forms (bias-add, per-rank scaling) so each
backward rule stays auditable. dtype is a run-level switch: a tape never
mixes f32 and f64.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
)

F32 = np.float32
F64 = np.float64

# eps shared by every RMS norm in the package (base layers and step norms).
RMS_EPS = 1e-6

# When enabled, every op output is scanned for NaN/Inf. Tests turn this on;
# long training runs leave it off and rely on loss/grad-level checks.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf scanning; returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


class Tensor:
    """A dense array plus autodiff bookkeeping.

    `requires_grad=True` on a leaf marks a trainable parameter; interior
    tensors inherit the flag while a tape is active. `grad` accumulates
    across backward calls until the optimizer clears it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str | None = None):
        if data.dtype not in (F32, F64):
            raise DimensionError(f"unsupported dtype {data.dtype}; use f32 or f64")
        # ascontiguousarray would promote 0-d scalars to 1-D, so guard on ndim.
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{tag})"


def tensor(values, dtype=F32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a tensor from array-like values."""
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=requires_grad, name=name)


def zeros(shape, dtype=F32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def ones(shape, dtype=F32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, name=name)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Entering the context makes this the active tape; ops append records in
    execution order, so inputs always precede their consumers and a single
    reversed sweep propagates gradients with fan-out accumulation.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Fan-out is accumulated before a producer's record is visited
        (guaranteed by reverse tape order), so each tensor's gradient is
        finalized exactly once per call. Frozen tensors are skipped.
        """
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._output_ids:
            raise ContractError("loss is not an output recorded on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = pending.get(id(rec.out))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    holders[key] = inp
        for key, t in holders.items():
            if not t.requires_grad:
                continue
            g = pending[key].astype(t.dtype, copy=False).reshape(t.shape)
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype)
            else:
                t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    if not _TAPES:
        raise ContractError("backward called with no active tape")
    _TAPES[-1].backward(loss)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Wrap an op result; record on the active tape when grads are needed."""
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append(_Record(out, inputs, bwd))
        tape._output_ids.add(id(out))
    return out


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise DimensionError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)} on one tape")


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    _check_same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    _check_same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d], broadcast over leading axes."""
    _check_same_dtype("add_bias", x, b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit input {x.shape}")
    nlead = x.data.ndim - 1
    return _emit(
        "add_bias",
        x.data + b.data,
        (x, b),
        lambda g: (g, g.sum(axis=tuple(range(nlead)))),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands 2-D, or stacked with equal leading dims."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul: ranks {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(
        "matmul",
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g),
    )


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[..., in] @ w[out, in]^T -> [..., out]; the projection workhorse."""
    _check_same_dtype("linear", x, w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: weight {w.shape} does not fit input {x.shape}")
    xd, wd = x.data, w.data

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        return g @ wd, g2.T @ x2

    return _emit("linear", xd @ wd.T, (x, w), bwd)


# ---------------------------------------------------------------------------
# shape movement


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def index_select(x: Tensor, axis: int, idx) -> Tensor:
    """Gather slices along `axis`; backward scatter-adds (fan-in sums)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"index_select: 1-D index expected, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise IndexError(f"index_select: index out of range for axis {axis} of {x.shape}")
    xshape = x.shape

    def bwd(g):
        dx = np.zeros(xshape, dtype=g.dtype)
        gm = np.moveaxis(g, axis, 0)
        dxm = np.moveaxis(dx, axis, 0)
        np.add.at(dxm, idx, gm)
        return (dx,)

    return _emit("index_select", np.take(x.data, idx, axis=axis), (x,), bwd)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a [1, ...] tensor n times along axis 0; backward sums them."""
    if x.shape[0] != 1:
        raise DimensionError(f"tile_rows: leading extent must be 1, got {x.shape}")
    return _emit(
        "tile_rows",
        np.repeat(x.data, n, axis=0),
        (x,),
        lambda g: (g.sum(axis=0, keepdims=True),),
    )


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("concat_last", a, b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last: leading shapes differ {a.shape} vs {b.shape}")
    na = a.shape[-1]
    return _emit(
        "concat_last",
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (g[..., :na], g[..., na:]),
    )


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _emit("silu", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return _emit("softmax_last", y, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / pooling / masking


def rms_norm(x: Tensor, gamma: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Per-row x / sqrt(mean(x^2) + eps), scaled elementwise by gamma."""
    _check_same_dtype("rms_norm", x, gamma)
    d = x.shape[-1]
    if gamma.data.ndim != 1 or gamma.shape[0] != d:
        raise DimensionError(f"rms_norm: gamma {gamma.shape} does not fit input {x.shape}")
    if eps < 0:
        raise ConfigError(f"rms_norm: eps must be >= 0, got {eps}")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    gd = gamma.data
    y = xd * r * gd

    def bwd(g):
        # y_i = g_i * x_i * r with r depending on all x_j of the row:
        # dx = r*(g*gamma) - (r^3/d) * x * sum_i(g_i*gamma_i*x_i)
        gg = g * gd
        dot = (gg * xd).sum(axis=-1, keepdims=True)
        dx = r * gg - (r ** 3 / d) * xd * dot
        dgamma = (g * xd * r).reshape(-1, d).sum(axis=0)
        return dx, dgamma

    return _emit("rms_norm", y, (x, gamma), bwd)


def mean_pool(h: Tensor, mask) -> Tensor:
    """Masked mean over positions: [B, T, d] x {0,1}[B, T] -> [B, d]."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=h.dtype)
    if m.ndim != 2 or m.shape != h.shape[:2]:
        raise DimensionError(f"mean_pool: mask {m.shape} does not fit input {h.shape}")
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise DegenerateInputError("mean_pool: a mask row selects no positions")
    weights = m / counts[:, None]  # [B, T]

    def bwd(g):
        return (g[:, None, :] * weights[:, :, None],)

    return _emit("mean_pool", np.einsum("btd,bt->bd", h.data, weights), (h,), bwd)


def scale_ranks(u: Tensor, v: Tensor) -> Tensor:
    """u[B, T, r] * v[B, r], the per-example vector broadcast across positions."""
    _check_same_dtype("scale_ranks", u, v)
    if u.data.ndim != 3 or v.data.ndim != 2 or u.shape[0] != v.shape[0] or u.shape[2] != v.shape[1]:
        raise DimensionError(f"scale_ranks: shapes {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    return _emit(
        "scale_ranks",
        ud * vd[:, None, :],
        (u, v),
        lambda g: (g * vd[:, None, :], (g * ud).sum(axis=1)),
    )


def causal_mask(scores: Tensor) -> Tensor:
    """Add a large negative constant above the diagonal of the last two axes."""
    t_q, t_k = scores.shape[-2], scores.shape[-1]
    if t_q != t_k:
        raise DimensionError(f"causal_mask: last two extents differ {scores.shape}")
    neg = np.triu(np.full((t_q, t_k), scores.dtype.type(-1e30)), k=1)
    return _emit("causal_mask", scores.data + neg, (scores,), lambda g: (g,))


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs of the last axis by position-dependent angles.

    x is [..., T, hd]; cos/sin are [T, hd/2]. Pair (2i, 2i+1) is rotated by
    the angle whose cosine/sine sit at column i. Backward rotates the
    gradient by the opposite angle (the map is orthogonal).
    """
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise ConfigError(f"rope: head dim must be even, got {hd}")
    if cos.shape != (x.shape[-2], hd // 2):
        raise DimensionError(f"rope: angle table {cos.shape} does not fit input {x.shape}")
    x1 = x.data[..., 0::2]
    x2 = x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = x1 * cos - x2 * sin
    y[..., 1::2] = x1 * sin + x2 * cos

    def bwd(g):
        g1 = g[..., 0::2]
        g2 = g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = g1 * cos + g2 * sin
        dx[..., 1::2] = -g1 * sin + g2 * cos
        return (dx,)

    return _emit("rope", y, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions / losses


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(
        "sum_all",
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(x.dtype, copy=False),),
    )


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax at the target ids over non-ignored positions.

    logits: [B, T, V]; targets: int [B, T]; mask: optional {0,1}[B, T] where
    1 counts the position. Fused op: the backward rule is (softmax - onehot)
    weighted per position, which sidesteps materializing log-probs on tape.
    """
    if logits.data.ndim != 3:
        raise DimensionError(f"cross_entropy: logits must be [B,T,V], got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    b, tl, v = logits.shape
    if t.shape != (b, tl):
        raise DimensionError(f"cross_entropy: targets {t.shape} do not fit logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        bad = t[(t < 0) | (t >= v)][0]
        raise IndexError(f"cross_entropy: target id {bad} outside [0, {v})")
    if mask is None:
        m = np.ones((b, tl), dtype=logits.dtype)
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=logits.dtype)
        if m.shape != (b, tl):
            raise DimensionError(f"cross_entropy: mask {m.shape} does not fit logits {logits.shape}")
    count = m.sum()
    if count == 0:
        raise DegenerateInputError("cross_entropy: every position is ignored")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, t[:, :, None], axis=-1)[:, :, 0]
    nll = (lse - picked) * m
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, :, None])
        np.subtract.at(p, (np.arange(b)[:, None], np.arange(tl)[None, :], t), 1.0)
        return (p * (m / count)[:, :, None] * g,)

    return _emit("cross_entropy", loss, (logits,), bwd)
