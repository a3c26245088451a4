"""Dense float64 tensors with tape-based reverse-mode differentiation.

All trainable computation in this package runs through the primitives in
this module.  A ``Tape`` records every operation whose output needs a
gradient; ``Tape.backward`` walks the recording in reverse and accumulates
gradients per node.  Tapes are cheap, per-step objects: build one, run the
forward, call backward, read the gradients, throw it away.

Tapes nest.  Opening a second tape while one is active records to the
inner tape only, which is how the scenario-classifier probe obtains
feature gradients without touching the main planner tape.

With no tape active every primitive is a plain numpy computation, which is
what inference and finite-difference checks use.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array plus grad bookkeeping.

    ``node_id`` is the index of this tensor on the tape that last recorded
    it; it is only meaningful to that tape.  Tensors with
    ``requires_grad=False`` are constants and never receive gradient.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's current values."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


class _Node:
    __slots__ = ("tensor", "op", "parent_ids", "backward_fn")

    def __init__(self, tensor, op, parent_ids, backward_fn):
        self.tensor = tensor
        self.op = op
        self.parent_ids = parent_ids
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations, in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def _ensure(self, t: Tensor) -> int:
        nid = t.node_id
        if nid is not None and nid < len(self.nodes) and self.nodes[nid].tensor is t:
            return nid
        nid = len(self.nodes)
        self.nodes.append(_Node(t, "leaf", (), None))
        t.node_id = nid
        return nid

    def _record(self, out: Tensor, op: str, parents: Sequence[Tensor | None],
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        parent_ids = tuple(
            self._ensure(p) if isinstance(p, Tensor) and p.requires_grad else None
            for p in parents
        )
        nid = len(self.nodes)
        self.nodes.append(_Node(out, op, parent_ids, backward_fn))
        out.node_id = nid

    def backward(self, root: Tensor) -> None:
        """Reverse-accumulate d(root)/d(node) for every grad-requiring ancestor."""
        if root.size != 1:
            raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
        rid = root.node_id
        if rid is None or rid >= len(self.nodes) or self.nodes[rid].tensor is not root:
            raise ValueError("backward root is not recorded on this tape")
        grads: dict[int, np.ndarray] = {rid: np.ones_like(root.data)}
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward_fn is None:
                continue
            for pid, pg in zip(node.parent_ids, node.backward_fn(g)):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        self.gradients = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward() root w.r.t. ``t`` (None if unreached)."""
        nid = t.node_id
        if nid is None or nid >= len(self.nodes) or self.nodes[nid].tensor is not t:
            return None
        return self.gradients.get(nid)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _make(op: str, out_data: np.ndarray, parents: Sequence, backward_fn) -> Tensor:
    requires = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape._record(out, op, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad + bd
    except ValueError:
        raise ValueError(f"add: shapes {ad.shape} and {bd.shape} incompatible") from None

    def backward(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return _make("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad - bd
    except ValueError:
        raise ValueError(f"sub: shapes {ad.shape} and {bd.shape} incompatible") from None

    def backward(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)

    return _make("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product (numpy broadcasting rules)."""
    ad, bd = _data(a), _data(b)
    try:
        out = ad * bd
    except ValueError:
        raise ValueError(f"mul: shapes {ad.shape} and {bd.shape} incompatible") from None

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", out, (a, b), backward)


def scalar_mul(a, c: float) -> Tensor:
    ad = _data(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make("scalar_mul", ad * c, (a,), backward)


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    out = ad @ bd

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make("matmul", out, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """x @ w + b with b broadcast over rows; fused for tape brevity."""
    xd, wd, bd = _data(x), _data(w), _data(b)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"linear: shapes {xd.shape} and {wd.shape} do not conform")
    out = xd @ wd + bd

    def backward(g):
        return g @ wd.T, xd.T @ g, _unbroadcast(g, bd.shape)

    return _make("linear", out, (x, w, b), backward)


def transpose(a) -> Tensor:
    ad = _data(a)
    if ad.ndim != 2:
        raise ValueError(f"transpose: expected 2-d, got shape {ad.shape}")

    def backward(g):
        return (g.T,)

    return _make("transpose", ad.T, (a,), backward)


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    out = ad.reshape(shape)

    def backward(g):
        return (g.reshape(ad.shape),)

    return _make("reshape", out, (a,), backward)


def concat_rows(parts: Iterable) -> Tensor:
    parts = list(parts)
    datas = [_data(p) for p in parts]
    widths = {d.shape[1] for d in datas if d.ndim == 2}
    if any(d.ndim != 2 for d in datas) or len(widths) > 1:
        raise ValueError(f"concat_rows: shapes {[d.shape for d in datas]} incompatible")
    out = np.concatenate(datas, axis=0)
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(datas)))

    return _make("concat_rows", out, parts, backward)


def concat_cols(parts: Iterable) -> Tensor:
    parts = list(parts)
    datas = [_data(p) for p in parts]
    heights = {d.shape[0] for d in datas if d.ndim == 2}
    if any(d.ndim != 2 for d in datas) or len(heights) > 1:
        raise ValueError(f"concat_cols: shapes {[d.shape for d in datas]} incompatible")
    out = np.concatenate(datas, axis=1)
    offsets = np.cumsum([0] + [d.shape[1] for d in datas])

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(datas)))

    return _make("concat_cols", out, parts, backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    ad = _data(a)
    out = ad[:, start:stop].copy()

    def backward(g):
        z = np.zeros_like(ad)
        z[:, start:stop] = g
        return (z,)

    return _make("slice_cols", out, (a,), backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    ad = _data(a)
    out = ad[start:stop].copy()

    def backward(g):
        z = np.zeros_like(ad)
        z[start:stop] = g
        return (z,)

    return _make("slice_rows", out, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows by index; backward scatters gradient back, zero elsewhere.

    Indices are constants: no gradient flows through the selection itself.
    """
    ad = _data(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= ad.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {ad.shape[0]} rows")
    out = ad[idx]

    def backward(g):
        z = np.zeros_like(ad)
        np.add.at(z, idx, g)
        return (z,)

    return _make("gather_rows", out, (a,), backward)


def scatter_rows(a, indices, n_rows: int) -> Tensor:
    """Place rows of ``a`` at ``indices`` in an otherwise-zero (n_rows, C) matrix."""
    ad = _data(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size != ad.shape[0]:
        raise ValueError(f"scatter_rows: {idx.size} indices for {ad.shape[0]} rows")
    if idx.size != np.unique(idx).size:
        raise ValueError("scatter_rows: duplicate indices")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"scatter_rows: index out of range for {n_rows} rows")
    out = np.zeros((n_rows, ad.shape[1]))
    out[idx] = ad

    def backward(g):
        return (g[idx],)

    return _make("scatter_rows", out, (a,), backward)


def reduce_sum(a) -> Tensor:
    ad = _data(a)

    def backward(g):
        return (np.full_like(ad, float(g)),)

    return _make("reduce_sum", np.asarray(ad.sum()), (a,), backward)


def reduce_mean(a) -> Tensor:
    ad = _data(a)
    n = ad.size

    def backward(g):
        return (np.full_like(ad, float(g) / n),)

    return _make("reduce_mean", np.asarray(ad.mean()), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def sin(a) -> Tensor:
    ad = _data(a)

    def backward(g):
        return (g * np.cos(ad),)

    return _make("sin", np.sin(ad), (a,), backward)


def cos(a) -> Tensor:
    ad = _data(a)

    def backward(g):
        return (-g * np.sin(ad),)

    return _make("cos", np.cos(ad), (a,), backward)


def gelu(a) -> Tensor:
    ad = _data(a)
    cdf = 0.5 * (1.0 + erf(ad * _SQRT1_2))
    out = ad * cdf

    def backward(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return (g * (cdf + ad * pdf),)

    return _make("gelu", out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with learnable gain/bias."""
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    if xd.ndim != 2 or gd.shape != (xd.shape[1],) or bd.shape != (xd.shape[1],):
        raise ValueError(
            f"layer_norm: shapes {xd.shape}, {gd.shape}, {bd.shape} incompatible")
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gd + bd

    def backward(g):
        dgain = (g * xh).sum(axis=0)
        dbias = g.sum(axis=0)
        dxh = g * gd
        dx = inv * (dxh - dxh.mean(axis=1, keepdims=True)
                    - xh * (dxh * xh).mean(axis=1, keepdims=True))
        return dx, dgain, dbias

    return _make("layer_norm", out, (x, gain, bias), backward)


def _softmax_backward(p, g):
    return p * (g - (g * p).sum(axis=1, keepdims=True))


def softmax_rows(x) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    xd = _data(x)
    if not np.isfinite(xd).all():
        raise ValueError("non-finite input")
    two_d = xd.ndim == 2
    rows = xd if two_d else xd[None, :]
    e = np.exp(rows - rows.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    out = p if two_d else p[0]

    def backward(g):
        g2 = g if two_d else g[None, :]
        gx = _softmax_backward(p, g2)
        return (gx if two_d else gx[0],)

    return _make("softmax_rows", out, (x,), backward)


def masked_softmax_rows(x, key_mask) -> Tensor:
    """Softmax over the columns where ``key_mask`` is True; exact zero elsewhere.

    Equivalent to setting masked logits to -inf before a softmax.  The mask
    is a constant.  A row with no unmasked column is an error.
    """
    xd = _data(x)
    mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), xd.shape)
    if not mask.any(axis=1).all():
        raise ValueError("masked_softmax_rows: a row has no unmasked entries")
    if not np.isfinite(xd[mask]).all():
        raise ValueError("non-finite input")
    neg = np.where(mask, xd, -np.inf)
    e = np.exp(neg - neg.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (_softmax_backward(p, g),)

    return _make("masked_softmax_rows", p, (x,), backward)


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: quadratic below ``beta``, linear above."""
    pd, td = _data(pred), _data(target)
    if pd.shape != td.shape:
        raise ValueError(f"smooth_l1: shapes {pd.shape} and {td.shape} differ")
    e = pd - td
    a = np.abs(e)
    out = np.where(a < beta, 0.5 * e * e / beta, a - 0.5 * beta)

    def backward(g):
        de = np.where(a < beta, e / beta, np.sign(e))
        return g * de, -g * de

    return _make("smooth_l1", out, (pred, target), backward)


def cross_entropy_with_logits(logits, targets) -> Tensor:
    """Mean cross-entropy of integer class targets against logit rows."""
    ld = _data(logits)
    two_d = ld.ndim == 2
    rows = ld if two_d else ld[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if t.shape[0] != rows.shape[0]:
        raise ValueError(
            f"cross_entropy_with_logits: {rows.shape[0]} logit rows, {t.shape[0]} targets")
    m = rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(rows - m).sum(axis=1, keepdims=True)) + m
    losses = lse[:, 0] - rows[np.arange(rows.shape[0]), t]
    out = np.asarray(losses.mean())

    def backward(g):
        p = np.exp(rows - lse)
        p[np.arange(rows.shape[0]), t] -= 1.0
        gl = float(g) * p / rows.shape[0]
        return (gl if two_d else gl[0],)

    return _make("cross_entropy_with_logits", out, (logits,), backward)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def check_gradients(f, x: Tensor, h: float = 1e-5,
                    max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape and central-difference gradients of f at x.

    ``f`` maps a tensor to a scalar tensor and is re-evaluated (tape-free)
    under per-coordinate perturbations of ``x.data``.  Error per coordinate
    is ``|g_ad - g_fd| / max(1, |g_fd|)``.  ``max_coords`` caps how many
    coordinates are probed (a deterministic random subset when set).
    """
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
        g = tape.grad(x)
    g_ad = np.zeros_like(x.data) if g is None else g

    coords = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        coords = (rng or np.random.default_rng(0)).choice(
            x.size, size=max_coords, replace=False)
        coords.sort()

    flat = x.data.reshape(-1)
    ad_flat = g_ad.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x).data)
        flat[i] = orig - h
        lo = float(f(x).data)
        flat[i] = orig
        g_fd = (hi - lo) / (2.0 * h)
        err = abs(ad_flat[i] - g_fd) / max(1.0, abs(g_fd))
        if err > worst:
            worst = err
    return worst
