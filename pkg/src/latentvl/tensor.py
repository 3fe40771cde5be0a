"""Dense tensor arithmetic with reverse-mode differentiation and MAC counting.

Tensors wrap numpy arrays (f32 for training, f64 for verification).  Ops
build a computation graph by attaching backward closures; `backward(loss)`
runs reverse-topological accumulation.  Every matmul-class op adds its
scalar multiply-accumulate count to the innermost active `Tape`, which is
how all higher-level cost instrumentation works.

Only matmul-class ops count MACs: projections, attention score/context
products, MLP matmuls, embedding projections.  softmax / layernorm / gelu
are excluded.  Reported FLOPs == 2 * MACs.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

# Debug-mode finiteness checks after each forward op (slow; on in tests).
DEBUG_CHECKS = os.environ.get("LATENTVL_DEBUG_CHECKS", "") not in ("", "0")

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED: list[bool] = [True]


class Tape:
    """Scoped MAC counter.  `with Tape() as t: ...; t.macs` measures a region.

    The counter is deterministic for a fixed graph: it depends only on the
    shapes of the matmul-class ops executed, never on data values, seeds or
    thread counts.
    """

    def __init__(self):
        self.macs = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def add_macs(n: int) -> None:
    if _TAPE_STACK:
        _TAPE_STACK[-1].macs += int(n)


class no_grad:
    """Disable backward-closure recording (MACs are still counted)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[], None]] = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req and grad_enabled():
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
    return out


# ---------------------------------------------------------------------------
# matmul-class ops (these count MACs)
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product.  Counts m*k*n MACs."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.data.shape
    k2, n = b.data.shape
    if k != k2:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    add_macs(m * k * n)
    # einsum (no optimize) computes each output element as an independent
    # dot product, so results are bitwise independent of the row count;
    # BLAS gemm is not, and several contracts here require row stability.
    y = np.einsum("ij,jk->ik", a.data, b.data)
    out = _node(y, (a, b), None, "matmul")

    if out._parents:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        out._backward = backward
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a leading axis: (h,m,k) @ (h,k,n).  h*m*k*n MACs."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3-D operands, got {a.shape} and {b.shape}")
    h, m, k = a.data.shape
    h2, k2, n = b.data.shape
    if h != h2 or k != k2:
        raise ShapeError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    add_macs(h * m * k * n)
    y = np.einsum("hij,hjk->hik", a.data, b.data)  # row-stable, see matmul
    out = _node(y, (a, b), None, "bmm")

    if out._parents:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops (no MACs)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _node(a.data + b.data, (a, b), None, "add")
    if out._parents:
        def backward():
            if a.requires_grad:
                a.accumulate_grad(out.grad)
            if b.requires_grad:
                b.accumulate_grad(out.grad)
        out._backward = backward
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias addition: x[..., :] + b.  The only broadcast we allow."""
    if x.data.shape[-1] != b.data.shape[-1] or b.data.ndim != 1:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    out = _node(x.data + b.data, (x, b), None, "add_bias")
    if out._parents:
        def backward():
            if x.requires_grad:
                x.accumulate_grad(out.grad)
            if b.requires_grad:
                axes = tuple(range(out.grad.ndim - 1))
                b.accumulate_grad(out.grad.sum(axis=axes))
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = _node(a.data * b.data, (a, b), None, "mul")
    if out._parents:
        def backward():
            if a.requires_grad:
                a.accumulate_grad(out.grad * b.data)
            if b.requires_grad:
                b.accumulate_grad(out.grad * a.data)
        out._backward = backward
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _node(x.data * c, (x,), None, "scale")
    if out._parents:
        def backward():
            x.accumulate_grad(out.grad * c)
        out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf  # noqa: PLC0415

    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = _node(x.data * cdf, (x,), None, "gelu")
    if out._parents:
        def backward():
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
            x.accumulate_grad(out.grad * (cdf + x.data * pdf))
        out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, with affine (gamma, beta)."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs d={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta), None, "layer_norm")
    if out._parents:
        def backward():
            g = out.grad
            if gamma.requires_grad:
                axes = tuple(range(g.ndim - 1))
                gamma.accumulate_grad((g * xhat).sum(axis=axes))
            if beta.requires_grad:
                axes = tuple(range(g.ndim - 1))
                beta.accumulate_grad(g.sum(axis=axes))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x.accumulate_grad(inv * (gx - m1 - xhat * m2))
        out._backward = backward
    return out


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    `mask` is an optional boolean array broadcastable to x over the last
    axis; False positions get zero probability.  Masking happens inside the
    op so no tensor ever holds -inf.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.any(mask, axis=-1).all():
            raise ContractError("softmax_rows: a row has every position masked")
        neg = np.finfo(z.dtype).min / 4
        z = np.where(mask, z, neg)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _node(p, (x,), None, "softmax_rows")
    if out._parents:
        def backward():
            g = out.grad
            dot = (g * p).sum(axis=-1, keepdims=True)
            gx = p * (g - dot)
            if mask is not None:
                gx = np.where(mask, gx, 0.0)
            x.accumulate_grad(gx)
        out._backward = backward
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("concat_rows of nothing")
    widths = {t.data.shape[-1] for t in tensors}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows column mismatch: {sorted(widths)}")
    out = _node(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), None, "concat_rows")
    if out._parents:
        sizes = [t.data.shape[0] for t in tensors]
        def backward():
            off = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    t.accumulate_grad(out.grad[off:off + n])
                off += n
        out._backward = backward
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows [{start},{stop}) outside 0..{n}")
    out = _node(x.data[start:stop].copy(), (x,), None, "slice_rows")
    if out._parents:
        def backward():
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            x.accumulate_grad(g)
        out._backward = backward
    return out


def select_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by index (for loss over masked positions).  No MACs."""
    idx = np.asarray(indices, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"row index out of range for {n} rows")
    out = _node(x.data[idx], (x,), None, "select_rows")
    if out._parents:
        def backward():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x.accumulate_grad(g)
        out._backward = backward
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table`; gradient scatters back.  No MACs."""
    from .errors import VocabularyError  # noqa: PLC0415

    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise VocabularyError(
            f"id out of range [0,{table.data.shape[0]}): {ids.min()}..{ids.max()}"
        )
    out = _node(table.data[ids], (table,), None, "embedding_lookup")
    if out._parents:
        def backward():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate_grad(g)
        out._backward = backward
    return out


def dropout(x: Tensor, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; identity in eval mode or at p == 0."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout p must be in [0,1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    factor = 1.0 / (1.0 - p)
    out = _node(x.data * keep * factor, (x,), None, "dropout")
    if out._parents:
        def backward():
            x.accumulate_grad(out.grad * keep * factor)
        out._backward = backward
    return out


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(n, d) -> (heads, n, d/heads).  Pure reshape, no MACs."""
    n, d = x.data.shape
    if d % heads:
        raise ShapeError(f"d={d} not divisible by heads={heads}")
    dh = d // heads
    y = x.data.reshape(n, heads, dh).transpose(1, 0, 2)
    out = _node(np.ascontiguousarray(y), (x,), None, "split_heads")
    if out._parents:
        def backward():
            x.accumulate_grad(out.grad.transpose(1, 0, 2).reshape(n, d))
        out._backward = backward
    return out


def merge_heads(x: Tensor) -> Tensor:
    """(heads, n, dh) -> (n, heads*dh)."""
    h, n, dh = x.data.shape
    y = x.data.transpose(1, 0, 2).reshape(n, h * dh)
    out = _node(np.ascontiguousarray(y), (x,), None, "merge_heads")
    if out._parents:
        def backward():
            x.accumulate_grad(out.grad.reshape(n, h, dh).transpose(1, 0, 2))
        out._backward = backward
    return out


def transpose_last2(x: Tensor) -> Tensor:
    y = np.swapaxes(x.data, -1, -2)
    out = _node(np.ascontiguousarray(y), (x,), None, "transpose_last2")
    if out._parents:
        def backward():
            x.accumulate_grad(np.swapaxes(out.grad, -1, -2))
        out._backward = backward
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / norm
    out = _node(y, (x,), None, "l2_normalize_rows")
    if out._parents:
        def backward():
            g = out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad((g - y * dot) / norm)
        out._backward = backward
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _node(np.asarray(x.data.sum()), (x,), None, "sum_all")
    if out._parents:
        def backward():
            x.accumulate_grad(np.full_like(x.data, float(out.grad)))
        out._backward = backward
    return out


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-wise class logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} vs logits rows {n}")
    if n == 0:
        return Tensor(np.asarray(0.0, dtype=logits.data.dtype))
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), targets].mean()
    out = _node(np.asarray(loss), (logits,), None, "cross_entropy_rows")
    if out._parents:
        def backward():
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            logits.accumulate_grad(float(out.grad) * p / n)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable parameters with per-parameter freeze flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, data, dtype=np.float32) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, dtype=dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def freeze(self, name: str) -> None:
        self._frozen.add(name)

    def unfreeze(self, name: str) -> None:
        self._frozen.discard(name)

    def unfreeze_all(self) -> None:
        self._frozen.clear()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_hash(self, names=None) -> str:
        """SHA-256 over the raw bytes of the selected parameters."""
        import hashlib  # noqa: PLC0415

        h = hashlib.sha256()
        for name in sorted(names if names is not None else self._params):
            h.update(name.encode())
            h.update(self._params[name].data.tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(build_loss, params, h: float = 1e-5, tol: float = 1e-4,
               sample_fraction: float = 1.0, rng=None, verbose: bool = False):
    """Compare analytic gradients with central finite differences.

    `build_loss()` must deterministically rebuild the scalar loss from the
    *current* parameter values (dropout and LayerDrop disabled, or driven by
    a fixed mask).  `params` is an iterable of (name, Tensor).  Per scalar
    entry the relative error is |analytic - numeric| / max(|a|, |n|, 1e-8).

    Returns a dict: name -> (max_rel_err, checked_count); raises ContractError
    if build_loss is observed to be non-deterministic.
    """
    params = list(params)
    loss0 = build_loss()
    loss1 = build_loss()
    if float(loss0.data) != float(loss1.data):
        raise ContractError("grad_check requires a deterministic loss builder")

    for _, t in params:
        t.grad = None
    loss = build_loss()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params}

    report = {}
    for name, t in params:
        flat = t.data.reshape(-1)
        n = flat.size
        if sample_fraction >= 1.0:
            idx = np.arange(n)
        else:
            count = max(1, int(round(n * sample_fraction)))
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(n, size=min(count, n), replace=False))
        a_flat = analytic[name].reshape(-1)
        max_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(build_loss().data)
            flat[i] = orig - h
            lm = float(build_loss().data)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)
        report[name] = (max_err, len(idx))
        if verbose:
            status = "ok" if max_err < tol else "FAIL"
            print(f"  {name:40s} max_rel_err={max_err:.3e} ({len(idx)} entries) {status}")
    return report
