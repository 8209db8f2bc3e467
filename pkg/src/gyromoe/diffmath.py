"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`DiffContext` records a tape of primitive operations as a forward
pass runs; :func:`backward` replays the tape in reverse to fill parameter
gradients. The primitive set is intentionally small: dense matmul, a few
pointwise maps, row softmax, layer norm, index gather/scatter, and shape
plumbing. Everything heavier is composed from these.

Gradients land in :class:`Param` buffers and accumulate across backward
calls until explicitly zeroed, so one optimizer step can sum losses from
several tapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp_special

from .errors import ContractError, DimensionError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Immutable-by-convention float64 array wrapper carrying its tape."""

    __slots__ = ("data", "_ctx")

    def __init__(self, data, _ctx=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ContractError("tensor values must be finite")
        self.data = arr
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.shape != ():
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Param:
    """A trainable tensor with a persistent gradient buffer."""

    __slots__ = ("tensor", "grad")

    def __init__(self, data):
        self.tensor = Tensor(data)
        self.grad = Tensor(np.zeros_like(self.tensor.data))

    @property
    def shape(self):
        return self.tensor.shape

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Param(shape={self.tensor.shape})"


class DiffContext:
    """One recording tape. Create a fresh context per forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def _record(self, out_data, inputs, vjp):
        out = Tensor(out_data, _ctx=self)
        self.nodes.append((out, inputs, vjp))
        return out

    def __len__(self):
        return len(self.nodes)


def value(x) -> np.ndarray:
    """Raw ndarray behind a Tensor, Param, or array-like."""
    if isinstance(x, Param):
        return x.tensor.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def constant(x) -> Tensor:
    """Wrap data as a leaf that receives no gradient."""
    return Tensor(x)


def _diff_inputs(*objs):
    # only Tensor/Param inputs participate in backprop
    return tuple(o for o in objs if isinstance(o, (Tensor, Param)))


def backward(output: Tensor, ctx: DiffContext | None = None) -> None:
    """Backpropagate d(output)/d(param) into every Param on the tape.

    ``output`` must be a scalar produced by the context being replayed.
    Gradients accumulate into ``param.grad`` (no implicit zeroing).
    """
    if not isinstance(output, Tensor):
        raise ContractError("backward expects a Tensor output")
    if ctx is None:
        ctx = output._ctx
    if ctx is None or output._ctx is not ctx:
        raise ContractError("output is not attached to the given DiffContext")
    if output.shape != ():
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=np.float64)}
    for out, inputs, vjp in reversed(ctx.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            if isinstance(inp, Param):
                inp.grad.data += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# Primitive operations. Each takes the tape as first argument.


def matmul(ctx: DiffContext, a, b) -> Tensor:
    """2-D matrix product."""
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} and {bv.shape} are incompatible")
    out = av @ bv

    def vjp(g):
        grads = []
        if isinstance(a, (Tensor, Param)):
            grads.append(g @ bv.T)
        if isinstance(b, (Tensor, Param)):
            grads.append(av.T @ g)
        return grads

    return ctx._record(out, _diff_inputs(a, b), vjp)


def _binary_shapes(av, bv, opname):
    if av.shape == bv.shape:
        return "same"
    if av.ndim == 2 and bv.ndim == 1 and bv.size == av.shape[1]:
        return "bias"
    raise DimensionError(f"{opname} shapes {av.shape} and {bv.shape} are incompatible")


def add(ctx: DiffContext, a, b) -> Tensor:
    """Elementwise sum; also accepts a 1-D row bias against a 2-D left arg."""
    av, bv = value(a), value(b)
    mode = _binary_shapes(av, bv, "add")

    def vjp(g):
        grads = []
        if isinstance(a, (Tensor, Param)):
            grads.append(g)
        if isinstance(b, (Tensor, Param)):
            grads.append(g.sum(axis=0) if mode == "bias" else g)
        return grads

    return ctx._record(av + bv, _diff_inputs(a, b), vjp)


def sub(ctx: DiffContext, a, b) -> Tensor:
    """Elementwise difference; same shape rules as :func:`add`."""
    av, bv = value(a), value(b)
    mode = _binary_shapes(av, bv, "sub")

    def vjp(g):
        grads = []
        if isinstance(a, (Tensor, Param)):
            grads.append(g)
        if isinstance(b, (Tensor, Param)):
            grads.append(-(g.sum(axis=0)) if mode == "bias" else -g)
        return grads

    return ctx._record(av - bv, _diff_inputs(a, b), vjp)


def mul(ctx: DiffContext, a, b) -> Tensor:
    """Elementwise product of same-shape operands."""
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"mul shapes {av.shape} and {bv.shape} are incompatible")

    def vjp(g):
        grads = []
        if isinstance(a, (Tensor, Param)):
            grads.append(g * bv)
        if isinstance(b, (Tensor, Param)):
            grads.append(g * av)
        return grads

    return ctx._record(av * bv, _diff_inputs(a, b), vjp)


def scale(ctx: DiffContext, a, c: float) -> Tensor:
    """Multiply by a Python float constant."""
    av = value(a)
    c = float(c)

    def vjp(g):
        return (c * g,) if isinstance(a, (Tensor, Param)) else ()

    return ctx._record(c * av, _diff_inputs(a), vjp)


def scalar_mul(ctx: DiffContext, s, a) -> Tensor:
    """Broadcast a ()-shaped tensor across ``a``; differentiable in both."""
    sv, av = value(s), value(a)
    if sv.shape != ():
        raise DimensionError(f"scalar_mul needs a ()-shaped scalar, got {sv.shape}")

    def vjp(g):
        grads = []
        if isinstance(s, (Tensor, Param)):
            grads.append(np.asarray((g * av).sum()))
        if isinstance(a, (Tensor, Param)):
            grads.append(sv * g)
        return grads

    return ctx._record(sv * av, _diff_inputs(s, a), vjp)


def row_softmax(ctx: DiffContext, a) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    av = value(a)
    if av.ndim not in (1, 2):
        raise DimensionError(f"row_softmax needs a 1-D or 2-D input, got {av.shape}")
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        if not isinstance(a, (Tensor, Param)):
            return ()
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return ctx._record(out, _diff_inputs(a), vjp)


def layer_norm(ctx: DiffContext, x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a 2-D input with learned gain and bias."""
    xv, gv, bv = value(x), value(gain), value(bias)
    if xv.ndim != 2:
        raise DimensionError(f"layer_norm needs a 2-D input, got {xv.shape}")
    d = xv.shape[1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gv.shape}/{bv.shape} do not match width {d}"
        )
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (xv - mu) / std
    out = xhat * gv + bv

    def vjp(g):
        grads = []
        if isinstance(x, (Tensor, Param)):
            h = g * gv
            term = h - h.mean(axis=1, keepdims=True) - xhat * (h * xhat).mean(axis=1, keepdims=True)
            grads.append(term / std)
        if isinstance(gain, (Tensor, Param)):
            grads.append((g * xhat).sum(axis=0))
        if isinstance(bias, (Tensor, Param)):
            grads.append(g.sum(axis=0))
        return grads

    return ctx._record(out, _diff_inputs(x, gain, bias), vjp)


def gelu(ctx: DiffContext, x) -> Tensor:
    """Exact Gaussian-error linear unit."""
    xv = value(x)
    cdf = 0.5 * (1.0 + sp_special.erf(xv * _INV_SQRT2))
    out = xv * cdf

    def vjp(g):
        if not isinstance(x, (Tensor, Param)):
            return ()
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (cdf + xv * pdf),)

    return ctx._record(out, _diff_inputs(x), vjp)


def sigmoid(ctx: DiffContext, x) -> Tensor:
    """Logistic map, numerically stable at large magnitudes."""
    xv = value(x)
    out = sp_special.expit(xv)

    def vjp(g):
        if not isinstance(x, (Tensor, Param)):
            return ()
        return (g * out * (1.0 - out),)

    return ctx._record(out, _diff_inputs(x), vjp)


def exp(ctx: DiffContext, x) -> Tensor:
    xv = value(x)
    out = np.exp(xv)

    def vjp(g):
        return (g * out,) if isinstance(x, (Tensor, Param)) else ()

    return ctx._record(out, _diff_inputs(x), vjp)


def log(ctx: DiffContext, x) -> Tensor:
    """Natural log; domain is strictly positive."""
    xv = value(x)
    if (xv <= 0.0).any():
        raise ContractError("log domain error: inputs must be strictly positive")
    out = np.log(xv)

    def vjp(g):
        return (g / xv,) if isinstance(x, (Tensor, Param)) else ()

    return ctx._record(out, _diff_inputs(x), vjp)


def reciprocal(ctx: DiffContext, x) -> Tensor:
    """1/x elementwise; zeros are a domain error."""
    xv = value(x)
    if (xv == 0.0).any():
        raise ContractError("reciprocal domain error: zero entry")
    out = 1.0 / xv

    def vjp(g):
        return (-g * out * out,) if isinstance(x, (Tensor, Param)) else ()

    return ctx._record(out, _diff_inputs(x), vjp)


def square(ctx: DiffContext, x) -> Tensor:
    xv = value(x)

    def vjp(g):
        return (2.0 * xv * g,) if isinstance(x, (Tensor, Param)) else ()

    return ctx._record(xv * xv, _diff_inputs(x), vjp)


def mean(ctx: DiffContext, x) -> Tensor:
    """Mean over all elements, producing a ()-shaped scalar."""
    xv = value(x)
    if xv.size == 0:
        raise ContractError("mean of an empty tensor")
    out = np.asarray(xv.mean())

    def vjp(g):
        if not isinstance(x, (Tensor, Param)):
            return ()
        return (np.full_like(xv, float(g) / xv.size),)

    return ctx._record(out, _diff_inputs(x), vjp)


def _check_indices(idx, bound, opname):
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError(f"{opname} needs a nonempty 1-D index array")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"{opname} indices must be integers")
    if (idx < 0).any() or (idx >= bound).any():
        raise ContractError(f"{opname} index out of range [0, {bound})")
    return idx


def gather(ctx: DiffContext, x, idx, axis: int = 0) -> Tensor:
    """Select rows (axis 0) or columns (axis 1) by integer index."""
    xv = value(x)
    if axis not in (0, 1) or axis >= xv.ndim:
        raise DimensionError(f"gather axis {axis} invalid for shape {xv.shape}")
    idx = _check_indices(idx, xv.shape[axis], "gather")
    out = np.take(xv, idx, axis=axis)

    def vjp(g):
        if not isinstance(x, (Tensor, Param)):
            return ()
        dx = np.zeros_like(xv)
        if axis == 0:
            np.add.at(dx, idx, g)
        else:
            np.add.at(dx, (slice(None), idx), g)
        return (dx,)

    return ctx._record(out, _diff_inputs(x), vjp)


def scatter(ctx: DiffContext, x, idx, size: int, axis: int = 0) -> Tensor:
    """Place slices of ``x`` into a zero tensor of extent ``size`` on ``axis``.

    Duplicate indices accumulate. The adjoint is a gather at the same
    indices.
    """
    xv = value(x)
    if axis not in (0, 1) or axis >= xv.ndim:
        raise DimensionError(f"scatter axis {axis} invalid for shape {xv.shape}")
    idx = _check_indices(idx, size, "scatter")
    if idx.size != xv.shape[axis]:
        raise DimensionError(
            f"scatter index count {idx.size} does not match input extent {xv.shape[axis]}"
        )
    shape = list(xv.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=np.float64)
    if axis == 0:
        np.add.at(out, idx, xv)
    else:
        np.add.at(out, (slice(None), idx), xv)

    def vjp(g):
        if not isinstance(x, (Tensor, Param)):
            return ()
        return (np.take(g, idx, axis=axis),)

    return ctx._record(out, _diff_inputs(x), vjp)


def concat(ctx: DiffContext, parts, axis: int = 0) -> Tensor:
    """Concatenate tensors along an axis."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat needs at least one part")
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, (Tensor, Param)):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                grads.append(g[tuple(sl)])
        return grads

    return ctx._record(out, _diff_inputs(*parts), vjp)


def transpose(ctx: DiffContext, x) -> Tensor:
    """2-D transpose."""
    xv = value(x)
    if xv.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D input, got {xv.shape}")

    def vjp(g):
        return (g.T,) if isinstance(x, (Tensor, Param)) else ()

    return ctx._record(xv.T.copy(), _diff_inputs(x), vjp)


def reshape(ctx: DiffContext, x, shape) -> Tensor:
    xv = value(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != xv.size:
        raise DimensionError(f"cannot reshape {xv.shape} to {shape}")

    def vjp(g):
        return (g.reshape(xv.shape),) if isinstance(x, (Tensor, Param)) else ()

    return ctx._record(xv.reshape(shape), _diff_inputs(x), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification.


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_elements: int


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f(ctx, *params) -> scalar Tensor`` is evaluated once with backprop and
    then twice per input element for the finite-difference probe. The error
    is ``|analytic - fd| / max(|analytic|, |fd|, 1)``, so tiny gradients are
    compared absolutely.
    """
    params = [Param(np.asarray(x, dtype=np.float64)) for x in inputs]
    ctx = DiffContext()
    out = f(ctx, *params)
    if not isinstance(out, Tensor) or out.shape != ():
        raise ContractError("grad_check target must return a scalar Tensor")
    backward(out, ctx)
    analytic = [p.grad.data.copy() for p in params]

    max_rel = 0.0
    n_elems = 0
    for p, grad in zip(params, analytic):
        flat = p.tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(DiffContext(), *params).data)
            flat[i] = orig - eps
            f_minus = float(f(DiffContext(), *params).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            max_rel = max(max_rel, rel)
            n_elems += 1
    return GradCheckReport(max_rel_err=max_rel, tol=tol, passed=max_rel <= tol, n_elements=n_elems)
