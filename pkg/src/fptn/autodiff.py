"""Dense float64 tensors with taped reverse-mode differentiation.

Just enough of an autodiff engine to express the forecaster's forward pass
and recover exact analytic gradients of a scalar loss: matrix products
(optionally batched), broadcasting add/multiply, GELU, softmax, batch
normalization, reductions, and slicing/concatenation along the feature axis.

Recording model: while a :class:`Tape` is active (``with Tape():``), every
primitive whose inputs touch the differentiation path appends one entry to
the tape. Entries are appended in execution order, so walking the tape
backward visits each node after all of its consumers; ``backward`` exploits
that to run a single reverse sweep with a fixed accumulation order.

Values are immutable by convention once produced. A tape is single-owner:
do not record onto or differentiate one tape from two threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erfc

from .errors import DimensionError, NumericError, StateError, TapeError

DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Contractions with at most this many multiply-adds per output matrix run
# through the sequential-order kernel, whose rounding matches a nested-loop
# evaluation bit for bit; larger problems go to BLAS.
_ORDERED_MATMUL_MAX_WORK = 512


class Tensor:
    """A dense float64 array, optionally marked as a differentiation leaf.

    ``requires_grad=True`` marks a leaf (a trainable parameter or an input
    whose gradient is wanted). Tensors produced by primitives keep
    ``requires_grad=False`` but remember the tape that recorded them.
    """

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; delegates to the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _non_scalar(t: Tensor):
    raise TapeError(f"expected a scalar tensor, got shape {t.shape}")


@dataclass
class _TapeEntry:
    output: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]
    name: str


class Tape:
    """Ordered record of executed primitives.

    Producers always precede consumers in the record, so the reversed record
    is a valid reverse-topological order for gradient propagation.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def operation_names(self) -> list[str]:
        return [e.name for e in self._entries]

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from ``loss``; see :func:`backward`."""
        if loss.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self and not (loss.requires_grad and loss._tape is None):
            raise TapeError("loss was not produced by primitives recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for tensor, piece in zip(entry.inputs, entry.vjp(g)):
                if piece is None or not _tracked(tensor, self):
                    continue
                held = grads.get(id(tensor))
                grads[id(tensor)] = piece if held is None else held + piece

        targets = list(wrt) if wrt is not None else list(self._leaves.values())
        out: dict[Tensor, np.ndarray] = {}
        for t in targets:
            if t is loss:
                out[t] = np.ones_like(loss.data)  # d loss / d loss
                continue
            g = grads.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else np.asarray(g)
        return out


_TAPES: list[Tape] = []


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(name: str, data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"operation '{name}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._tape = None
    tape = _tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._tape = tape
        tape._entries.append(_TapeEntry(out, inputs, vjp, name))
        for t in inputs:
            if t.requires_grad and t._tape is None:
                tape._leaves.setdefault(id(t), t)
    return out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. leaf tensors.

    Returns a map keyed by Tensor. With ``wrt`` given, every listed tensor
    gets an entry; leaves not on the path to the loss get exact zeros.
    Without ``wrt``, the map covers every ``requires_grad`` leaf the tape saw.
    Accumulation order is fixed by the tape, so results are reproducible
    bit for bit.
    """
    if loss._tape is None:
        raise TapeError("loss was not recorded on a tape (no active Tape during the forward pass?)")
    return loss._tape.gradient(loss, wrt)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", data, (a, b), vjp)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("subtract", data, (a, b), vjp)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _emit("negate", -a.data, (a,), lambda g: (-g,))


def multiply(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("multiply", data, (a, b), vjp)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    c = float(factor)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def absolute(a) -> Tensor:
    """|x| elementwise; subgradient at 0 is 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _emit("absolute", np.abs(a.data), (a,), lambda g: (g * sign,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _emit("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def swap_last_axes(a) -> Tensor:
    """Transpose the trailing two axes (batch dims untouched)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"swap_last_axes needs ndim >= 2, got shape {a.shape}")
    data = np.swapaxes(a.data, -1, -2).copy()
    return _emit("swap_last_axes", data, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def slice_columns(a, start: int, stop: int) -> Tensor:
    """Narrow the last axis to [start, stop)."""
    a = as_tensor(a)
    width = a.shape[-1]
    if not (0 <= start < stop <= width):
        raise DimensionError(f"column slice [{start}:{stop}) out of range for width {width}")
    data = a.data[..., start:stop].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_columns", data, (a,), vjp)


def concat_columns(parts: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    tensors = tuple(as_tensor(p) for p in parts)
    if not tensors:
        raise DimensionError("concat_columns needs at least one part")
    data = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., edges[i]:edges[i + 1]].copy() for i in range(len(tensors)))

    return _emit("concat_columns", data, tensors, vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, float(g), dtype=DTYPE) if np.ndim(g) == 0
                    else np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _emit("reduce_sum", np.asarray(data), (a,), vjp)


def reduce_mean(a) -> Tensor:
    """Mean over all elements (scalar output)."""
    a = as_tensor(a)
    n = a.size
    data = np.asarray(a.data.mean())
    return _emit("reduce_mean", data, (a,), lambda g: (np.full(a.shape, float(g) / n, dtype=DTYPE),))


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise DimensionError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# matrix product
# ---------------------------------------------------------------------------

def _matmul_ordered(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulates over the contraction axis in index order with separate
    # multiply and add roundings, matching a nested-loop evaluation exactly.
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=DTYPE)
    for p in range(a.shape[-1]):
        out += a[..., :, p:p + 1] * b[..., p:p + 1, :]
    return out


def _matmul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    if m * k * n <= _ORDERED_MATMUL_MAX_WORK:
        return _matmul_ordered(a, b)
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with broadcasting.

    Both operands need ndim >= 2. Gradients: dA = dC @ B^T, dB = A^T @ dC,
    summed over broadcast batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes do not broadcast: {a.shape} @ {b.shape}") from exc
    data = _matmul_raw(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(_matmul_raw(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(_matmul_raw(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", data, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """x @ w + b with b broadcast over rows; differentiable in all three."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise DimensionError(f"affine parameter shapes do not conform: w {w.shape}, b {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine input width {x.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def gelu(a) -> Tensor:
    """x * Phi(x) with Phi the standard normal CDF (exact erf form).

    Phi is evaluated as erfc(-x/sqrt(2))/2, which keeps the far-left tail
    strictly negative instead of cancelling to -0 as (1 + erf)/2 would.
    """
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * erfc(-x * _INV_SQRT2)
    data = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _emit("gelu", data, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``; slices sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running per-channel statistics, uninitialized until the first train batch.

    The first train-mode batch adopts the batch statistics directly; later
    batches blend with the given momentum. Variances are population
    (biased) estimates throughout.
    """

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        if self.running_mean is None:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
        else:
            self.running_mean = (1.0 - momentum) * self.running_mean + momentum * mean
            self.running_var = (1.0 - momentum) * self.running_var + momentum * var

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
        )


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a (B, N, d) tensor over all B*N positions.

    Train mode normalizes with the batch statistics and updates ``state``;
    eval mode uses the stored running statistics and raises ``StateError``
    if none exist yet.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise DimensionError(f"batch_norm expects (batch, tokens, channels), got {x.shape}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"batch_norm parameters must have shape ({d},), got gamma {gamma.shape}, beta {beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        m = x.shape[0] * x.shape[1]
        if m < 2:
            raise DimensionError(f"batch_norm train mode needs >= 2 positions, got {m}")
        mean = x.data.mean(axis=(0, 1))
        var = x.data.var(axis=(0, 1))
        state.update(mean, var, momentum)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std
        data = gamma.data * xhat + beta.data

        def vjp(g):
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=(0, 1))
            s2 = (dxhat * xhat).sum(axis=(0, 1))
            dx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=(0, 1)), g.sum(axis=(0, 1))

        return _emit("batch_norm", data, (x, gamma, beta), vjp)

    if not state.initialized:
        raise StateError("batch_norm eval mode before running statistics exist")
    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean) * inv_std

    def vjp(g):
        return (g * (gamma.data * inv_std),
                (g * xhat).sum(axis=(0, 1)),
                g.sum(axis=(0, 1)))

    return _emit("batch_norm", gamma.data * xhat + beta.data, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    """Per-parameter max relative error of analytic vs. central-difference gradients."""

    step: float
    tolerance: float
    per_parameter: dict = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def worst_parameter(self) -> str | None:
        if not self.per_parameter:
            return None
        return max(self.per_parameter, key=self.per_parameter.get)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def lines(self) -> list[str]:
        width = max((len(k) for k in self.per_parameter), default=0)
        out = [f"{name:<{width}}  max_rel_err={err:.3e}" for name, err in self.per_parameter.items()]
        status = "PASS" if self.passed else "FAIL"
        out.append(f"overall max_rel_err={self.max_rel_err:.3e} tolerance={self.tolerance:.1e} [{status}]")
        return out


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, Tensor],
                      step: float = 1e-5,
                      tolerance: float = 1e-6) -> FiniteDiffReport:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be a pure function of the parameter values that returns a
    scalar Tensor. Analytic gradients come from one taped evaluation;
    numeric gradients perturb each coordinate by +/- step outside any tape.
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    names = list(params)
    with Tape() as tape:
        loss = f(params)
    analytic = tape.gradient(loss, wrt=[params[k] for k in names])

    report = FiniteDiffReport(step=step, tolerance=tolerance)
    for name in names:
        tensor = params[name]
        grad = analytic[tensor]
        flat = tensor.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = f(params).item()
            flat[i] = saved - step
            down = f(params).item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, relative_error(grad.reshape(-1)[i], numeric))
        report.per_parameter[name] = worst
    return report
