"""Float64 tensors with a recorded tape for reverse-mode gradients.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape they only compute, which is what evaluation and benchmarking use.

    >>> w = Tensor(np.ones((2, 1)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(matmul(Tensor([[1.0, 2.0]]), w))
    >>> tape.backward(loss)
    >>> w.grad.ravel().tolist()
    [1.0, 2.0]
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_active_tapes: list["Tape"] = []


class Tensor:
    """Dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    ``backward`` replays the adjoints in exact reverse order of recording.
    Gradients accumulate into ``Tensor.grad`` of every input that requires
    them, so callers zero parameter gradients between steps.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        # intermediate adjoints live in a side table so leaf .grad only holds parameter grads
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec.out) for rec in self.records}
        for rec in reversed(self.records):
            g_out = adjoint.pop(id(rec.out), None)
            if g_out is None:
                continue
            grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                elif key in adjoint:
                    adjoint[key] = adjoint[key] + g
                else:
                    adjoint[key] = g


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].records.append(_Record(out, tuple(inputs), backward))
    return out


def recording() -> bool:
    return bool(_active_tapes)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.data.ndim > 2 and b.data.ndim == 2:
        # activations times a weight matrix: one GEMM over the flattened rows
        # instead of numpy's per-slice loop
        out = Tensor((a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1]))
    else:
        out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = Tensor(np.swapaxes(x.data, -1, -2))
    return _record(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` broadcast over every leading axis."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias {bias.shape} does not fit last axis of {x.shape}")
    out = Tensor(x.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))
    return _record(out, (x, bias), lambda g: (g, g.sum(axis=lead)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``t`` of a ``[T, H]`` tensor by ``s[t]``."""
    if s.data.ndim != 1 or x.data.ndim != 2 or s.shape[0] != x.shape[0]:
        raise DimensionError(f"scale_rows shapes {x.shape} and {s.shape}")
    out = Tensor(x.data * s.data[:, None])

    def backward(g):
        return g * s.data[:, None], (g * x.data).sum(axis=1)

    return _record(out, (x, s), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    th = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + _GELU_C * v2))
    out = Tensor(0.5 * v * (1.0 + th))

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * d_inner),)

    return _record(out, (x,), backward)


# -- reductions and normalisation ---------------------------------------------


def total(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        out = Tensor(x.data.mean())
        return _record(out, (x,), lambda g: (np.full(x.shape, g / n),))
    n = x.shape[axis]
    out = Tensor(np.add.reduce(x.data, axis=axis) / n)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs features {h}")
    centered = x.data - _row_mean(x.data)
    inv = 1.0 / np.sqrt(_row_mean(centered * centered) + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - np.add.reduce(gx_hat, axis=-1, keepdims=True) / h
            - xhat * (np.add.reduce(gx_hat * xhat, axis=-1, keepdims=True) / h)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), backward)


def _row_mean(x: np.ndarray) -> np.ndarray:
    # mean over the last axis as a matrix-vector product; much cheaper than a
    # ufunc reduction when the rows are short
    n = x.shape[-1]
    return (x @ np.full(n, 1.0 / n))[..., None]


def _row_max(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n > 16:
        return x.max(axis=-1, keepdims=True)
    m = x[..., 0].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - _row_max(logits))
    e /= (e @ np.ones(e.shape[-1]))[..., None]
    return e


def softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    With a boolean ``mask`` the distribution is taken over the ``True``
    columns only; excluded columns come out as exact zeros and pass back no
    gradient.
    """
    logits = as_tensor(logits)
    if logits.data.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is None:
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("softmax received non-finite logits")
        probs = _softmax_np(logits.data)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (logits.shape[-1],):
            raise DimensionError(f"mask shape {mask.shape} vs logits {logits.shape}")
        if not mask.any():
            raise DimensionError("softmax mask excludes every column")
        # excluded columns may hold anything, including -inf sentinels
        active = logits.data[..., mask]
        if not np.all(np.isfinite(active)):
            raise NumericError("softmax received non-finite logits")
        probs = np.zeros_like(logits.data)
        probs[..., mask] = _softmax_np(active)
    out = Tensor(probs)

    def backward(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _record(out, (logits,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shapes {logits.shape} and {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy target out of range")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = log_z - shifted[rows, targets]
    value = nll.mean()
    if not math.isfinite(value):
        raise NumericError("cross_entropy produced a non-finite value")
    out = Tensor(value)

    def backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (g / n),)

    return _record(out, (logits,), backward)


def argmax(x: Tensor | np.ndarray, axis: int = -1) -> np.ndarray:
    """Index of the maximum; ties go to the lowest index. Not differentiable."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


# -- routing helpers --------------------------------------------------------------


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    out = Tensor(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(out, (x,), backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[t, index[t]]`` for each row ``t`` of a 2-D tensor."""
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, index])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _record(out, (x,), backward)


def stitch_rows(parts: Sequence[Tensor], indices: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Assemble ``out[indices[k]] = parts[k]``; each output row comes from at most one part."""
    if not parts:
        raise DimensionError("stitch_rows needs at least one part")
    width = parts[0].shape[1:]
    data = np.zeros((n_rows, *width))
    for part, idx in zip(parts, indices):
        data[idx] = part.data
    out = Tensor(data)
    return _record(out, tuple(parts), lambda g: tuple(g[idx] for idx in indices))


# -- gradient checking ------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    samples: int | None = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. For each
    sampled coordinate the error is ``|analytic - numeric| / max(1, |numeric|)``;
    the maximum over all sampled coordinates is returned. ``samples=None``
    checks every coordinate.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
        p.requires_grad = True
        # perturbation writes through reshape(-1), which must be a view
        p.data = np.ascontiguousarray(p.data)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if samples is None or samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f().item()
            flat[c] = orig - eps
            down = f().item()
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {p.name or 'param'}[{c}]")
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
