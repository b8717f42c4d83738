"""Dense float64 layer arithmetic, loss functions, and gradient checking.

Everything downstream (the self-explaining model, the masking attacks, the
training loop) computes on the primitives in this module.  Tensors are plain
row-major ``numpy`` float64 arrays; a "Tensor2D" is simply an array of shape
``(rows, cols)``.  Backward passes are written out by hand so that every
gradient can be validated against central finite differences.

All functions are pure: they never mutate their inputs and hold no state, so
they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


@dataclass
class LossValue:
    """A scalar loss together with its gradient w.r.t. the loss input."""

    value: float
    gradient: np.ndarray


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compute ``x @ W + b`` for a batch of row vectors.

    ``x`` is ``(batch, in)``, ``W`` is ``(in, out)``, ``b`` is ``(out,)``.
    """
    x, W, b = _as_f64(x), _as_f64(W), _as_f64(b)
    if x.ndim != 2 or W.ndim != 2:
        raise DimensionError(f"affine_forward expects 2-D operands, got x{x.shape} W{W.shape}")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine_forward: x has shape {x.shape} but W has shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine_forward: b has shape {b.shape} but W has shape {W.shape}")
    return x @ W + b


def affine_backward(
    x: np.ndarray, W: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of an affine layer: returns ``(dx, dW, db)``."""
    x, W, dout = _as_f64(x), _as_f64(W), _as_f64(dout)
    if dout.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(
            f"affine_backward: dout has shape {dout.shape}, expected {(x.shape[0], W.shape[1])}"
        )
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise ``max(0, x)``."""
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Backward pass of relu.

    The subgradient at exactly 0 is taken as 0, so upstream gradient is
    passed through only where ``x > 0``.
    """
    x, dout = _as_f64(x), _as_f64(dout)
    return np.where(x > 0.0, dout, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(scores: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Backward pass given the *outputs* of sigmoid."""
    return _as_f64(dout) * scores * (1.0 - scores)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = _as_f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_loss(logits: np.ndarray, targets: np.ndarray) -> LossValue:
    """Mean cross entropy over rows, with the gradient w.r.t. the logits.

    ``targets`` holds one class index per row.  The per-row gradient is
    ``(softmax(row) - onehot(target)) / batch`` so that the value and the
    gradient are both batch means.
    """
    logits = _as_f64(logits)
    if logits.ndim == 1:
        logits = logits[None, :]
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    batch, c = logits.shape
    if targets.shape != (batch,):
        raise DimensionError(f"softmax_ce_loss: {batch} rows but targets shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"softmax_ce_loss: target out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(logsumexp - shifted[np.arange(batch), targets]))
    grad = softmax(logits)
    grad[np.arange(batch), targets] -= 1.0
    grad /= batch
    return LossValue(value=value, gradient=grad)


def l1_loss(v: np.ndarray) -> LossValue:
    """L1 norm of a score vector (or the batch mean of row L1 norms).

    Intended for sigmoid outputs in [0, 1]; the gradient is ``sign(v)``
    (0 at exactly 0), scaled by ``1/batch`` for 2-D input.
    """
    v = _as_f64(v)
    if v.ndim == 1:
        return LossValue(value=float(np.abs(v).sum()), gradient=np.sign(v))
    batch = v.shape[0]
    value = float(np.abs(v).sum(axis=1).mean())
    return LossValue(value=value, gradient=np.sign(v) / batch)


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative deviation between an analytic gradient and central differences.

    ``f`` maps an array to ``(scalar value, gradient of same shape as x)``.
    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x = _as_f64(x)
    _, analytic = f(x)
    analytic = _as_f64(analytic)
    if analytic.shape != x.shape:
        raise DimensionError(
            f"grad_check: gradient shape {analytic.shape} does not match input {x.shape}"
        )
    worst = 0.0
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, _ = f(x)
        flat[i] = orig - h
        down, _ = f(x)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"grad_check: non-finite value at coordinate {i}")
        numeric = (up - down) / (2.0 * h)
        a = analytic.ravel()[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def require_finite(x: np.ndarray, what: str) -> np.ndarray:
    """Raise :class:`NumericError` naming ``what`` if any entry is NaN/Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x
