"""Dense float64 kernels with a fixed accumulation order.

Everything downstream (cells, the split protocol, aggregation) goes through
these functions so that a run is bit-reproducible and so that the split and
unsplit execution paths perform identical floating-point operations.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised on incompatible shapes; a configuration error, never recoverable."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with inner accumulation in ascending index order.

    Equivalent, element for element and rounding for rounding, to the naive
    triple loop: c[i,j] = ((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp)
        out += tmp
    return out


def tanh(z):
    return np.tanh(z)


def sigmoid(z):
    # split on sign to avoid overflow in exp
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0.0)


_ACTIVATIONS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "identity": lambda z: np.array(z, dtype=np.float64, copy=True),
}


def apply_activation(m: np.ndarray, kind: str) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise DimensionError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(m, dtype=np.float64))


def activation_derivative(preact: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation evaluated at the pre-activation."""
    z = np.asarray(preact, dtype=np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(z)
    raise DimensionError(f"unknown activation {kind!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and the gradient w.r.t. the logits.

    logits: (batch, classes); labels: (batch,) integer class indices.
    The returned gradient already carries the 1/batch factor.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise DimensionError(f"label out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    losses = logsumexp - shifted[np.arange(n), labels]
    probs = softmax(logits)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(losses.mean()), grad


def sigmoid_binary_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy on sigmoid scores; logits (batch, 1), labels 0/1."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if logits.shape != labels.shape:
        raise DimensionError("logit/label length mismatch")
    n = logits.shape[0]
    # log(1+exp(-|z|)) form is overflow-safe for both signs
    losses = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - labels) / n
    return float(losses.mean()), grad.reshape(-1, 1)
