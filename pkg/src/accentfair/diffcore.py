"""Dense float64 primitives with hand-written backward passes.

Tensors are plain numpy arrays in double precision. Each forward returns its
output together with a small context tuple that the matching backward consumes.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

GradMap = dict[str, np.ndarray]


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine_forward(x, weight, bias):
    """Return ``x @ weight + bias`` and the context for :func:`affine_backward`."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"affine expects 2-d input, 2-d weight, 1-d bias; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"affine shape mismatch: input {x.shape} weight {weight.shape} bias {bias.shape}"
        )
    return x @ weight + bias, (x, weight)


def affine_backward(ctx, grad_out):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    if ctx is None:
        raise RuntimeError("affine_backward called without a forward context")
    x, weight = ctx
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def tanh_forward(x):
    y = np.tanh(as_tensor(x))
    return y, y


def tanh_backward(ctx, grad_out):
    if ctx is None:
        raise RuntimeError("tanh_backward called without a forward context")
    return grad_out * (1.0 - ctx * ctx)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_targets(targets, n: int, vocab: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target outside [0, {vocab})")
    return targets


def frame_cross_entropy(logits, targets) -> np.ndarray:
    """Per-row cross-entropy ``-log softmax(logits[i])[targets[i]]``."""
    logits = as_tensor(logits)
    targets = _check_targets(targets, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(logits.shape[0]), targets]


def ce_logits_forward(logits, targets):
    """Mean cross-entropy over rows, computed with the max shift."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise DimensionError(f"logits must be a non-empty n x V matrix, got {logits.shape}")
    targets = _check_targets(targets, logits.shape[0], logits.shape[1])
    value = float(frame_cross_entropy(logits, targets).mean())
    return value, (logits, targets)


def ce_logits_backward(ctx, grad_out: float = 1.0) -> np.ndarray:
    """d(mean CE)/d logits = (softmax - onehot) / n."""
    if ctx is None:
        raise RuntimeError("ce_logits_backward called without a forward context")
    logits, targets = ctx
    n = logits.shape[0]
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1.0
    return grad * (grad_out / n)


def accumulate(into: GradMap, other: Mapping[str, np.ndarray], scale: float = 1.0) -> GradMap:
    """Add ``scale * other`` into ``into`` key by key, in sorted key order."""
    for key in sorted(other):
        g = other[key]
        if key in into:
            if into[key].shape != g.shape:
                raise DimensionError(f"gradient {key!r}: {into[key].shape} vs {g.shape}")
            into[key] = into[key] + scale * g
        else:
            into[key] = scale * np.array(g, dtype=np.float64)
    return into


def grad_check(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    step: float = 1e-4,
    names=None,
) -> dict[str, float]:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn(params)`` must return ``(value, grads)``. Returns the max relative
    error ``|a - n| / max(1, |a|, |n|)`` per parameter name. Parameters missing
    from ``grads`` are taken to have zero analytic gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, grads = fn(base)
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    names = sorted(grads) if names is None else sorted(names)
    errors: dict[str, float] = {}
    for name in names:
        theta = base[name]
        analytic = np.asarray(grads.get(name, np.zeros_like(theta)), dtype=np.float64)
        worst = 0.0
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + step
            f_plus, _ = fn(base)
            theta[idx] = orig - step
            f_minus, _ = fn(base)
            theta[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite value while perturbing {name}{idx}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        errors[name] = worst
    return errors
