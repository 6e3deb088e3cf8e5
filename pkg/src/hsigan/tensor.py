"""Dense tensor helpers, parameters and the finite-difference gradient oracle.

Tensors are plain C-ordered numpy arrays (row-major, last axis fastest).
Every backward pass in the package is validated with :func:`grad_check`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}

_REDUCE = {"sum": np.sum, "mean": np.mean, "max": np.max}


class ShapeError(ValueError):
    pass


def as_tensor(values, dtype=np.float64) -> np.ndarray:
    a = np.ascontiguousarray(values, dtype=dtype)
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor contains non-finite values")
    return a


def elementwise(op: str, a, b) -> np.ndarray:
    """Apply ``op`` pointwise. ``b`` is either a same-shape tensor or a scalar."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim and b.shape != a.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "div" and np.any(b == 0):
        raise ZeroDivisionError("division by zero")
    out = fn(a, b)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return np.ascontiguousarray(out)


def reduce(op: str, a, axes: Sequence[int] | None = None, keepdims: bool = False):
    a = np.asarray(a, dtype=np.float64)
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    if axes is None or len(axes) == 0:
        return a.copy()
    norm = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"axis {ax} out of range for tensor of rank {a.ndim}")
        norm.append(ax % a.ndim)
    axes = tuple(norm)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ValueError("reduction over an empty axis")
    return _REDUCE[op](a, axis=axes, keepdims=keepdims)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; callers own and pass it explicitly."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class Parameter:
    id: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    kinks: list = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[], float],
    params: Sequence[Parameter],
    eps: float = 1e-4,
    analytic: Callable[[], None] | None = None,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-3,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` evaluates the scalar objective from the current parameter values.
    ``analytic`` (if given) must fill ``p.grad`` for every parameter; otherwise
    the grads already stored on the parameters are used.

    An element is reported as a kink (and left out of the error) when the
    one-sided differences disagree by more than ``kink_tol``, the gap does not
    shrink with the step size, and the analytic value lies between them (a
    valid subgradient), e.g. ``|x|`` at 0.

    The relative error divides by ``max(|analytic|, |numeric|, floor)``; raise
    ``floor`` when some entries are far below the roundoff of ``f`` / ``eps``.
    """
    f0 = f()
    if f() != f0:
        raise RuntimeError("function not pure")
    if analytic is not None:
        zero_grads(params)
        analytic()
    # snapshot now: f may refill grads at perturbed points
    grads = [p.grad.reshape(-1).copy() for p in params]
    worst, worst_p, worst_i, n = 0.0, None, None, 0
    kinks = []
    for p, g in zip(params, grads):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            rng = rng if rng is not None else make_rng(0)
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            rel = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            lo, hi = min(fwd, bwd), max(fwd, bwd)
            if hi - lo > kink_tol * max(abs(hi), abs(lo), 1.0) and lo - 1e-8 <= g[i] <= hi + 1e-8:
                # smooth curvature shrinks the one-sided gap with the step; a kink does not
                h = eps / 2
                flat[i] = orig + h
                fp2 = f()
                flat[i] = orig - h
                fm2 = f()
                flat[i] = orig
                gap2 = abs((fp2 - f0) / h - (f0 - fm2) / h)
                if gap2 > 0.75 * (hi - lo):
                    kinks.append((p.id, int(i)))
                    continue
            n += 1
            if rel > worst:
                worst, worst_p, worst_i = rel, p.id, np.unravel_index(i, p.shape)
    return GradCheckReport(worst, worst_p, worst_i, n, kinks)


def input_grad_check(fn, backward, x: np.ndarray, eps: float = 1e-5, seed: int = 0):
    """Gradient check with respect to an input tensor.

    Uses the scalar objective ``sum(fn(x) * r)`` for a fixed random ``r``;
    ``backward(r)`` must return d/dx of that objective.
    """
    r = make_rng(seed).standard_normal(np.shape(fn(x)))
    xp = Parameter("input", x)

    def f():
        return float(np.sum(fn(xp.value) * r))

    def analytic():
        fn(xp.value)
        xp.grad[...] = backward(r)

    return grad_check(f, [xp], eps=eps, analytic=analytic)
