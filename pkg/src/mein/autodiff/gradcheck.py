"""Central finite-difference oracle for analytic gradients.

The oracle never calls ``backward``: it re-evaluates the forward function in
float64 with each input coordinate nudged by ``+-h``. Analytic gradients come
from the float32 graph, evaluated at the same (float32-representable) point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

LossFn = Callable[[Sequence[Tensor]], Tensor]


def numerical_gradients(fn: LossFn, arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` w.r.t. every input, in float64."""
    point = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with no_grad():
        for k, arr in enumerate(point):
            g = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                plus = fn([Tensor(a) for a in point]).item()
                flat[idx] = orig - h
                minus = fn([Tensor(a) for a in point]).item()
                flat[idx] = orig
                g.reshape(-1)[idx] = (plus - minus) / (2.0 * h)
            grads.append(g)
    return grads


def analytic_gradients(fn: LossFn, arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(np.asarray(a, dtype=np.float32), requires_grad=True) for a in arrays]
    loss = fn(inputs)
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over all inputs jointly."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class GradCheckResult:
    instances: int
    worst_error: float
    resampled: int

    def passed(self, tol: float) -> bool:
        return self.worst_error < tol


def _is_smooth(fn: LossFn, arrays, h: float, rtol: float) -> bool:
    # a kink within h of the point makes the h and h/2 estimates disagree
    coarse = numerical_gradients(fn, arrays, h)
    fine = numerical_gradients(fn, arrays, h / 2)
    return relative_error(coarse, fine) < rtol


def check_gradients(
    fn: LossFn,
    sample: Callable[[np.random.Generator], Sequence[np.ndarray]],
    instances: int = 100,
    h: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
    max_resample: int = 50,
) -> GradCheckResult:
    """Compare analytic and finite-difference gradients on random instances.

    ``sample`` draws the inputs for one instance. An instance that fails the
    tolerance is re-examined: if halving ``h`` changes the numeric estimate
    the point sits on a non-differentiable kink and a fresh instance is drawn.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    resampled = 0
    done = 0
    while done < instances:
        arrays = [np.asarray(a, dtype=np.float32) for a in sample(rng)]
        err = relative_error(analytic_gradients(fn, arrays), numerical_gradients(fn, arrays, h))
        if err >= tol and not _is_smooth(fn, arrays, h, tol):
            resampled += 1
            if resampled > max_resample:
                raise RuntimeError("too many non-smooth instances; widen the sampling range")
            continue
        worst = max(worst, err)
        done += 1
    return GradCheckResult(instances=instances, worst_error=worst, resampled=resampled)
