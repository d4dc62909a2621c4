from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import NumericError, Tape, Tensor


def _value(f: Callable[[], Tensor]) -> float:
    v = float(np.asarray(f().data, dtype=np.float64))
    if not np.isfinite(v):
        raise NumericError("objective is not finite")
    return v


def grad_check_report(
    f: Callable[[], Tensor],
    params: ParamStore,
    epsilon: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-12,
) -> dict[str, float]:
    """Max relative error per parameter between tape gradients and central differences.

    ``f`` takes no arguments and reads the parameters in ``params``. When
    ``max_per_param`` is set, that many coordinates per parameter are probed
    (chosen with ``rng``) instead of all of them.

    The error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``. Deep
    composites have coordinates whose true gradient sits below the
    finite-difference noise (about ``ulp(f) / epsilon``); a larger ``floor``
    compares those absolutely.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite")
    tape.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    params.zero_grad()

    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(flat.size, size=max_per_param, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _value(f)
            flat[i] = orig - epsilon
            down = _value(f)
            flat[i] = orig
            num = (up - down) / (2.0 * epsilon)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    return report


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    epsilon: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-12,
) -> float:
    """Largest relative gradient error over all probed parameter coordinates."""
    report = grad_check_report(f, params, epsilon, max_per_param, rng, floor)
    return max(report.values(), default=0.0)
