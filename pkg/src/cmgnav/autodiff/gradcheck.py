from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# Relative errors use max(|analytic|, |numeric|, REL_FLOOR) as the denominator so
# that near-zero gradients are judged on absolute error instead.
REL_FLOOR = 1e-3


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], p: Tensor, flat_idx: int, step: float) -> float:
    view = p.data.reshape(-1)
    orig = view[flat_idx]
    with no_grad():
        view[flat_idx] = orig + step
        up = f().item()
        view[flat_idx] = orig - step
        down = f().item()
    view[flat_idx] = orig
    return (up - down) / (2.0 * step)


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor] | dict,
                            step: float = 1e-3, n_probe: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` must rebuild its graph on every call.  With ``n_probe`` set, that many
    (parameter, entry) pairs are sampled with ``rng``; otherwise every entry of
    every parameter is checked.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]

    if n_probe is None:
        probes = [(i, j) for i, p in enumerate(plist) for j in range(p.data.size)]
    else:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([p.data.size for p in plist])
        owners = rng.choice(len(plist), size=n_probe, p=sizes / sizes.sum())
        probes = [(int(i), int(rng.integers(plist[i].data.size))) for i in owners]

    worst = 0.0
    for i, j in probes:
        num = numeric_grad(f, plist[i], j, step)
        ana = analytic[i].reshape(-1)[j]
        worst = max(worst, float(relative_error(ana, num)))
    for p in plist:
        p.grad = None
    return worst
