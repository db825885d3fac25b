"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, backward, record_branches, zero_grads


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    checked: int
    # coordinates whose +/- eps step changed a max-pool winner, SELU sign or
    # log clamp; a central difference across a kink says nothing about the
    # gradient, so they are replaced by fresh draws
    skipped_kinks: int


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    samples: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients on sampled coordinates.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    Coordinates are drawn without replacement until ``samples`` smooth ones
    have been compared or the parameters run out.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    if samples < 1:
        raise ConfigError("grad_check needs at least one sample")
    params = list(params)

    zero_grads(params)
    with record_branches() as base:
        loss = f()
    first = loss.item()
    if f().item() != first:
        raise ContractError("grad_check: f is not deterministic (is dropout active?)")
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = np.random.default_rng(seed).permutation(int(offsets[-1]))

    worst, checked, skipped = 0.0, 0, 0
    for flat in order:
        if checked == samples:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), params[k].shape)
        data = params[k].data
        orig = data[idx]
        data[idx] = orig + eps
        with record_branches() as b_up:
            up = f().item()
        data[idx] = orig - eps
        with record_branches() as b_down:
            down = f().item()
        data[idx] = orig
        if not (_same_branches(base, b_up) and _same_branches(base, b_down)):
            skipped += 1
            continue
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[k][idx])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-12))
        checked += 1
    zero_grads(params)
    return GradCheckReport(worst, checked, skipped)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Largest ``|a - n| / max(|a|, |n|, 1e-12)`` over sampled smooth coordinates."""
    return grad_check_report(f, params, eps, samples, seed).max_rel_err
