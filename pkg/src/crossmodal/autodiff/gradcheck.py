"""Central finite-difference gradient checking."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from .ops import _forbid_stat_updates, branch_trace
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int  # coordinates whose +/- perturbations landed on different smooth pieces


def grad_check_report(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                      coords_per_param: int = 50, rng: np.random.Generator | None = None,
                      floor_scale: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn`` rebuilds the scalar program from the current parameter values on
    every call. Parameters must be float64. At most ``coords_per_param``
    randomly chosen coordinates of each parameter are perturbed (all of them
    when the parameter is smaller than that).

    A coordinate is skipped when the branch trace of a piecewise op (relu
    mask, max winner, neighbor set) differs between the base point and either
    perturbation: the central difference then straddles a kink and measures
    no derivative.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor), where
    ``floor`` is ``floor_scale`` times the largest analytic gradient entry
    (never below 1e-8). Coordinates whose true derivative vanishes, e.g. a
    shift that a following batchnorm cancels, then compare at the size of
    the gradient instead of dividing roundoff by roundoff.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters, {p.name or p} is {p.dtype}")

    def run():
        with branch_trace() as trace:
            out = fn()
        return out, trace

    with _forbid_stat_updates():
        for p in params:
            p.grad = None
            p.requires_grad = True
        loss, base_trace = run()
        if loss.size != 1:
            raise ContractError("grad_check needs a scalar-valued program")
        again = fn()
        if loss.data.tobytes() != again.data.tobytes():
            raise ContractError("program is not deterministic; freeze batchnorm statistics")
        loss.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        floor = max(1e-8, floor_scale * max(float(np.abs(g).max(initial=0.0)) for g in analytic))

        worst, checked, skipped = 0.0, 0, 0
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            picks = np.arange(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + epsilon
                fp, tp = run()
                flat[i] = orig - epsilon
                fm, tm = run()
                flat[i] = orig
                if tp != base_trace or tm != base_trace:
                    skipped += 1
                    continue
                num = (float(fp.data) - float(fm.data)) / (2 * epsilon)
                ana = float(ga.reshape(-1)[i])
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
                checked += 1
    return GradCheckReport(worst, checked, skipped)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               coords_per_param: int = 50, rng: np.random.Generator | None = None,
               floor_scale: float = 1e-5) -> float:
    """Max relative error over the smoothly checkable coordinates; see :func:`grad_check_report`.

    Raises ContractError when more than half the sampled coordinates straddle a kink.
    """
    rep = grad_check_report(fn, params, epsilon, coords_per_param, rng, floor_scale)
    if rep.checked < rep.skipped:
        raise ContractError(f"only {rep.checked} of {rep.checked + rep.skipped} coordinates are smooth at "
                            f"epsilon={epsilon}; move the fixture away from kinks")
    return rep.max_error
