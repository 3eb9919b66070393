"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

STEP = 1e-4
# whole-network checks: a 1e-4 nudge to an early conv weight moves thousands of
# PReLU inputs, some of which cross zero and spoil the difference quotient
MODEL_STEP = 1e-6
KINK_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    # measured only on coordinates whose gradients are near zero
    max_abs_error: float
    n_checked: int

    def passed(self, rel_tol: float, abs_tol: float) -> bool:
        return self.max_rel_error <= rel_tol and self.max_abs_error <= abs_tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    names: Sequence[str] | None = None, max_coords: int = 64,
                    step: float = STEP, rng: np.random.Generator | None = None,
                    abs_floor: float = 1e-3, kink_retries: int = 0) -> list[GradCheckResult]:
    """Compare backprop gradients with central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    Up to ``max_coords`` coordinates per parameter are sampled.  An error is
    scored relative unless both gradients are below ``abs_floor`` in
    magnitude, in which case the absolute error is used.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    base = loss.item()

    def numeric(flat, c, h):
        orig = flat[c]
        flat[c] = orig + h
        up = loss_fn().item()
        flat[c] = orig - h
        down = loss_fn().item()
        flat[c] = orig
        return (up - down) / (2 * h), (up - base) / h, (base - down) / h

    results = []
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst_rel = worst_abs = 0.0
        for c in coords:
            h = step
            num, fwd, bwd = numeric(flat, c, h)
            for _ in range(kink_retries):
                if relative_error(fwd, bwd, abs_floor) <= KINK_TOL:
                    break
                h /= 10
                num, fwd, bwd = numeric(flat, c, h)
            an = ga.reshape(-1)[c]
            if max(abs(an), abs(num)) >= abs_floor:
                worst_rel = max(worst_rel, relative_error(an, num))
            else:
                worst_abs = max(worst_abs, abs(an - num))
        results.append(GradCheckResult(name, worst_rel, worst_abs, len(coords)))
    return results


def check_model(params, batch, weights=None, flags=None, coords_per_tensor: int = 8,
                seed: int = 0, step: float = MODEL_STEP) -> dict[str, GradCheckResult]:
    """Finite-difference check of the training objective, one result per parameter group.

    Each group is checked against the sub-objective that actually updates it:
    the classifier against its weighted dataset loss, everything else against
    the weighted main objective (the classifier is a constant there).
    """
    from .losses import AblationFlags, LossWeights, forward_batch, term_losses, weighted_sum
    from .model import GROUPS
    from .trainer import MAIN_TERMS

    weights = weights or LossWeights()
    flags = flags or AblationFlags()

    def objective(include):
        def fn():
            fp = forward_batch(batch, params, flags)
            return weighted_sum(term_losses(fp, batch, params, weights, flags), weights, include)
        return fn

    rng = np.random.default_rng(seed)
    report = {}
    for group in GROUPS:
        include = ("discriminator",) if group == "discriminator" else MAIN_TERMS
        named = list(params[group].items())
        res = check_gradients(objective(include), [t for _, t in named],
                              [f"{group}.{n}" for n, _ in named], max_coords=coords_per_tensor,
                              step=step, rng=rng, kink_retries=2)
        report[group] = GradCheckResult(group, max(r.max_rel_error for r in res),
                                        max(r.max_abs_error for r in res),
                                        sum(r.n_checked for r in res))
    return report
