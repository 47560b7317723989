"""Central finite-difference gradient checks for modules and loss functions.

Relative error per entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
At step 1e-5 a central difference of an O(1) float64 loss carries roundoff near
``eps * |f| / step``, about 1e-10, so gradients much below 1e-5 cannot be resolved
to 1e-4 relative. The floor compares those entries at 1e-9 absolute instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-5


@dataclass
class GradCheckResult:
    name: str
    n_checked: int
    max_rel_error: float

    @property
    def ok(self):
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic, numeric, floor=FLOOR):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@torch.no_grad()
def numeric_grad(fn, tensor: torch.Tensor, flat_indices, step=STEP) -> np.ndarray:
    """d fn() / d tensor at the given flat positions, by central differences in place."""
    flat = tensor.view(-1)
    out = np.empty(len(flat_indices))
    for n, i in enumerate(flat_indices):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = float(fn())
        flat[i] = orig - step
        minus = float(fn())
        flat[i] = orig
        out[n] = (plus - minus) / (2 * step)
    return out


def check_function(fn, inputs: dict, step=STEP, name="function") -> GradCheckResult:
    """Check every entry of each float64 tensor in ``inputs`` against ``fn()``'s autograd gradient."""
    for t in inputs.values():
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    worst, count = 0.0, 0
    for t in inputs.values():
        analytic = t.grad.reshape(-1).numpy().copy()
        idx = np.arange(t.numel())
        numeric = numeric_grad(fn, t.data, idx, step)
        worst = max(worst, float(relative_error(analytic, numeric).max(initial=0.0)))
        count += len(idx)
    return GradCheckResult(name, count, worst)


def check_module(module: torch.nn.Module, loss_fn, fraction=0.01, seed=0, step=STEP, min_per_param=1, name=None):
    """Check a seeded random ``fraction`` of each trainable parameter's entries.

    ``loss_fn(module)`` must be deterministic; the module should be float64.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn(module).backward()
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for pname, p in params:
        if p.grad is None:
            continue
        k = max(min_per_param, int(round(fraction * p.numel())))
        idx = np.sort(rng.choice(p.numel(), size=min(k, p.numel()), replace=False))
        analytic = p.grad.reshape(-1).numpy()[idx]
        numeric = numeric_grad(lambda: loss_fn(module), p.data, idx, step)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
        count += len(idx)
    return GradCheckResult(name or type(module).__name__, count, worst)
