from dataclasses import dataclass, field

import numpy as np

from .params import backward


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: dict = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tol

    @property
    def failures(self):
        return {k: v for k, v in self.max_rel_err.items() if v >= self.tol}


def grad_check(f, store, h=1e-5, tol=1e-4, blocks=None, floor=1e-6, max_coords=None, seed=0):
    """Compare analytic gradients of ``f(store)`` with central differences.

    The per-coordinate error is |a - n| / max(|a|, |n|, floor); the report keeps
    the largest per block.  ``max_coords`` subsamples coordinates of big blocks.
    """
    loss = f(store)
    backward(loss, store)
    analytic = {b.name: b.grad.copy() for b in store}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol)
    for b in store:
        if blocks is not None and b.name not in blocks:
            continue
        base = b.values.copy()
        flat = base.ravel()
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        worst = 0.0
        for i in coords:
            pert = flat.copy()
            pert[i] = flat[i] + h
            store.set(b.name, pert.reshape(base.shape))
            up = float(f(store).value)
            pert[i] = flat[i] - h
            store.set(b.name, pert.reshape(base.shape))
            down = float(f(store).value)
            num = (up - down) / (2.0 * h)
            a = analytic[b.name].ravel()[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        store.set(b.name, base)
        report.max_rel_err[b.name] = worst
    return report
