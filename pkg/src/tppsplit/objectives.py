"""Negative log-likelihood in its density, intensity and compensator forms.

Every form splits as  L = L_T + L_M  with

    L_T = -(1/L) sum_l [ sum_i log f*(tau_li) + log S*(T - t_ln) ]
    L_M = -(1/L) sum_l   sum_i log p*(k_li | tau_li)

averaged over the number of sequences L (not events).  The survival term
always belongs to L_T.
"""
from dataclasses import dataclass, field

import numpy as np

from .diffgraph import ops
from .errors import EmptyDataset, NonFiniteLoss, NonMonotoneCompensator
from .models.assembly import FORMS, Batch
from .quadrature import QuadratureConfig, integrate

__all__ = ["NLLBreakdown", "BatchLoss", "batch_loss", "nll", "nll_density", "nll_intensity",
           "nll_compensator", "integrate_ground_intensity", "QuadratureConfig"]


@dataclass
class NLLBreakdown:
    L_T: float
    L_M: float
    total: float
    per_sequence: list = field(default_factory=list)
    mc_stderr: float = 0.0

    def to_dict(self):
        return {"L_T": self.L_T, "L_M": self.L_M, "total": self.total, "mc_stderr": self.mc_stderr}


@dataclass
class BatchLoss:
    """Graph nodes for one batch plus per-row values for bookkeeping."""
    L_T: object
    L_M: object
    row_time: np.ndarray
    row_mark: np.ndarray
    stderr: np.ndarray
    batch: Batch

    @property
    def total(self):
        return ops.add(self.L_T, self.L_M)


def _check_rows(batch, log_f, log_S, log_pm_k, offset=0):
    ev = batch.event_w > 0
    tail = batch.tail_w > 0
    for term, vals, mask in (("time", log_f, ev), ("survival", log_S, tail), ("mark", log_pm_k, ev)):
        bad = mask & ~np.isfinite(vals)
        if bad.any():
            r = int(np.nonzero(bad)[0][0])
            raise NonFiniteLoss(int(batch.seq_index[r]) + offset, int(batch.event_index[r]), term)


def batch_loss(model, batch, form=None, quad=None, p=None, n_seqs=None, offset=0):
    """L_T and L_M as graph nodes for a batch, averaged over ``n_seqs`` (default: batch size)."""
    form = form or model.default_form
    if form not in FORMS:
        raise ValueError(f"unknown NLL form {form!r}")
    out = model.forward(batch, form, quad, p)
    if form == "compensator":
        log_lam = out.extras["log_intensity"].value
        bad = (batch.event_w > 0) & ~(log_lam > -np.inf)
        if bad.any():
            r = int(np.nonzero(bad)[0][0])
            raise NonMonotoneCompensator(
                f"compensator derivative is 0 at sequence {int(batch.seq_index[r]) + offset}, "
                f"event {int(batch.event_index[r])}")
    R = batch.n_rows
    log_pm_k = ops.index(out.log_pm, (np.arange(R), batch.target))
    _check_rows(batch, out.log_f.value, out.log_S.value, log_pm_k.value, offset)
    scale = -1.0 / (n_seqs or batch.n_seqs)
    # padding rows carry zero weight; zero out non-finite garbage there first
    ew = batch.event_w
    tw = batch.tail_w
    log_f = ops.where(ew > 0, out.log_f, 0.0)
    log_S = ops.where(tw > 0, out.log_S, 0.0)
    log_pk = ops.where(ew > 0, log_pm_k, 0.0)
    row_time = ops.add(ops.mul(log_f, ew), ops.mul(log_S, tw))
    row_mark = ops.mul(log_pk, ew)
    L_T = ops.mul(ops.sum(row_time), scale)
    L_M = ops.mul(ops.sum(row_mark), scale)
    stderr = out.extras.get("stderr")
    stderr = np.zeros(R) if stderr is None else np.where((ew + tw) > 0, stderr, 0.0)
    return BatchLoss(L_T, L_M, -row_time.value, -row_mark.value, stderr, batch)


def nll(model, dataset, form=None, quad=None, batch_size=64):
    """Dataset NLL with its time/mark split.

    Batches are summed in a fixed order, so results are bit-stable for a
    given batch size.  ``mc_stderr`` is the standard error of L_T from Monte
    Carlo quadrature (0 for the deterministic rules).
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot evaluate the NLL of an empty dataset")
    p = {name: ops.constant(b.values) for name, b in model.store.blocks.items()}
    per_T = np.zeros(n)
    per_M = np.zeros(n)
    var = 0.0
    for start in range(0, n, batch_size):
        batch = Batch.from_sequences(dataset.sequences[start:start + batch_size])
        bl = batch_loss(model, batch, form, quad, p, n_seqs=1, offset=start)
        per_T[start:start + batch.n_seqs] = np.bincount(batch.seq_index, bl.row_time, batch.n_seqs)
        per_M[start:start + batch.n_seqs] = np.bincount(batch.seq_index, bl.row_mark, batch.n_seqs)
        var += float(np.sum(bl.stderr ** 2))
    L_T = float(np.sum(per_T) / n)
    L_M = float(np.sum(per_M) / n)
    return NLLBreakdown(L_T, L_M, L_T + L_M, list(zip(per_T.tolist(), per_M.tolist())),
                        float(np.sqrt(var) / n))


def nll_density(model, dataset, quad=None, batch_size=64):
    return nll(model, dataset, "density", quad, batch_size)


def nll_intensity(model, dataset, quad=None, batch_size=64):
    return nll(model, dataset, "intensity", quad, batch_size)


def nll_compensator(model, dataset, quad=None, batch_size=64):
    return nll(model, dataset, "compensator", quad, batch_size)


def integrate_ground_intensity(lam, a, b, quad=QuadratureConfig()):
    """Integral of a vectorised intensity on [a, b]; returns (value, stderr)."""
    return integrate(lam, a, b, quad)
