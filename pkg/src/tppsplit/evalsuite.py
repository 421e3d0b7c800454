"""Test-time metrics: NLL terms, calibration (PCE, ECE), MAE, accuracy@n and MRR."""
import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import BracketFailure, EmptySamples
from .eventstore import HawkesProcess
from .objectives import NLLBreakdown, nll
from .predictive import PredictiveOutputs
from .quadrature import QuadratureConfig

PCE_LEVELS = np.round(np.arange(1, 20) * 0.05, 10)
ECE_BINS = 10
TOP_N = (1, 3, 5)
SUMMARY_FILE = "metrics.csv"
RELIABILITY_FILE = "reliability.csv"


@dataclass
class PITSample:
    z: float


@dataclass
class MarkPrediction:
    probs: np.ndarray
    true_k: int


def _stack_preds(preds, marks=None):
    if marks is not None:
        return np.asarray(preds, dtype=np.float64), np.asarray(marks, dtype=np.int64)
    preds = list(preds)
    if not preds:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack([p.probs for p in preds]), np.array([p.true_k for p in preds], dtype=np.int64)


def _z_array(samples):
    samples = list(samples) if not isinstance(samples, np.ndarray) else samples
    return np.asarray([s.z if isinstance(s, PITSample) else s for s in samples], dtype=np.float64)


def pce(samples, levels=PCE_LEVELS):
    """Mean |P(z <= q) - q| over the levels, with P the empirical PIT distribution."""
    z = _z_array(samples)
    if z.size == 0:
        raise EmptySamples("PCE needs at least one PIT value")
    levels = np.asarray(levels, dtype=np.float64)
    freq = (z[None, :] <= levels[:, None]).mean(axis=1)
    return float(np.mean(np.abs(freq - levels)))


def ece(preds, marks=None, bins=ECE_BINS):
    """Top-label ECE over equal-width confidence bins.

    Accepts either a list of MarkPrediction or a (N, K) probability array
    with the true marks.
    """
    probs, true_k = _stack_preds(preds, marks)
    if len(true_k) == 0:
        raise EmptySamples("ECE needs at least one prediction")
    rows = reliability_bins_marks(probs, true_k, bins)
    n = len(true_k)
    return float(sum(r["count"] / n * abs(r["accuracy"] - r["confidence"]) for r in rows if r["count"]))


def _top_label(probs):
    # argmax picks the lowest id on ties, matching the ranking rule
    pred = np.argmax(probs, axis=1)
    return pred, probs[np.arange(len(probs)), pred]


def reliability_bins_marks(probs, marks, bins=ECE_BINS):
    probs = np.asarray(probs, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    pred, conf = _top_label(probs)
    correct = (pred == marks).astype(np.float64)
    # confidence 1.0 goes in the last bin
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    rows = []
    for b in range(bins):
        sel = idx == b
        c = int(sel.sum())
        rows.append({"center": (b + 0.5) / bins, "confidence": float(conf[sel].mean()) if c else 0.0,
                     "accuracy": float(correct[sel].mean()) if c else 0.0, "count": c})
    return rows


def reliability_bins_time(samples, levels=PCE_LEVELS):
    z = _z_array(samples)
    levels = np.asarray(levels, dtype=np.float64)
    return [{"level": float(q), "frequency": float(np.mean(z <= q)) if z.size else 0.0,
             "count": int(np.sum(z <= q))} for q in levels]


def reliability_bins(samples, bins=ECE_BINS, marks=None):
    """Mark reliability rows when ``marks`` is given, time (PIT) rows otherwise."""
    if marks is not None:
        return reliability_bins_marks(samples, marks, bins)
    return reliability_bins_time(samples, np.arange(1, bins) / bins if isinstance(bins, int) else bins)


def median_tau(log_survival, n=1, tol=1e-6, start=1e-6, cap=1e8, max_iter=400):
    """Median gap for ``n`` predictive distributions by doubling then bisection.

    ``log_survival`` maps an (n,) array of gaps to log(1 - F*).  Returns an
    (n,) array with |F*(median) - 0.5| < tol wherever F* is continuous.
    """
    def cdf(q):
        return -np.expm1(log_survival(q))

    hi = np.full(n, float(start))
    need = cdf(hi) <= 0.5
    while need.any():
        hi = np.where(need, hi * 2.0, hi)
        if np.any(hi > cap):
            raise BracketFailure(f"F* stays below 0.5 up to {cap}; defective distribution")
        need = cdf(hi) <= 0.5
    lo = np.where(hi > start, hi / 2.0, 0.0)
    mid = hi.copy()
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        F = cdf(mid)
        done = (np.abs(F - 0.5) < tol) | (hi - lo <= 4 * np.finfo(float).eps * hi)
        if done.all():
            break
        above = F > 0.5
        hi = np.where(above & ~done, mid, hi)
        lo = np.where(~above & ~done, mid, lo)
    return mid


def mae(pred, tol=1e-6):
    """Mean |median gap - observed gap| over all events."""
    if len(pred) == 0:
        raise EmptySamples("MAE needs at least one event")
    med = median_tau(pred.log_survival, len(pred), tol)
    return float(np.mean(np.abs(med - pred.tau)))


def mark_ranks(probs, marks):
    """1-based rank of the true mark; ties go to the lower mark id."""
    probs = np.asarray(probs, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    p_true = probs[np.arange(len(marks)), marks][:, None]
    ids = np.arange(probs.shape[1])[None, :]
    ahead = (probs > p_true) | ((probs == p_true) & (ids < marks[:, None]))
    return 1 + ahead.sum(axis=1)


def accuracy_at_n(preds, n, marks=None):
    if n < 1:
        raise ValueError("n must be >= 1")
    probs, true_k = _stack_preds(preds, marks)
    if len(true_k) == 0:
        raise EmptySamples("accuracy needs at least one prediction")
    return float(np.mean(mark_ranks(probs, true_k) <= n))


def mrr(preds, marks=None):
    probs, true_k = _stack_preds(preds, marks)
    if len(true_k) == 0:
        raise EmptySamples("MRR needs at least one prediction")
    return float(np.mean(1.0 / mark_ranks(probs, true_k)))


# ---------------------------------------------------------------- reference models


class HawkesOracle:
    """A known multivariate Hawkes process used as a predictive model.

    ``scale`` multiplies every intensity, so scale != 1 gives a deliberately
    misspecified model with the right mark distribution but wrong timing.
    """

    def __init__(self, cfg, scale=1.0):
        self.cfg = cfg
        self.scale = float(scale)
        self.process = HawkesProcess(cfg)
        self.num_marks = cfg.K

    def misscaled(self, factor):
        return HawkesOracle(self.cfg, self.scale * factor)

    def _states(self, dataset):
        ex, tau, t_prev, marks, seq, ev, tails = [], [], [], [], [], [], []
        for l, s in enumerate(dataset.sequences):
            A = self.process.excitation_before_events(s)
            n = len(s)
            prev = np.concatenate([[0.0], s.times])
            ex.append(A[:n])
            tau.append(s.times - prev[:n])
            marks.append(s.marks)
            seq.append(np.full(n, l))
            ev.append(np.arange(n))
            tails.append((A[n], s.T - prev[n]))
        K = self.cfg.K
        cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
        return (cat(ex, (0, K, K)), cat(tau, (0,)), cat(marks, (0,)).astype(np.int64),
                cat(seq, (0,)).astype(np.int64), cat(ev, (0,)).astype(np.int64), tails)

    def predictive(self, dataset, quad=None, batch_size=None):
        ex, tau, marks, seq, ev, _ = self._states(dataset)
        lam = self.process.marked_intensity(ex, tau)
        probs = lam / lam.sum(axis=1, keepdims=True)

        def log_survival(q):
            return -self.scale * self.process.compensator(ex, np.asarray(q, dtype=np.float64))

        return PredictiveOutputs(tau, marks, probs, log_survival, seq, ev)

    def nll(self, dataset, quad=None, batch_size=None):
        ex, tau, marks, seq, _, tails = self._states(dataset)
        lam = self.scale * self.process.marked_intensity(ex, tau)
        ground = lam.sum(axis=1)
        comp = self.scale * self.process.compensator(ex, tau)
        L = len(dataset)
        per_T = np.bincount(seq, -(np.log(ground) - comp), L)
        per_M = np.bincount(seq, -np.log(lam[np.arange(len(marks)), marks] / ground), L)
        for l, (A, gap) in enumerate(tails):
            per_T[l] += self.scale * self.process.compensator(A[None], np.array([gap]))[0]
        L_T, L_M = float(per_T.sum() / L), float(per_M.sum() / L)
        return NLLBreakdown(L_T, L_M, L_T + L_M, list(zip(per_T.tolist(), per_M.tolist())), 0.0)


# ---------------------------------------------------------------- full report


def evaluate(model, test, quad=None, batch_size=256, tol=1e-6):
    """Every headline metric plus reliability tables for ``model`` on ``test``."""
    quad = quad or QuadratureConfig()
    if hasattr(model, "store"):
        test.validate(model.num_marks)
        br = nll(model, test, None, quad, batch_size)
    else:
        br = model.nll(test)
    pred = model.predictive(test, quad, batch_size)
    if len(pred) == 0:
        raise EmptySamples("test set has no events")
    z = pred.pit()
    metrics = {"L_T": br.L_T, "L_M": br.L_M, "NLL": br.total, "PCE": pce(z),
               "ECE": ece(pred.probs, pred.marks), "MAE": mae(pred, tol)}
    for n in TOP_N:
        metrics[f"acc@{n}"] = accuracy_at_n(pred.probs, n, pred.marks)
    metrics["MRR"] = mrr(pred.probs, pred.marks)
    metrics["n_events"] = len(pred)
    return {"metrics": metrics, "mark_reliability": reliability_bins_marks(pred.probs, pred.marks),
            "time_reliability": reliability_bins_time(z), "pit": z}


def write_report(report, out_dir, header_comment=None):
    os.makedirs(out_dir, exist_ok=True)
    head = f"# {header_comment}\n" if header_comment else ""
    with open(os.path.join(out_dir, SUMMARY_FILE), "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in report["metrics"].items():
            w.writerow([k, repr(float(v)) if k != "n_events" else int(v)])
    with open(os.path.join(out_dir, RELIABILITY_FILE), "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "x", "mean", "observed", "count"])
        for r in report["mark_reliability"]:
            w.writerow(["mark", repr(r["center"]), repr(r["confidence"]), repr(r["accuracy"]), r["count"]])
        for r in report["time_reliability"]:
            w.writerow(["time", repr(r["level"]), repr(r["level"]), repr(r["frequency"]), r["count"]])
    return os.path.join(out_dir, SUMMARY_FILE), os.path.join(out_dir, RELIABILITY_FILE)
