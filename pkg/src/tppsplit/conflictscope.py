"""Gradient conflict between the time and mark losses.

For parameters shared by both tasks the two gradients g_T and g_M are
compared by their angle (cos phi), their magnitude similarity (GMS) and,
for conflicting pairs, which of the two dominates (TPI).  CG is the share
of conflicting steps.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .diffgraph import backward, ops
from .errors import BothZero, EmptySeries, LengthMismatch, NoConflictFound

ZERO_NORM = 1e-12
HIST_BINS = 40


def _pair(g_T, g_M):
    a = np.asarray(g_T, dtype=np.float64).ravel()
    b = np.asarray(g_M, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"gradient lengths differ: {a.size} vs {b.size}")
    return a, b


def cos_angle(g_T, g_M):
    """Cosine of the angle between two gradients; None when either is (numerically) zero."""
    a, b = _pair(g_T, g_M)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def gms(g_T, g_M):
    a, b = _pair(g_T, g_M)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        raise BothZero("GMS undefined for two zero gradients")
    return float(2 * na * nb / (na * na + nb * nb))


def tpi(g_T, g_M):
    """1 if the time gradient dominates a conflicting pair, 0 otherwise; None when not conflicting."""
    c = cos_angle(g_T, g_M)
    if c is None or c >= 0:
        return None
    a, b = _pair(g_T, g_M)
    return int(np.linalg.norm(a) > np.linalg.norm(b))


def cg_ratio(cos_series):
    vals = [c for c in cos_series if c is not None]
    if not vals:
        raise EmptySeries("no defined cosine values")
    return sum(c < 0 for c in vals) / len(vals)


@dataclass
class GradSnapshot:
    step: int
    block: str
    g_T: np.ndarray
    g_M: np.ndarray

    def __post_init__(self):
        self.g_T = np.array(self.g_T, dtype=np.float64).ravel()
        self.g_M = np.array(self.g_M, dtype=np.float64).ravel()
        if self.g_T.shape != self.g_M.shape:
            raise LengthMismatch(self.block)


@dataclass
class ConflictRecord:
    """Summary of one (step, group) pair: enough to rebuild every statistic."""
    step: int
    group: str
    cos: float
    norm_T: float
    norm_M: float

    @classmethod
    def from_vectors(cls, step, group, g_T, g_M):
        return cls(step, group, cos_angle(g_T, g_M), float(np.linalg.norm(g_T)), float(np.linalg.norm(g_M)))


def record_snapshots(snaps, step):
    """Per-block records plus encoder / decoder / all pooled records for one step."""
    out = [ConflictRecord.from_vectors(step, s.block, s.g_T, s.g_M) for s in snaps]
    pools = {"encoder": [], "decoder": [], "all": []}
    for s in snaps:
        comp = s.block.split(".")[-2]
        pools["encoder" if comp == "enc" else "decoder"].append(s)
        pools["all"].append(s)
    for name, members in pools.items():
        if members:
            out.append(ConflictRecord.from_vectors(
                step, f"pooled:{name}",
                np.concatenate([s.g_T for s in members]), np.concatenate([s.g_M for s in members])))
    return out


@dataclass
class ConflictStats:
    records: list = field(default_factory=list)

    def extend(self, recs):
        self.records.extend(recs)

    def __len__(self):
        return len(self.records)

    def groups(self):
        seen = []
        for r in self.records:
            if r.group not in seen:
                seen.append(r.group)
        return seen

    def block_groups(self):
        return [g for g in self.groups() if not g.startswith("pooled:")]

    def cos_series(self, group):
        return [r.cos for r in self.records if r.group == group]

    def summary(self, group):
        """CG, mean GMS and mean TPI over conflicting steps, and the step count."""
        recs = [r for r in self.records if r.group == group and r.cos is not None]
        conflicting = [r for r in recs if r.cos < 0]
        mean_gms = mean_tpi = float("nan")
        if conflicting:
            mean_gms = float(np.mean([2 * r.norm_T * r.norm_M / (r.norm_T ** 2 + r.norm_M ** 2)
                                      for r in conflicting]))
            mean_tpi = float(np.mean([r.norm_T > r.norm_M for r in conflicting]))
        return {"CG": len(conflicting) / len(recs) if recs else float("nan"),
                "mean_GMS": mean_gms, "mean_TPI": mean_tpi, "steps": len(recs)}

    def histogram(self, group=None, bins=HIST_BINS):
        """Counts of cos over ``bins`` equal bins on [-1, 1]; ``None`` sums every block."""
        groups = self.block_groups() if group is None else [group]
        vals = [c for g in groups for c in self.cos_series(g) if c is not None]
        counts, edges = np.histogram(vals, bins=bins, range=(-1.0, 1.0))
        return counts, edges


def capture_two_losses(model, loss, step=0, include_owned=False):
    """Backward L_T and L_M separately over one forward graph.

    ``loss`` is a BatchLoss.  Block grads are left holding g_T + g_M so an
    optimizer step afterwards consumes the gradient of the total.  Returns
    snapshots for shared blocks (and for owned blocks with a zero partner
    when ``include_owned``).
    """
    store = model.store
    backward(loss.L_T, store)
    g_T = {b.name: b.grad.copy() for b in store}
    backward(loss.L_M, store)
    g_M = {b.name: b.grad.copy() for b in store}
    snaps = []
    for b in store:
        b.grad = g_T[b.name] + g_M[b.name]
        if b.owner_tag == "shared" or include_owned:
            snaps.append(GradSnapshot(step, b.name, g_T[b.name], g_M[b.name]))
    return snaps


def export_histograms(stats, path, header_comment=None):
    """Write per-block and pooled histograms followed by summary rows."""
    if not stats.records:
        raise EmptySeries("no conflict records to export")
    edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "block", "bin_lo", "bin_hi", "count", "CG", "mean_GMS", "mean_TPI", "steps"])
        hist_groups = [(g, g) for g in stats.block_groups()] + [("pooled", None)]
        for label, g in hist_groups:
            counts, _ = stats.histogram(g)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow(["hist", label, f"{lo:.3f}", f"{hi:.3f}", int(c), "", "", "", ""])
        for g in stats.groups():
            s = stats.summary(g)
            w.writerow(["summary", g, "", "", "", _fmt(s["CG"]), _fmt(s["mean_GMS"]), _fmt(s["mean_TPI"]),
                        s["steps"]])


def _fmt(x):
    return "" if x != x else repr(float(x))


def read_conflict_csv(path):
    """Parse an exported conflict CSV into (histogram rows, summary rows)."""
    hist, summ = [], []
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            (hist if r["kind"] == "hist" else summ).append(r)
    return hist, summ


# ---------------------------------------------------------------- one-step shared vs duplicated


def _sgd_step(store, alpha, grads):
    for name, g in grads.items():
        store.set(name, store[name].values - alpha * g)


def one_step_comparison(shared_store, shared_losses, dup_store, dup_losses, lr_grid,
                        require_conflict=True):
    """Shared vs duplicated one-step loss gap on plain stores.

    ``*_losses(store)`` return the (L_T, L_M) graph nodes.  Every block of
    ``shared_store`` tagged ``shared`` is treated as shared between the tasks.
    """
    start_s = shared_store.snapshot()
    start_d = dup_store.snapshot()
    L_T, L_M = shared_losses(shared_store)
    backward(L_T, shared_store)
    g_T = {b.name: b.grad.copy() for b in shared_store}
    backward(L_M, shared_store)
    g_M = {b.name: b.grad.copy() for b in shared_store}
    names = shared_store.names({"shared"})
    if not names:
        raise NoConflictFound("the shared model has no shared parameters")
    vT = np.concatenate([g_T[n].ravel() for n in names])
    vM = np.concatenate([g_M[n].ravel() for n in names])
    cos = cos_angle(vT, vM)
    if require_conflict and (cos is None or cos >= 0):
        raise NoConflictFound(f"pooled cos = {cos}; supply a conflicting batch")
    limit = 2.0 * float(vT @ vM)
    grads_s = {n: g_T[n] + g_M[n] for n in g_T}
    dT, dM = dup_losses(dup_store)
    backward(ops.add(dT, dM), dup_store)
    grads_d = {b.name: b.grad.copy() for b in dup_store}

    def total(store, fn):
        a, b = fn(store)
        return a.item() + b.item()

    rows = []
    for alpha in lr_grid:
        shared_store.restore(start_s)
        dup_store.restore(start_d)
        _sgd_step(shared_store, alpha, grads_s)
        _sgd_step(dup_store, alpha, grads_d)
        delta = total(dup_store, dup_losses) - total(shared_store, shared_losses)
        rows.append({"alpha": alpha, "delta": delta, "delta_over_alpha": delta / alpha,
                     "rel_err": abs(delta / alpha - limit) / abs(limit) if limit else float("inf")})
    shared_store.restore(start_s)
    dup_store.restore(start_d)
    return {"cos": cos, "norm_T": float(np.linalg.norm(vT)), "norm_M": float(np.linalg.norm(vM)),
            "limit": limit, "rows": rows}


def corollary1_check(shared, duplicated, batch, lr_grid=(1e-2, 1e-3, 1e-4), form=None, quad=None,
                     require_conflict=True):
    """One plain gradient step on a shared model and on its duplicated copy.

    Both models must start from identical values (see
    ``models.duplicate_from_shared``).  For each step size alpha the report
    holds delta = L_disjoint - L_shared after the step, to be compared with
    the first-order limit 2 ||g_T|| ||g_M|| cos phi over the shared parameters.
    """
    from .objectives import batch_loss

    def losses(model):
        def fn(store):
            bl = batch_loss(model, batch, form, quad)
            return bl.L_T, bl.L_M
        return fn

    return one_step_comparison(shared.store, losses(shared), duplicated.store, losses(duplicated),
                               lr_grid, require_conflict)


def find_conflicting_batch(model, batches, form=None, quad=None):
    """First batch whose pooled shared-parameter cosine is negative."""
    from .objectives import batch_loss
    for batch in batches:
        snaps = capture_two_losses(model, batch_loss(model, batch, form, quad))
        if not snaps:
            break
        c = cos_angle(np.concatenate([s.g_T for s in snaps]), np.concatenate([s.g_M for s in snaps]))
        if c is not None and c < 0:
            return batch
    raise NoConflictFound("no conflicting batch among the candidates")
