"""Mini-batch Adam training with single or dual (per-task) early stopping."""
import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .conflictscope import ConflictStats, capture_two_losses, record_snapshots
from .diffgraph import AdamState, adam_step, param_count
from .errors import EmptyDataset, TPPError
from .models.assembly import Batch
from .objectives import batch_loss, nll
from .quadrature import QuadratureConfig

HISTORY_COLUMNS = ("epoch", "train_LT", "train_LM", "val_LT", "val_LM", "frozen_T", "frozen_M")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    capture: bool = True
    stride: int = 1
    loss_scale: float = 1.0
    form: str = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")

    def to_dict(self):
        d = asdict(self)
        d["quad"] = self.quad.to_dict()
        return d


@dataclass
class TaskStop:
    best: float = float("inf")
    best_epoch: int = 0
    best_state: dict = None
    stale: int = 0
    frozen: bool = False

    def update(self, value, epoch, state, patience):
        """Record a validation value; returns True when the task becomes frozen."""
        if value < self.best:
            self.best, self.best_epoch, self.best_state, self.stale = value, epoch, state, 0
            return False
        self.stale += 1
        if self.stale >= patience:
            self.frozen = True
        return self.frozen


@dataclass
class EarlyStopState:
    """One criterion ("total") for shared settings, or one per task ("T", "M")."""
    tasks: dict

    @classmethod
    def for_model(cls, model):
        if model.spec.disjoint_encoders:
            return cls({"T": TaskStop(), "M": TaskStop()})
        return cls({"total": TaskStop()})

    @property
    def dual(self):
        return "T" in self.tasks

    @property
    def done(self):
        return all(t.frozen for t in self.tasks.values())

    def frozen_flags(self):
        if self.dual:
            return self.tasks["T"].frozen, self.tasks["M"].frozen
        f = self.tasks["total"].frozen
        return f, f


def task_blocks(model):
    """Block names owned by the time task and by the mark task (shared goes to both)."""
    store = model.store
    return store.names({"time", "shared"}), store.names({"mark", "shared"})


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:5]]
                           + [int(r["frozen_T"]), int(r["frozen_M"])])


def make_batches(dataset, batch_size, rng=None):
    idx = np.arange(len(dataset))
    if rng is not None:
        idx = rng.permutation(idx)
    seqs = dataset.sequences
    return [Batch.from_sequences([seqs[i] for i in idx[a:a + batch_size]])
            for a in range(0, len(idx), batch_size)]


def train_epoch(model, batches, cfg, opt_state, stats=None, frozen=(), step0=0):
    """One pass over ``batches``; returns (mean train L_T, mean train L_M, steps taken).

    The time and mark losses are always backpropagated separately and summed,
    so the update is identical whether or not conflict records are kept.
    """
    sum_T = sum_M = 0.0
    step = step0
    for batch in batches:
        loss = batch_loss(model, batch, cfg.form, cfg.quad)
        if cfg.loss_scale != 1.0:
            loss.L_T = loss.L_T * (1.0 / cfg.loss_scale)
        try:
            snaps = capture_two_losses(model, loss, step)
        except TPPError as e:
            raise type(e)(f"{e} (step {step})") from e
        if stats is not None and cfg.capture and step % cfg.stride == 0 and snaps:
            stats.extend(record_snapshots(snaps, step))
        adam_step(model.store, cfg.lr, state=opt_state, frozen=frozen)
        sum_T += loss.L_T.item() * cfg.loss_scale
        sum_M += loss.L_M.item()
        step += 1
    n = max(len(batches), 1)
    return sum_T / n, sum_M / n, step


def fit(model, train, val, cfg):
    """Train in place; returns (store, history, conflict stats).

    Shared-encoder settings stop on total validation NLL.  Disjoint settings
    stop each task separately, freezing its blocks once it runs out of
    patience.  At the end each task's blocks are restored to their own best
    validation state.
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptyDataset("training and validation sets must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    stats = ConflictStats()
    history = History()
    stop = EarlyStopState.for_model(model)
    time_blocks, mark_blocks = task_blocks(model)
    frozen = set()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        batches = make_batches(train, cfg.batch_size, rng)
        try:
            tr_T, tr_M, step = train_epoch(model, batches, cfg, opt, stats, frozen, step)
        except TPPError as e:
            raise type(e)(f"{e} (epoch {epoch})") from e
        v = nll(model, val, cfg.form, cfg.quad, cfg.eval_batch_size)
        if stop.dual:
            t, m = stop.tasks["T"], stop.tasks["M"]
            if not t.frozen and t.update(v.L_T, epoch, model.store.snapshot(time_blocks), cfg.patience):
                frozen.update(time_blocks)
            if not m.frozen and m.update(v.L_M, epoch, model.store.snapshot(mark_blocks), cfg.patience):
                frozen.update(mark_blocks)
        else:
            stop.tasks["total"].update(v.total, epoch, model.store.snapshot(), cfg.patience)
        fT, fM = stop.frozen_flags()
        history.append(epoch=epoch, train_LT=tr_T, train_LM=tr_M, val_LT=v.L_T, val_LM=v.L_M,
                       frozen_T=fT, frozen_M=fM)
        if stop.done:
            break
    for task in stop.tasks.values():
        if task.best_state is not None:
            model.store.restore(task.best_state)
    model.early_stop = stop
    model.history = history
    model.conflicts = stats
    return model.store, history, stats


def balance_report(models, tolerance=0.10):
    """Parameter counts per model with encoder/decoder split; flags > tolerance from the first."""
    rows = []
    ref = None
    for m in models:
        split = m.param_split()
        total = split["total"]
        ref = total if ref is None else ref
        dev = abs(total - ref) / ref
        rows.append({"family": m.spec.family, "setting": m.spec.setting, "total": total,
                     "encoder": split["encoder"], "decoder": split["decoder"],
                     "encoder_frac": split["encoder"] / total, "decoder_frac": split["decoder"] / total,
                     "time": param_count(m.store, {"time"}), "mark": param_count(m.store, {"mark"}),
                     "shared": param_count(m.store, {"shared"}),
                     "deviation": dev, "flagged": dev > tolerance})
    return rows
