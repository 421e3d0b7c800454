import numpy as np
import pytest

from tppsplit import trainer
from tppsplit.conflictscope import ConflictStats
from tppsplit.diffgraph import AdamState, adam_step, backward
from tppsplit.errors import EmptyDataset
from tppsplit.models import MTPPModel, balance_widths
from tppsplit.objectives import NLLBreakdown, batch_loss, nll
from tppsplit.trainer import (
    EarlyStopState,
    History,
    TaskStop,
    TrainConfig,
    balance_report,
    fit,
    make_batches,
    task_blocks,
    train_epoch,
)

from conftest import tiny_model


@pytest.fixture(scope="module")
def split(small_ds):
    return small_ds.subset(range(30)), small_ds.subset(range(30, 40))


def cfg(**kw):
    base = dict(max_epochs=4, patience=2, batch_size=8, seed=3, lr=1e-2)
    base.update(kw)
    return TrainConfig(**base)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(patience=10, max_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    d = TrainConfig().to_dict()
    assert (d["lr"], d["batch_size"], d["max_epochs"], d["patience"]) == (1e-3, 32, 500, 50)


def test_task_stop_trace():
    t = TaskStop()
    flags = [t.update(v, e, {"e": e}, 2) for e, v in enumerate([5.0, 6.0, 7.0], start=1)]
    assert flags == [False, False, True]
    assert t.best == 5.0 and t.best_epoch == 1 and t.best_state == {"e": 1}


def test_early_stop_kinds():
    assert EarlyStopState.for_model(tiny_model("thp", "plusplus")).dual
    assert EarlyStopState.for_model(tiny_model("thp", "dupdisjoint")).dual
    for s in ("base", "plus", "dup"):
        assert not EarlyStopState.for_model(tiny_model("thp", s)).dual


def test_dual_freeze_trace(monkeypatch, split):
    """Validation L_T keeps improving while L_M worsens from epoch 1: marks freeze at epoch 3."""
    vals = iter([(3.0, 1.0), (2.0, 1.5), (1.0, 2.0), (0.5, 2.5), (0.4, 3.0)])

    def scripted(*a, **k):
        lt, lm = next(vals)
        return NLLBreakdown(lt, lm, lt + lm)

    monkeypatch.setattr(trainer, "nll", scripted)
    m = tiny_model("rmtpp", "plusplus")
    _, mark = task_blocks(m)
    seen = {}
    real_epoch = trainer.train_epoch

    def spy(model, batches, c, opt, stats, frozen, step):
        seen[len(seen) + 1] = set(frozen)
        return real_epoch(model, batches, c, opt, stats, frozen, step)

    monkeypatch.setattr(trainer, "train_epoch", spy)
    _, hist, _ = fit(m, *split, cfg(max_epochs=5))
    assert hist.column("frozen_M") == [False, False, True, True, True]
    assert not any(hist.column("frozen_T"))
    assert seen[4] == set(mark) and seen[3] == set()
    assert m.early_stop.tasks["M"].best_epoch == 1


def test_lr_zero_keeps_parameters(split):
    m = tiny_model("lnm", "plus")
    before = m.store.snapshot()
    _, hist, _ = fit(m, *split, cfg(lr=0.0, max_epochs=3))
    for name, v in before.items():
        np.testing.assert_array_equal(m.store[name].values, v)
    assert len(set(hist.column("val_LT"))) == 1 and len(set(hist.column("val_LM"))) == 1


def _run(family, setting, split, **kw):
    m = tiny_model(family, setting)
    _, hist, stats = fit(m, *split, cfg(**kw))
    return m, hist, stats


def test_determinism(split):
    a, ha, sa = _run("thp", "base", split)
    b, hb, sb = _run("thp", "base", split)
    assert ha.rows == hb.rows
    assert [(r.group, r.cos) for r in sa.records] == [(r.group, r.cos) for r in sb.records]
    for name in a.store.names():
        np.testing.assert_array_equal(a.store[name].values, b.store[name].values)


def test_capture_does_not_change_trajectory(split):
    _, on, stats_on = _run("fnn", "plus", split, capture=True)
    _, off, stats_off = _run("fnn", "plus", split, capture=False)
    assert on.rows == off.rows
    assert len(stats_on) > 0 and len(stats_off) == 0


def test_split_gradient_is_combined_gradient(pair_batch):
    m = tiny_model("sahp", "base", seed=4)
    loss = batch_loss(m, pair_batch)
    trainer.capture_two_losses(m, loss)
    split_g = {b.name: b.grad.copy() for b in m.store}
    backward(batch_loss(m, pair_batch).total, m.store)
    for b in m.store:
        np.testing.assert_allclose(split_g[b.name], b.grad, rtol=1e-10, atol=1e-14)


def test_one_batch_snapshot_count(small_ds):
    m = tiny_model("thp", "base")
    stats = ConflictStats()
    batches = make_batches(small_ds.subset(range(4)), 4)
    train_epoch(m, batches, cfg(), AdamState(), stats)
    blocks = [g for g in stats.groups() if not g.startswith("pooled:")]
    assert len(blocks) == len(m.shared_blocks()) == len(m.store.names({"shared"}))


def test_frozen_blocks_not_updated(small_ds):
    m = tiny_model("rmtpp", "plusplus")
    time_blocks, _ = task_blocks(m)
    before = m.store.snapshot()
    batches = make_batches(small_ds.subset(range(8)), 4)
    train_epoch(m, batches, cfg(), AdamState(), None, frozen=set(time_blocks))
    for name, v in before.items():
        moved = not np.array_equal(m.store[name].values, v)
        assert moved == (name not in time_blocks), name


def test_freeze_matches_excluding_blocks(split):
    """Freezing the time task leaves the mark trajectory equal to a run that never trained time blocks."""
    train, _ = split
    batches = make_batches(train, 8, np.random.default_rng(0))
    a = tiny_model("thp", "plusplus")
    b = tiny_model("thp", "plusplus")
    tb, mb = task_blocks(a)
    train_epoch(a, batches, cfg(), AdamState(), None, frozen=set(tb))
    # b: only mark blocks exist in the optimizer's eyes
    sb = AdamState()
    for batch in batches:
        loss = batch_loss(b, batch)
        backward(loss.L_M, b.store)
        adam_step(b.store, 1e-2, state=sb, frozen=set(tb))
    for name in mb:
        np.testing.assert_allclose(a.store[name].values, b.store[name].values, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("family,setting", [("thp", "base"), ("rmtpp", "plusplus")])
def test_restored_state_matches_recorded_minima(family, setting, split):
    m, hist, _ = _run(family, setting, split, max_epochs=6, patience=2)
    v = nll(m, split[1], None, TrainConfig().quad, TrainConfig().eval_batch_size)
    tasks = m.early_stop.tasks
    if "total" in tasks:
        assert v.total == tasks["total"].best
        assert v.total == min(a + b for a, b in zip(hist.column("val_LT"), hist.column("val_LM")))
    else:
        assert v.L_T == tasks["T"].best == min(hist.column("val_LT"))
        assert v.L_M == tasks["M"].best == min(hist.column("val_LM"))


def test_empty_datasets_rejected(small_ds):
    with pytest.raises(EmptyDataset):
        fit(tiny_model("thp", "base"), small_ds.subset([]), small_ds, cfg())


def test_history_csv(tmp_path):
    h = History()
    h.append(epoch=1, train_LT=0.1, train_LM=0.2, val_LT=0.3, val_LM=0.4, frozen_T=False, frozen_M=True)
    p = tmp_path / "h.csv"
    h.write_csv(p, "hdr")
    lines = p.read_text().splitlines()
    assert lines[0] == "# hdr"
    assert lines[1] == "epoch,train_LT,train_LM,val_LT,val_LM,frozen_T,frozen_M"
    assert lines[2] == "1,0.1,0.2,0.3,0.4,0,1"


def test_balance_report():
    a = tiny_model("thp", "base", d_h=16)
    target = a.param_split()["total"]
    b = MTPPModel(balance_widths(tiny_model("thp", "plusplus").spec, target, hi=40))
    c = tiny_model("thp", "base", d_h=32)
    rows = balance_report([a, b, c])
    assert not rows[1]["flagged"] and rows[2]["flagged"]
    for r in rows:
        assert r["encoder_frac"] + r["decoder_frac"] == pytest.approx(1.0, abs=1e-12)
