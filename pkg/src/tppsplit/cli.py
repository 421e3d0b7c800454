"""Command line entry point: synth, train, eval, diagnose, compare.

A run is described by a TOML file::

    seed = 0

    [synth]                      # or [data] path = "events.jsonl"
    mu = [0.5, 0.3]
    alpha = [[0.6, 0.2], [0.3, 0.5]]
    beta = [[2.0, 1.0], [1.0, 3.0]]
    T = 10.0
    n_seq = 200

    [model]
    family = "rmtpp"
    setting = "base"

    [train]
    max_epochs = 20
    patience = 5

Unknown sections or keys are rejected.
"""
import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .conflictscope import (
    ConflictStats,
    corollary1_check,
    export_histograms,
    read_conflict_csv,
)
from .diffgraph import load_checkpoint, save_checkpoint
from .errors import ConfigError, MissingCheckpoint, MissingDiagnostics, TPPError
from .evalsuite import evaluate, write_report
from .eventstore import HawkesConfig, SplitSpec, load_dataset, save_dataset, simulate_hawkes, split_dataset
from .models import FAMILIES, SETTINGS, ModelSpec, MTPPModel, duplicate_from_shared
from .models.assembly import Batch
from .quadrature import QuadratureConfig
from .trainer import TrainConfig, balance_report, fit

CHECKPOINT = "checkpoint.json"
HISTORY = "history.csv"
CONFLICTS = "conflicts.csv"
RESOLVED = "config.json"
REPORT_DIR = "report"

_SCHEMA = {
    "": {"seed": int, "out": str},
    "data": {"path": str, "num_marks": int, "split": list},
    "synth": {"mu": list, "alpha": list, "beta": list, "T": float, "n_seq": int, "seed": int},
    "model": {f.name: None for f in fields(ModelSpec) if f.name != "num_marks"},
    "train": {"lr": float, "batch_size": int, "max_epochs": int, "patience": int, "capture": bool,
              "stride": int, "loss_scale": float, "form": str, "eval_batch_size": int},
    "quadrature": {"method": str, "nodes": int, "seed": int},
    "eval": {"enabled": bool, "tol": float, "batch_size": int},
}


def _check_keys(doc):
    for key, val in doc.items():
        if isinstance(val, dict):
            if key not in _SCHEMA or key == "":
                raise ConfigError(f"unknown section [{key}]")
            for sub, v in val.items():
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                want = _SCHEMA[key][sub]
                if want is float and isinstance(v, int) and not isinstance(v, bool):
                    val[sub] = float(v)
                elif want is not None and not isinstance(val[sub], want):
                    raise ConfigError(f"{key}.{sub} must be {want.__name__}, got {type(v).__name__}")
        elif key not in _SCHEMA[""]:
            raise ConfigError(f"unknown key {key}")


def load_config(path, overrides=None):
    """Parse and resolve a run config; relative data paths are taken from the config's folder."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    _check_keys(doc)
    base = os.path.dirname(os.path.abspath(path))
    if "data" in doc and "path" in doc["data"]:
        doc["data"]["path"] = os.path.normpath(os.path.join(base, doc["data"]["path"]))
    return resolve(doc, overrides)


def resolve(doc, overrides=None):
    doc = copy.deepcopy(doc)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "seed":
            doc["seed"] = int(val)
        else:
            doc.setdefault("model", {})[key] = val
    if "seed" not in doc:
        raise ConfigError("a seed is required (top-level `seed = N` or --seed)")
    if ("synth" in doc) == ("path" in doc.get("data", {})):
        raise ConfigError("give exactly one data source: [synth] or data.path")
    model = doc.setdefault("model", {})
    if model.get("family") not in FAMILIES:
        raise ConfigError(f"model.family must be one of {FAMILIES}")
    if model.setdefault("setting", "base") not in SETTINGS:
        raise ConfigError(f"model.setting must be one of {SETTINGS}")
    for sec in ("train", "quadrature", "eval", "data"):
        doc.setdefault(sec, {})
    return doc


def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def header_comment(doc):
    return f"tppsplit {__version__} config={config_hash(doc)}"


def hawkes_from(doc):
    s = doc["synth"]
    try:
        return HawkesConfig(s["mu"], s["alpha"], s["beta"], s.get("T", 10.0))
    except KeyError as e:
        raise ConfigError(f"synth.{e.args[0]} is required") from e


def load_data(doc):
    """(train, val, test) for a resolved config."""
    split = doc["data"].get("split", [0.6, 0.2, 0.2])
    if len(split) != 3:
        raise ConfigError("data.split needs three fractions")
    if "synth" in doc:
        s = doc["synth"]
        ds = simulate_hawkes(hawkes_from(doc), s.get("n_seq", 100), s.get("seed", doc["seed"]))
    else:
        ds = load_dataset(doc["data"]["path"], num_marks=doc["data"].get("num_marks"))
    return split_dataset(ds, SplitSpec(*split, seed=doc["seed"]))


def model_spec(doc, num_marks):
    return ModelSpec(num_marks=num_marks, **doc["model"])


def train_config(doc):
    quad = QuadratureConfig(**{"seed": doc["seed"], **doc["quadrature"]})
    return TrainConfig(seed=doc["seed"], quad=quad, **doc["train"])


# ---------------------------------------------------------------- commands


def cmd_synth(doc, out):
    os.makedirs(out, exist_ok=True)
    s = doc.get("synth")
    if s is None:
        raise ConfigError("synth needs a [synth] section")
    seed = s.get("seed", doc["seed"])
    ds = simulate_hawkes(hawkes_from(doc), s.get("n_seq", 100), seed)
    path = os.path.join(out, "sequences.jsonl")
    save_dataset(ds, path)
    with open(os.path.join(out, "provenance.json"), "w") as fh:
        json.dump({"version": __version__, "seed": seed, "config": doc, "n_events": ds.n_events},
                  fh, indent=2, sort_keys=True)
    return path


def _write_conflicts(stats, path, comment):
    if len(stats):
        export_histograms(stats, path, comment)
        return
    with open(path, "w") as fh:
        fh.write(f"# {comment}\n")
        fh.write("kind,block,bin_lo,bin_hi,count,CG,mean_GMS,mean_TPI,steps\n")


def cmd_train(doc, out):
    train, val, test = load_data(doc)
    spec = model_spec(doc, train.num_marks)
    cfg = train_config(doc)
    model = MTPPModel(spec, seed=doc["seed"])
    fit(model, train, val, cfg)
    os.makedirs(out, exist_ok=True)
    comment = header_comment(doc)
    with open(os.path.join(out, RESOLVED), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    save_checkpoint(model.store, os.path.join(out, CHECKPOINT),
                    {"spec": spec.to_dict(), "seed": doc["seed"], "config_hash": config_hash(doc)})
    model.history.write_csv(os.path.join(out, HISTORY), comment)
    _write_conflicts(model.conflicts, os.path.join(out, CONFLICTS), comment)
    if doc["eval"].get("enabled", True):
        _eval_into(model, test, doc, os.path.join(out, REPORT_DIR))
    return model


def _eval_into(model, test, doc, out):
    rep = evaluate(model, test, train_config(doc).quad, doc["eval"].get("batch_size", 256),
                   doc["eval"].get("tol", 1e-6))
    write_report(rep, out, header_comment(doc))
    return rep


def load_run(run_dir):
    ck = os.path.join(run_dir, CHECKPOINT)
    if not os.path.exists(ck):
        raise MissingCheckpoint(f"no {CHECKPOINT} in {run_dir}")
    with open(os.path.join(run_dir, RESOLVED)) as fh:
        doc = json.load(fh)
    store, meta = load_checkpoint(ck)
    model = MTPPModel(ModelSpec.from_dict(meta["spec"]), seed=meta["seed"])
    for b in store:
        model.store.set(b.name, b.values)
    return model, doc


def cmd_eval(run_dir, data=None, out=None):
    model, doc = load_run(run_dir)
    if data is None:
        _, _, test = load_data(doc)
    else:
        test = load_dataset(data, num_marks=model.num_marks)
    test.validate(model.num_marks)
    return _eval_into(model, test, doc, out or os.path.join(run_dir, REPORT_DIR))


def cmd_diagnose(run_dir, stream=None):
    stream = stream or sys.stdout
    path = os.path.join(run_dir, CONFLICTS)
    if not os.path.exists(path):
        raise MissingDiagnostics(f"no {CONFLICTS} in {run_dir}")
    hist, summ = read_conflict_csv(path)
    if not summ:
        print("no shared blocks: the time and mark losses never share a parameter", file=stream)
        return []
    print(f"{'block':<32} {'CG':>8} {'mean_GMS':>9} {'mean_TPI':>9} {'steps':>6}", file=stream)
    for r in summ:
        print(f"{r['block']:<32} {_num(r['CG']):>8} {_num(r['mean_GMS']):>9} {_num(r['mean_TPI']):>9} "
              f"{r['steps']:>6}", file=stream)
    pooled = [r for r in hist if r["block"] == "pooled"]
    if pooled:
        print("\ncos histogram (all shared blocks)", file=stream)
        for r in pooled:
            if int(r["count"]):
                print(f"  [{r['bin_lo']:>6}, {r['bin_hi']:>6})  {r['count']}", file=stream)
    return summ


def _num(s):
    return f"{float(s):.4f}" if s else "-"


def _one_step_delta(doc_a, doc_b):
    """Loss gap after one SGD step between a shared model and its duplicated copy, if they pair up."""
    train, _, _ = load_data(doc_a)
    shared = MTPPModel(model_spec(doc_a, train.num_marks), seed=doc_a["seed"])
    try:
        dup = duplicate_from_shared(shared, doc_b["model"]["setting"])
        if dup.store.names() == shared.store.names():
            return None
        for name in dup.store.names():
            tail = name.split(".", 1)[1] if name.startswith(("time.", "mark.")) else name
            if tail not in shared.store and name not in shared.store:
                return None
    except (TPPError, ValueError, KeyError):
        return None
    bs = doc_a["train"].get("batch_size", 32)
    batch = Batch.from_sequences(train.sequences[:bs])
    rep = corollary1_check(shared, dup, batch, lr_grid=(1e-4,), require_conflict=False)
    return rep["rows"][0]["delta"]


def cmd_compare(doc_a, doc_b, out):
    os.makedirs(out, exist_ok=True)
    rows = []
    models = []
    for tag, doc in (("A", doc_a), ("B", doc_b)):
        model = cmd_train(doc, os.path.join(out, tag))
        models.append(model)
        rep = _read_metrics(os.path.join(out, tag, REPORT_DIR))
        s = model.conflicts.summary("pooled:all") if "pooled:all" in model.conflicts.groups() else {}
        rows.append({"run": tag, "family": doc["model"]["family"], "setting": doc["model"]["setting"],
                     "params": model.param_split()["total"],
                     "test_LT": rep.get("L_T", ""), "test_LM": rep.get("L_M", ""),
                     "CG": s.get("CG", ""), "mean_GMS": s.get("mean_GMS", ""), "mean_TPI": s.get("mean_TPI", ""),
                     "delta_one_step": ""})
    delta = _one_step_delta(doc_a, doc_b)
    if delta is not None:
        rows[1]["delta_one_step"] = delta
    path = os.path.join(out, "compare.csv")
    cols = list(rows[0])
    with open(path, "w") as fh:
        fh.write(f"# tppsplit {__version__} configs={config_hash(doc_a)},{config_hash(doc_b)}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_cell(r[c]) for c in cols) + "\n")
    return rows, balance_report(models)


def _cell(v):
    if isinstance(v, float):
        return "" if v != v else repr(v)
    return str(v)


def _read_metrics(report_dir):
    path = os.path.join(report_dir, "metrics.csv")
    if not os.path.exists(path):
        return {}
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("metric,"):
                continue
            k, v = line.strip().split(",")
            out[k] = float(v)
    return out


# ---------------------------------------------------------------- argparse


def build_parser():
    ap = argparse.ArgumentParser(prog="tppsplit", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--setting", choices=SETTINGS)
        p.add_argument("--decoder", choices=FAMILIES)

    common(sub.add_parser("synth", help="simulate a Hawkes dataset"))
    common(sub.add_parser("train", help="train one model"))
    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("run_dir")
    p.add_argument("--data", help="test sequences (default: the run's own test split)")
    p.add_argument("--out")
    p = sub.add_parser("diagnose", help="summarise gradient conflicts of a run")
    p.add_argument("run_dir")
    p = sub.add_parser("compare", help="train two configs and tabulate them")
    common(p)
    p.add_argument("--config-b", required=True, help="second TOML run config")
    return ap


def _out(args, doc, default):
    return args.out or doc.get("out") or default


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("synth", "train", "compare"):
            over = {"seed": args.seed, "setting": args.setting, "family": args.decoder}
            doc = load_config(args.config, over)
            if args.command == "synth":
                print(cmd_synth(doc, _out(args, doc, "data")))
            elif args.command == "train":
                out = _out(args, doc, "run")
                cmd_train(doc, out)
                print(out)
            else:
                doc_b = load_config(args.config_b, over)
                rows, _ = cmd_compare(doc, doc_b, _out(args, doc, "compare"))
                for r in rows:
                    print(r)
        elif args.command == "eval":
            rep = cmd_eval(args.run_dir, args.data, args.out)
            for k, v in rep["metrics"].items():
                print(f"{k}\t{v}")
        else:
            cmd_diagnose(args.run_dir)
    except TPPError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
