"""Experiment pipeline: preprocess, features, train, evaluate, report.

Each stage reads its inputs from and writes its artifacts to one output
directory, so stages can be run separately from the command line or
chained by :func:`run_experiment`.  All stored numbers are exact 64-bit
values, which makes a staged run identical to a one-shot run.

Layout of the output directory::

    data/            normalized dataset archive
    splits.npz       train/val/test masks (after cold-start and outlier variants)
    features/        features_<source>.bin + features_meta.json
    graphs/          edges_<name>.csv (written on request)
    model.ckpt/      meta.json + params.bin
    history.csv      per-epoch training log
    gates/           gates_<task>.csv
    report.json      metrics, intervals, metadata
    summary.md       the report as a table
    timing.json      wall-clock seconds per stage
"""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import featinit, graphs, hyperball, metrics, qosdata, sharpnet, trainloop
from .config import ExperimentConfig

log = logging.getLogger(__name__)

STAGES = ("preprocess", "features", "train", "eval")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


def _out(cfg, out_dir=None):
    return Path(out_dir) if out_dir is not None else Path(cfg.output)


def _record_timing(out, stage, seconds):
    path = out / "timing.json"
    timing = json.loads(path.read_text()) if path.exists() else {}
    timing[stage] = seconds
    path.write_text(json.dumps(timing, indent=2))


@contextmanager
def _stage(name, out):
    """Time a stage and turn any failure into a StageError plus an incomplete marker."""
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        (out / "report.json").write_text(json.dumps(
            {"status": "incomplete", "failed_stage": name, "error": f"{type(exc).__name__}: {exc}"},
            indent=2))
        raise StageError(name, exc) from exc
    _record_timing(out, name, time.perf_counter() - start)


# ------------------------------------------------------------------ preprocess

def load_source(cfg: ExperimentConfig):
    d = cfg.data
    sources = [bool(d.archive), bool(d.wsdream), bool(d.matrices)]
    if sum(sources) != 1:
        raise ValueError("[data] needs exactly one of archive, wsdream, or matrices+context")
    if d.archive:
        ds = qosdata.load_archive(cfg.resolve(d.archive))
    elif d.wsdream:
        ds = qosdata.load_wsdream(cfg.resolve(d.wsdream))
    else:
        if not d.context:
            raise ValueError("[data] matrices need a context file")
        names = d.tasks or [f"t{p}" for p in range(len(d.matrices))]
        ds = qosdata.load_dataset([cfg.resolve(p) for p in d.matrices], cfg.resolve(d.context), names)
    return subsample(ds, d.users, d.services, d.subsample_seed)


def subsample(ds, users, services, seed):
    """Uniformly chosen ``users`` x ``services`` submatrix (0 keeps everything)."""
    if users > ds.n or services > ds.m:
        raise ValueError(f"cannot subsample {users}x{services} from {ds.n}x{ds.m}")
    if not users and not services:
        return ds
    rng = np.random.default_rng(seed)
    u = np.sort(rng.choice(ds.n, users, replace=False)) if users else np.arange(ds.n)
    s = np.sort(rng.choice(ds.m, services, replace=False)) if services else np.arange(ds.m)
    return ds.subsample(u, s)


def make_splits(ds, cfg: ExperimentConfig):
    """Train/val/test masks with the configured cold-start and outlier variants applied."""
    sc = cfg.split
    train, val, test = qosdata.split(ds, qosdata.SplitSpec(sc.td, sc.seed, sc.val_fraction))
    cold = None
    if sc.cold_start:
        cold = qosdata.ColdStartSpec.parse(sc.cold_start, seed=sc.seed)
        # validation entries are training data held back, so cold entities lose them too
        train = qosdata.make_cold_start(ds, train, cold)
        val = qosdata.make_cold_start(ds, val, cold)
    if sc.outlier_frac:
        test = qosdata.filter_outliers(ds, test, sc.outlier_frac, seed=sc.seed)
    return train, val, test, cold


def save_splits(path, train, val, test):
    arrays = {}
    for name, masks in (("train", train), ("val", val), ("test", test)):
        for p, mask in enumerate(masks):
            arrays[f"{name}_{p}"] = mask
    np.savez_compressed(path, **arrays)


def load_splits(path, P):
    with np.load(path) as z:
        return tuple([z[f"{name}_{p}"] for p in range(P)] for name in ("train", "val", "test"))


def preprocess(cfg, out_dir=None):
    out = _out(cfg, out_dir)
    with _stage("preprocess", out):
        ds = load_source(cfg)
        train, val, test, _ = make_splits(ds, cfg)
        qosdata.save_archive(ds, out / "data", seed=cfg.data.subsample_seed)
        save_splits(out / "splits.npz", train, val, test)
    return ds, (train, val, test)


def _load_prepared(out):
    ds = qosdata.load_archive(out / "data")
    return ds, load_splits(out / "splits.npz", ds.P)


# ------------------------------------------------------------------ features

def features(cfg, out_dir=None):
    out = _out(cfg, out_dir)
    with _stage("features", out):
        ds, (train, _, _) = _load_prepared(out)
        fc = cfg.features
        bank = featinit.build_features(ds, train, fc.d1, fc.d2, fc.nmf_iters, fc.ae_epochs, fc.seed)
        bank.save(out / "features", meta=asdict(fc))
    return bank


def build_inputs(ds, train, bank):
    gs = graphs.build_graph_set(ds, train)
    return gs, sharpnet.ModelInputs.build(gs, bank, ds.n)


# ------------------------------------------------------------------ train

def train(cfg, out_dir=None, dump_graphs=False):
    out = _out(cfg, out_dir)
    with _stage("train", out):
        ds, splits = _load_prepared(out)
        bank = featinit.FeatureBank.load(out / "features")
        gs, inputs = build_inputs(ds, splits[0], bank)
        if dump_graphs:
            gs.dump(out / "graphs")
        if bank.d1 != cfg.model.d or bank.d2 != cfg.model.d:
            raise ValueError(f"feature widths ({bank.d1}, {bank.d2}) must equal model width {cfg.model.d}")
        model, state = trainloop.train(ds, splits, inputs, cfg.model, cfg.train)
        meta = {"seed": cfg.train.seed, "epochs_run": state.epoch, "best_epoch": state.stopper.best_epoch,
                "stop_reason": state.stop_reason, "task_names": ds.task_names,
                "final_weights": state.history[-1]["weights"] if state.history else None}
        sharpnet.save_checkpoint(model, out / "model.ckpt", meta)
        trainloop.write_history(state.history, out / "history.csv", ds.task_names)
        sharpnet.write_gate_dump(model, out / "gates", ds.task_names)
    return model, state


# ------------------------------------------------------------------ evaluate

def cold_mask(shape, cold):
    users, services = qosdata.cold_start_entities(shape[0], shape[1], cold)
    mask = np.zeros(shape, dtype=bool)
    mask[users, :] = True
    mask[:, services] = True
    return mask


def task_report(pred, truth, test, baseline, ec, cold=None):
    mae, rmse = metrics.metrics(pred, truth, test)
    entry = {"mae": mae, "rmse": rmse, "test_entries": int(test.sum())}
    errors = (pred - truth)[test]
    if errors.size >= ec.groups:
        ci = metrics.confidence_intervals(errors, ec.groups, tuple(ec.levels), seed=ec.ci_seed)
        entry["confidence"] = ci.as_dict()
    else:
        entry["confidence"] = None
    if baseline is not None:
        b_mae, b_rmse = metrics.metrics(baseline, truth, test)
        entry["baseline"] = {"name": "per_service_mean", "mae": b_mae, "rmse": b_rmse,
                             "improvement_mae": metrics.improvement(mae, b_mae) if b_mae else None,
                             "improvement_rmse": metrics.improvement(rmse, b_rmse) if b_rmse else None}
    if cold is not None:
        sub = test & cold_mask(truth.shape, cold)
        entry["cold_entities"] = None
        if sub.any():
            c_mae, c_rmse = metrics.metrics(pred, truth, sub)
            entry["cold_entities"] = {"mae": c_mae, "rmse": c_rmse, "test_entries": int(sub.sum())}
    return entry


def evaluate(cfg, out_dir=None):
    out = _out(cfg, out_dir)
    with _stage("eval", out):
        ds, splits = _load_prepared(out)
        train_mask, val_mask, test_mask = splits
        bank = featinit.FeatureBank.load(out / "features")
        gs, inputs = build_inputs(ds, train_mask, bank)
        model, info = sharpnet.load_checkpoint(out / "model.ckpt")
        preds = trainloop.predict_matrices(model, inputs)
        baseline = trainloop.per_service_mean(ds, train_mask) if cfg.eval.baseline else [None] * ds.P
        cold = qosdata.ColdStartSpec.parse(cfg.split.cold_start, cfg.split.seed) if cfg.split.cold_start else None
        tasks = {}
        for p, name in enumerate(ds.task_names):
            if not test_mask[p].any():
                raise ValueError(f"task {name!r} has no test entries")
            tasks[name] = task_report(preds[p], ds.values[p], test_mask[p], baseline[p], cfg.eval, cold)
        nnz = {name: adj.nnz for name, adj in gs.named()}
        report = {
            "status": "complete",
            "config_digest": cfg.digest(),
            "config": cfg.as_dict(),
            "seeds": {"subsample": cfg.data.subsample_seed, "split": cfg.split.seed,
                      "features": cfg.features.seed, "train": cfg.train.seed},
            "dataset": {"n": ds.n, "m": ds.m, "tasks": ds.task_names,
                        "observed": [ds.n_observed(p) for p in range(ds.P)],
                        "train": [int(m.sum()) for m in train_mask], "val": [int(m.sum()) for m in val_mask],
                        "test": [int(m.sum()) for m in test_mask]},
            "training": {k: info.get(k) for k in ("epochs_run", "best_epoch", "stop_reason", "final_weights")},
            "model": {"parameters": sharpnet.count_parameters(model),
                      "multiply_adds": sharpnet.multiply_adds(model.cfg, ds.n, ds.m, ds.P, nnz),
                      "active_gates": model.active_gates(),
                      "curvatures": curvatures(model)},
            "tasks": tasks,
        }
        write_report(report, out)
    return report


def curvatures(model):
    return {name.removesuffix(".raw"): float(mod().detach())
            for name, mod in model.named_modules() if isinstance(mod, hyperball.Curvature)}


# ------------------------------------------------------------------ report

def _fmt(x, digits=4):
    return "n/a" if x is None else f"{x:.{digits}f}"


def render_summary(report):
    lines = ["# Evaluation summary", ""]
    ds = report["dataset"]
    lines.append(f"Dataset {ds['n']} users x {ds['m']} services; config digest `{report['config_digest']}`.")
    tr = report.get("training", {})
    lines.append(f"Training ran {tr.get('epochs_run')} epochs (best {tr.get('best_epoch')}, "
                 f"stop: {tr.get('stop_reason')}).")
    lines += ["", "| task | MAE | RMSE | baseline MAE | baseline RMSE | I_MAE (%) | I_RMSE (%) | 95% CI |",
              "|---|---|---|---|---|---|---|---|"]
    for name, t in report["tasks"].items():
        b = t.get("baseline") or {}
        ci = (t.get("confidence") or {}).get("intervals", {}).get("95")
        ci_text = f"({ci[0]:.4f}, {ci[1]:.4f})" if ci else "n/a"
        lines.append(f"| {name} | {_fmt(t['mae'])} | {_fmt(t['rmse'])} | {_fmt(b.get('mae'))} | "
                     f"{_fmt(b.get('rmse'))} | {_fmt(b.get('improvement_mae'), 2)} | "
                     f"{_fmt(b.get('improvement_rmse'), 2)} | {ci_text} |")
    cold = {k: t["cold_entities"] for k, t in report["tasks"].items() if t.get("cold_entities")}
    if cold:
        lines += ["", "Cold-start entities only:", ""]
        lines += [f"- {k}: MAE {_fmt(v['mae'])}, RMSE {_fmt(v['rmse'])} over {v['test_entries']} entries"
                  for k, v in cold.items()]
    m = report["model"]
    lines += ["", f"Parameters: {m['parameters']}; multiply-adds per forward pass: {m['multiply_adds']}; "
                  f"active gates: {m['active_gates']}.", ""]
    return "\n".join(lines)


def write_report(report, out):
    out = Path(out)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "summary.md").write_text(render_summary(report))


def rerender(out):
    """Rebuild summary.md from an existing report.json."""
    out = Path(out)
    report = json.loads((out / "report.json").read_text())
    if report.get("status") != "complete":
        raise ValueError(f"{out}: report is {report.get('status')!r} (stage {report.get('failed_stage')})")
    (out / "summary.md").write_text(render_summary(report))
    return report


# ------------------------------------------------------------------ full run

def run_experiment(cfg: ExperimentConfig, out_dir=None, dump_graphs=False):
    """Run every stage in order and return the report dict."""
    out = _out(cfg, out_dir)
    with trainloop.strict_determinism(cfg.train.strict):
        preprocess(cfg, out)
        features(cfg, out)
        train(cfg, out, dump_graphs=dump_graphs)
        return evaluate(cfg, out)
