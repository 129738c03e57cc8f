"""Full-batch joint training: masked MAE per task, balanced sum, L0 penalty, AdamW."""
from __future__ import annotations

import copy
import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .balancing import EMAState, ema_update, ema_weights, make_balancer  # noqa: F401
from .sharpnet import DTYPE, ModelInputs, SharpQoS

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_beta: float = 0.99
    ema_eps: float = 1e-8
    l0_lambda: float = 1e-5
    patience: int = 400
    balancing: str = "ema"
    seed: int = 0
    strict: bool = False
    log_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)


def task_loss(pred, target, mask):
    """Mean absolute error over the masked entries."""
    if not bool(mask.any()):
        raise ValueError("loss mask is empty")
    return (pred[mask] - target[mask]).abs().mean()


def total_loss(losses, weights, l0_terms, lam):
    """Weighted task losses plus ``lam`` times the summed expected-L0 terms."""
    return sum(w * l for w, l in zip(weights, losses)) + lam * sum(l0_terms)


class EarlyStopping:
    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, value, epoch):
        """Record a monitored value; return True once patience is exhausted."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainState:
    epoch: int = 0
    seed: int = 0
    stopper: EarlyStopping = None
    stop_reason: str = "max_epochs"
    history: list = field(default_factory=list)


@contextmanager
def strict_determinism(enabled=True):
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    prev = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.set_num_threads(threads)


def _targets(ds, masks):
    values = [torch.as_tensor(v, dtype=DTYPE) for v in ds.values]
    return values, [torch.as_tensor(m) for m in masks]


def _make_optimizer(model, balancer, cfg):
    skip = model.no_decay_names()
    decay = [p for n, p in model.named_parameters() if n not in skip]
    no_decay = [p for n, p in model.named_parameters() if n in skip] + list(balancer.parameters())
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


def train(ds, splits, inputs: ModelInputs, model_cfg, cfg: TrainConfig, model=None):
    """Train a model and return it (restored to its best validation epoch) with the history.

    ``splits`` is the ``(train, val, test)`` mask triple; test masks are not read.
    """
    train_mask, val_mask, _ = splits
    with strict_determinism(cfg.strict):
        return _train(ds, train_mask, val_mask, inputs, model_cfg, cfg, model)


def _train(ds, train_mask, val_mask, inputs, model_cfg, cfg, model):
    P = ds.P
    model = model or SharpQoS(model_cfg, P, seed=cfg.seed)
    balancer = make_balancer(cfg.balancing, P, cfg.ema_beta, cfg.ema_eps)
    opt = _make_optimizer(model, balancer, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    targets, train_t = _targets(ds, train_mask)
    _, val_t = _targets(ds, val_mask)
    use_val = all(bool(m.any()) for m in val_t)
    monitor_masks = val_t if use_val else train_t
    if not use_val:
        log.warning("validation mask empty for some task; monitoring training loss instead")

    state = TrainState(seed=cfg.seed, stopper=EarlyStopping(cfg.patience))
    best_params = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        out = model(inputs, mode="train", gen=gen)
        losses = [task_loss(out.pred[p], targets[p], train_t[p]) for p in range(P)]
        detached = [float(l.detach()) for l in losses]
        if not all(math.isfinite(l) for l in detached):
            state.stop_reason = "non_finite_loss"
            log.error("non-finite training loss %s at epoch %d; restoring best checkpoint", detached, epoch)
            break
        weights = balancer.step(detached)
        objective = balancer.combine(losses) + cfg.l0_lambda * (out.l0_snr + out.l0_cross)

        opt.zero_grad()
        objective.backward()
        opt.step()

        with torch.no_grad():
            ev = model(inputs, mode="infer")
            val_losses = [float(task_loss(ev.pred[p], targets[p], monitor_masks[p])) for p in range(P)]
        monitor = float(sum(w * l for w, l in zip(weights, val_losses)))
        state.history.append({
            "epoch": epoch, "train_mae": detached, "val_loss": monitor, "val_mae": val_losses,
            "weights": list(weights), "l0_snr": float(out.l0_snr.detach()), "l0_cross": float(out.l0_cross.detach()),
        })
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d train %s val %.6g", epoch, ["%.4g" % l for l in detached], monitor)
        if not math.isfinite(monitor):
            state.stop_reason = "non_finite_loss"
            log.error("non-finite validation loss at epoch %d; restoring best checkpoint", epoch)
            break
        improved_before = state.stopper.best_epoch
        if state.stopper.update(monitor, epoch):
            state.stop_reason = "patience"
            break
        if state.stopper.best_epoch != improved_before:
            best_params = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_params)
    return model, state


HISTORY_FIELDS = ("epoch", "val_loss", "l0_snr", "l0_cross")


def write_history(history, path, task_names):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *[f"train_mae_{t}" for t in task_names], "val_loss",
                    *[f"w_{t}" for t in task_names], "expected_L0_snr", "expected_L0_cross"])
        for row in history:
            w.writerow([row["epoch"], *map(repr, row["train_mae"]), repr(row["val_loss"]),
                        *map(repr, row["weights"]), repr(row["l0_snr"]), repr(row["l0_cross"])])


def predict_matrices(model, inputs):
    with torch.no_grad():
        return [p.numpy().copy() for p in model(inputs, mode="infer").pred]


def per_service_mean(ds, train_mask):
    """Baseline: each service's mean training value (global mean when unseen)."""
    preds = []
    for v, mask in zip(ds.values, train_mask):
        counts = mask.sum(axis=0)
        sums = np.where(mask, v, 0.0).sum(axis=0)
        glob = v[mask].mean() if mask.any() else 0.0
        col = np.where(counts > 0, sums / np.maximum(counts, 1), glob)
        preds.append(np.broadcast_to(col, v.shape).copy())
    return preds
