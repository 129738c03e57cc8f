"""Task-loss weighting policies.

``ema`` is the production policy; ``equal``, ``dwa`` and ``huw`` exist for
ablations.  Every policy exposes the same three calls: ``step`` (feed the
detached per-task losses of the current epoch, get the weights to use),
``combine`` (weighted scalar objective) and ``parameters`` (extra trainable
tensors, only non-empty for ``huw``).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

BALANCING_MODES = ("equal", "dwa", "huw", "ema")


@dataclass(frozen=True)
class EMAState:
    smoothed: tuple
    weights: tuple
    beta: float = 0.99
    eps: float = 1e-8

    @classmethod
    def initial(cls, tasks, beta=0.99, eps=1e-8):
        smoothed = (1.0,) * tasks
        return cls(smoothed, ema_weights(smoothed, eps), beta, eps)


def ema_weights(smoothed, eps=1e-8):
    inv = 1.0 / (np.asarray(smoothed, dtype=np.float64) + eps)
    return tuple((inv / inv.sum()).tolist())


def ema_update(state, losses):
    losses = np.asarray(losses, dtype=np.float64)
    if not np.isfinite(losses).all() or (losses < 0).any():
        raise ValueError(f"losses must be finite and non-negative, got {losses}")
    smoothed = state.beta * np.asarray(state.smoothed) + (1 - state.beta) * losses
    smoothed = tuple(smoothed.tolist())
    return replace(state, smoothed=smoothed, weights=ema_weights(smoothed, state.eps))


def _weighted(losses, weights):
    return sum(float(w) * l for w, l in zip(weights, losses))


class EqualWeighting:
    name = "equal"

    def __init__(self, tasks):
        self.weights = (1.0 / tasks,) * tasks

    def step(self, losses):
        return self.weights

    def combine(self, losses):
        return _weighted(losses, self.weights)

    def parameters(self):
        return []


class EMAWeighting:
    """Inverse smoothed-loss weights; weights are constants for backprop."""

    name = "ema"

    def __init__(self, tasks, beta=0.99, eps=1e-8):
        self.state = EMAState.initial(tasks, beta, eps)

    @property
    def weights(self):
        return self.state.weights

    def step(self, losses):
        self.state = ema_update(self.state, losses)
        return self.state.weights

    def combine(self, losses):
        return _weighted(losses, self.state.weights)

    def parameters(self):
        return []


class DWAWeighting:
    """Dynamic weight averaging: w_p = P softmax(r_p / T), r_p = L_p(t-1) / L_p(t-2)."""

    name = "dwa"

    def __init__(self, tasks, temperature=2.0):
        self.tasks = tasks
        self.temperature = temperature
        self.history = []
        self.weights = (1.0,) * tasks

    def step(self, losses):
        if len(self.history) >= 2:
            ratio = np.asarray(self.history[-1]) / np.maximum(np.asarray(self.history[-2]), 1e-12)
            e = np.exp(ratio / self.temperature)
            self.weights = tuple((self.tasks * e / e.sum()).tolist())
        self.history.append(tuple(float(l) for l in losses))
        return self.weights

    def combine(self, losses):
        return _weighted(losses, self.weights)

    def parameters(self):
        return []


class HUWeighting:
    """Homoscedastic uncertainty weighting with a learnable log-variance per task."""

    name = "huw"

    def __init__(self, tasks):
        self.log_var = torch.nn.Parameter(torch.zeros(tasks, dtype=torch.float64))

    @property
    def weights(self):
        with torch.no_grad():
            return tuple((0.5 * torch.exp(-self.log_var)).tolist())

    def step(self, losses):
        return self.weights

    def combine(self, losses):
        s = self.log_var
        return sum(0.5 * torch.exp(-s[p]) * l + 0.5 * s[p] for p, l in enumerate(losses))

    def parameters(self):
        return [self.log_var]


def make_balancer(mode, tasks, ema_beta=0.99, ema_eps=1e-8, dwa_temperature=2.0):
    if mode == "equal":
        return EqualWeighting(tasks)
    if mode == "ema":
        return EMAWeighting(tasks, ema_beta, ema_eps)
    if mode == "dwa":
        return DWAWeighting(tasks, dwa_temperature)
    if mode == "huw":
        return HUWeighting(tasks)
    raise ValueError(f"unknown balancing mode {mode!r}; choose from {BALANCING_MODES}")
