"""Poincare-ball primitives anchored at the origin.

Every function works on the last axis of a float64 tensor, so a row-stacked
node feature matrix is a batch of ball points.  Curvature ``c`` is a positive
scalar (tensor or float) or a column of per-row curvatures broadcasting
against the rows.

Per-row scalars (norms, clamp factors, Moebius denominators) are computed
on the (rows, 1) column and applied with a single full-width multiply.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_NORM = 1e-15
BALL_EPS = 1e-5
ARTANH_CLAMP = 1 - 1e-12
CURVATURE_EPS = 1e-5
CLIP_MARGIN = 1e-12


def curvature(raw, eps=CURVATURE_EPS):
    """Map an unconstrained raw value to ``softplus(raw) + eps``."""
    return F.softplus(raw) + eps


def raw_for_curvature(c, eps=CURVATURE_EPS):
    """Inverse of :func:`curvature`, for initialising raw parameters."""
    x = torch.as_tensor(c - eps, dtype=torch.float64)
    return x + torch.log(-torch.expm1(-x))


def _as_c(c, like):
    return torch.as_tensor(c, dtype=like.dtype, device=like.device)


def _sqnorm(x):
    return (x * x).sum(dim=-1, keepdim=True)


def _norm(x):
    return _sqnorm(x).clamp_min(MIN_NORM ** 2).sqrt()


def _clip_factor(norm, c):
    # scale bringing a point of the given norm inside radius (1 - 1e-5) / sqrt(c)
    # clipped points land a hair inside the trigger radius, so re-projection leaves them untouched
    maxnorm = (1 - BALL_EPS) / c.sqrt()
    return torch.where(norm > maxnorm, maxnorm * (1 - CLIP_MARGIN) / norm, torch.ones_like(norm))


def project(x, c):
    c = _as_c(c, x)
    return x * _clip_factor(_norm(x), c)


def artanh(x):
    x = x.clamp(-ARTANH_CLAMP, ARTANH_CLAMP)
    return 0.5 * (torch.log1p(x) - torch.log1p(-x))


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} received non-finite input")


def exp0(v, c, check=True):
    """tanh(sqrt(c)|v|) v / (sqrt(c)|v|), clamped inside the ball."""
    if check:
        _check_finite(v, "exp0")
    c = _as_c(c, v)
    sqrt_c = c.sqrt()
    norm = _norm(v)
    out_norm = torch.tanh(sqrt_c * norm) / sqrt_c
    return v * (out_norm / norm * _clip_factor(out_norm, c))


def log0(x, c, check=True):
    """artanh(sqrt(c)|x|) x / (sqrt(c)|x|) after clamping x inside the ball."""
    if check:
        _check_finite(x, "log0")
    c = _as_c(c, x)
    sqrt_c = c.sqrt()
    norm = _norm(x)
    clip = _clip_factor(norm, c)
    scaled = sqrt_c * norm * clip
    return x * (artanh(scaled) / scaled * clip)


def mobius_add(x, y, c):
    c = _as_c(c, x)
    xy = (x * y).sum(dim=-1, keepdim=True)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    a = 1 + 2 * c * xy + c * y2
    b = 1 - c * x2
    denom = (1 + 2 * c * xy + c ** 2 * x2 * y2).clamp_min(MIN_NORM)
    # |a x + b y|^2 expanded so the clamp needs no extra full-width pass
    out_sq = (a * a * x2 + 2 * a * b * xy + b * b * y2).clamp_min(MIN_NORM ** 2)
    scale = _clip_factor(out_sq.sqrt() / denom, c) / denom
    return x * (a * scale) + y * (b * scale)


def mobius_matvec(W, x, c, check=True):
    """``exp0(log0(x) @ W)`` for row-vector points; ``W`` has shape (d_in, d_out)."""
    if W.shape[0] != x.shape[-1]:
        raise ValueError(f"width mismatch: W is {tuple(W.shape)}, x has width {x.shape[-1]}")
    return exp0(log0(x, c, check) @ W, c, check)


def wrapped_activation(x, c, act=torch.relu, check=True):
    return exp0(act(log0(x, c, check)), c, check)


def conformal_factor(x, c):
    """lambda_x = 2 / (1 - c|x|^2).  Not used by the model; kept for diagnostics."""
    c = _as_c(c, x)
    return 2 / (1 - c * _sqnorm(x))


class Curvature(nn.Module):
    """Trainable curvature ``c = softplus(raw) + eps``, initialised so that c is ``init``."""

    def __init__(self, init=1.0, eps=CURVATURE_EPS):
        super().__init__()
        self.eps = eps
        self.raw = nn.Parameter(raw_for_curvature(init, eps).reshape(()))

    def forward(self):
        return curvature(self.raw, self.eps)
