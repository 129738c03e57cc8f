"""The joint QoS network: hyperbolic graph encoders, sparse routing, gated fusion, heads.

Tensors are float64 throughout.  The model's parameters do not depend on the
number of users or services; graphs and initial features are passed to
:meth:`SharpQoS.forward` as a :class:`ModelInputs` bundle.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import hyperball as hb

log = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class ModelConfig:
    d: int = 128
    layers: int = 2
    k_snr: int = 4
    k_cross: int = 4
    d_snr: int = 64
    tau: float = 2 / 3
    gamma: float = 1.1
    beta_stretch: float = -0.1
    delta: float = 0.5
    head_widths: tuple = (128, 64)
    norm_eps: float = 1e-8
    curvature_init: float = 1.0

    def __post_init__(self):
        self.head_widths = tuple(self.head_widths)
        if not self.gamma > 1:
            raise ValueError("gamma must exceed 1")
        if not self.beta_stretch < 0:
            raise ValueError("beta_stretch must be negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        widths = (self.d, self.d_snr, self.k_snr, self.k_cross, *self.head_widths)
        if min(widths) < 1 or self.layers < 0:
            raise ValueError("all widths and block counts must be >= 1")


# ------------------------------------------------------------------ inputs

def to_torch_sparse(adj):
    coo = adj.matrix.tocoo()
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(coo.data.astype(np.float64)),
                                   coo.shape, dtype=DTYPE, check_invariants=False).coalesce()


@dataclass
class ModelInputs:
    n: int
    m: int
    qos_feats: list
    region_feats: torch.Tensor
    as_feats: torch.Tensor
    qos_adj: list
    hyper_user: list
    hyper_service: list
    region_adj: torch.Tensor
    as_adj: torch.Tensor
    _block_adj: torch.Tensor = field(default=None, repr=False)

    @property
    def P(self):
        return len(self.qos_feats)

    def stack_feats(self):
        """Row blocks in stack order: region, AS, then (bipartite, user, service) per task."""
        feats = [self.region_feats, self.as_feats]
        for f in self.qos_feats:
            feats.extend([f, f[:self.n], f[self.n:]])
        return feats

    def stack_adj(self):
        if self._block_adj is None:
            blocks = [self.region_adj, self.as_adj]
            for a, hu, hs in zip(self.qos_adj, self.hyper_user, self.hyper_service):
                blocks.extend([a, hu, hs])
            self._block_adj = block_diag_sparse(blocks)
        return self._block_adj

    @classmethod
    def build(cls, graphs, bank, n):
        t = lambda a: torch.as_tensor(np.asarray(a), dtype=DTYPE)
        N = bank.region_feats.shape[0]
        return cls(n=n, m=N - n,
                   qos_feats=[t(f) for f in bank.qos_feats],
                   region_feats=t(bank.region_feats), as_feats=t(bank.as_feats),
                   qos_adj=[to_torch_sparse(a) for a in graphs.qos],
                   hyper_user=[to_torch_sparse(a) for a in graphs.hyper_user],
                   hyper_service=[to_torch_sparse(a) for a in graphs.hyper_service],
                   region_adj=to_torch_sparse(graphs.region), as_adj=to_torch_sparse(graphs.as_graph))


def block_diag_sparse(blocks):
    idx, vals, offset = [], [], 0
    for b in blocks:
        b = b.to_dense().to_sparse() if b.layout == torch.strided else b.coalesce()
        idx.append(b.indices() + offset)
        vals.append(b.values())
        offset += b.shape[0]
    return torch.sparse_coo_tensor(torch.cat(idx, dim=1), torch.cat(vals), (offset, offset), check_invariants=False,
                                   dtype=DTYPE).coalesce()


def _spmm(adj, x):
    if adj.layout == torch.strided:
        return adj @ x
    return torch.sparse.mm(adj, x)


# ------------------------------------------------------------------ init

def _glorot(shape, gen):
    fan_in, fan_out = shape[-2], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


def _weight(gen, *shape):
    return nn.Parameter(_glorot(shape, gen))


def _zeros(*shape):
    return nn.Parameter(torch.zeros(shape, dtype=DTYPE))


# ------------------------------------------------------------------ hyperbolic encoders

class HyConvLayer(nn.Module):
    """Tangent-space aggregation followed by a Moebius linear step, both with wrapped ReLU."""

    def __init__(self, d, gen):
        super().__init__()
        self.W1 = _weight(gen, d, d)
        self.b1 = _zeros(d)
        self.W2 = _weight(gen, d, d)
        self.b2 = _zeros(d)


class HyConvStack(nn.Module):
    def __init__(self, d, layers, gen, curvature_init=1.0):
        super().__init__()
        self.curvature = hb.Curvature(curvature_init)
        self.layers = nn.ModuleList(HyConvLayer(d, gen) for _ in range(layers))

    def forward(self, feats, adj):
        """Euclidean (log0) view of the lifted input and of every layer's output."""
        return run_stacks([self], [feats], adj)[0]


def _segments(t, weights, sizes):
    if len(weights) == 1:
        return t @ weights[0]
    return torch.cat([seg @ w for seg, w in zip(t.split(sizes), weights)])


def _repeat_rows(t, sizes):
    return torch.repeat_interleave(t, torch.tensor(sizes), dim=0)


def run_stacks(stacks, feats, adj):
    """Evaluate several HyConv stacks at once.

    Rows of all inputs are concatenated; ``adj`` must be the block-diagonal
    adjacency in the same order, and each stack keeps its own curvature and
    weights.  Returns, per stack, the list of L+1 Euclidean layer outputs.
    """
    sizes = [f.shape[0] for f in feats]
    single = len(stacks) == 1
    if single:
        c = c_stack = stacks[0].curvature()
        x = feats[0]
    else:
        c_stack = torch.stack([s.curvature() for s in stacks]).unsqueeze(1)
        c = _repeat_rows(c_stack, sizes)
        x = torch.cat(feats)
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input features")

    def bias_points(vectors):
        # biases are lifted once per stack, then broadcast to that stack's rows
        if single:
            return hb.exp0(vectors[0], c_stack, check=False)
        return _repeat_rows(hb.exp0(torch.stack(vectors), c_stack, check=False), sizes)

    x = hb.exp0(x, c, check=False)
    outs = [hb.log0(x, c, check=False)]
    for depth in range(len(stacks[0].layers)):
        layers = [s.layers[depth] for s in stacks]
        t = _segments(_spmm(adj, outs[-1]), [ly.W1 for ly in layers], sizes)
        h = hb.mobius_add(hb.exp0(t, c, check=False), bias_points([ly.b1 for ly in layers]), c)
        x = hb.wrapped_activation(h, c, check=False)
        t = _segments(hb.log0(x, c, check=False), [ly.W2 for ly in layers], sizes)
        h = hb.mobius_add(hb.exp0(t, c, check=False), bias_points([ly.b2 for ly in layers]), c)
        x = hb.wrapped_activation(h, c, check=False)
        outs.append(hb.log0(x, c, check=False))
    per_layer = [o.split(sizes) for o in outs]
    return [[layer[i] for layer in per_layer] for i in range(len(stacks))]


class HyGCN(nn.Module):
    def __init__(self, d, layers, gen, curvature_init=1.0):
        super().__init__()
        self.stack = HyConvStack(d, layers, gen, curvature_init)
        self.W = _weight(gen, d * (layers + 1), d)

    def project(self, outs):
        if self.W.shape[0] != sum(o.shape[1] for o in outs):
            raise ValueError("projection width does not match d * (L + 1)")
        return torch.relu(torch.cat(outs, dim=1)) @ self.W

    def forward(self, feats, adj):
        return self.project(self.stack(feats, adj))


class HHGCN(nn.Module):
    """Bipartite stack plus user and service hypergraph stacks."""

    def __init__(self, d, layers, gen, curvature_init=1.0):
        super().__init__()
        self.bipartite = HyConvStack(d, layers, gen, curvature_init)
        self.user = HyConvStack(d, layers, gen, curvature_init)
        self.service = HyConvStack(d, layers, gen, curvature_init)
        self.W = _weight(gen, 2 * d * (layers + 1), d)

    def stacks(self):
        return [self.bipartite, self.user, self.service]

    def project(self, bi, us, sv):
        blocks = [torch.cat([b, torch.cat([u, s], dim=0)], dim=1) for b, u, s in zip(bi, us, sv)]
        cat = torch.cat(blocks, dim=1)
        if self.W.shape[0] != cat.shape[1]:
            raise ValueError("projection width does not match 2d * (L + 1)")
        return torch.relu(cat @ self.W)

    def forward(self, feats, adj, hyper_user, hyper_service, n):
        return self.project(self.bipartite(feats, adj), self.user(feats[:n], hyper_user),
                            self.service(feats[n:], hyper_service))


# ------------------------------------------------------------------ routing

def hard_concrete_sample(log_alpha, u, tau=2 / 3, gamma=1.1, beta_stretch=-0.1):
    """Stretched and clipped concrete relaxation of a Bernoulli gate."""
    u = torch.as_tensor(u, dtype=DTYPE)
    if ((u <= 0) | (u >= 1)).any():
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    s = torch.sigmoid((torch.log(u) - torch.log1p(-u) + log_alpha) / tau)
    s_bar = s * (gamma - beta_stretch) + beta_stretch
    return s_bar.clamp(0.0, 1.0)


def inference_gate(log_alpha, delta=0.5):
    return (torch.sigmoid(log_alpha) > delta).to(DTYPE)


def expected_l0(log_alpha, tau=2 / 3, gamma=1.1, beta_stretch=-0.1):
    """Probability mass of each gate being non-zero, summed."""
    return torch.sigmoid(log_alpha - tau * math.log(-beta_stretch / gamma)).sum()


def sample_uniform(shape, gen):
    u = torch.rand(shape, generator=gen, dtype=DTYPE)
    while ((u <= 0) | (u >= 1)).any():
        bad = (u <= 0) | (u >= 1)
        u[bad] = torch.rand(int(bad.sum()), generator=gen, dtype=DTYPE)
    return u


class SNRRouter(nn.Module):
    """K shared blocks (layer norm + dense ReLU), per-task projections and gates."""

    def __init__(self, d, k, d_snr, tasks, gen, cfg):
        super().__init__()
        self.cfg = cfg
        self.norms = nn.ModuleList(nn.LayerNorm(d, dtype=DTYPE) for _ in range(k))
        self.dense_w = nn.Parameter(_glorot((k, d, d_snr), gen))
        self.dense_b = _zeros(k, d_snr)
        self.task_w = nn.Parameter(_glorot((tasks, k, d_snr, d), gen))
        self.log_alpha = nn.Parameter(torch.randn((tasks, k), generator=gen, dtype=DTYPE) * 0.01)

    @property
    def k(self):
        return self.log_alpha.shape[1]

    def blocks(self, y):
        return [torch.relu(norm(y) @ self.dense_w[k] + self.dense_b[k]) for k, norm in enumerate(self.norms)]

    def gates(self, mode, noise=None):
        cfg = self.cfg
        if mode == "infer":
            return inference_gate(self.log_alpha, cfg.delta)
        return hard_concrete_sample(self.log_alpha, noise, cfg.tau, cfg.gamma, cfg.beta_stretch)

    def route(self, phis, p, gates):
        c = gates[p]
        out = sum(c[k] * (phi @ self.task_w[p, k]) for k, phi in enumerate(phis))
        total = c.sum()
        if total == 0:
            log.debug("all routing gates closed for task %d", p)
        return out / (total + self.cfg.norm_eps)

    def expected_l0(self):
        cfg = self.cfg
        return expected_l0(self.log_alpha, cfg.tau, cfg.gamma, cfg.beta_stretch)


# ------------------------------------------------------------------ model

@dataclass
class ForwardOutputs:
    y_region: torch.Tensor
    y_as: torch.Tensor
    y_ra: torch.Tensor
    y_qos: list
    y_shared: list
    y_cross: list
    y_scs: list
    z: list
    pred: list
    gates_snr: torch.Tensor
    gates_cross: torch.Tensor
    l0_snr: torch.Tensor
    l0_cross: torch.Tensor
    fusion_gates: list = field(default_factory=list)


def gated_fusion(y, y_scs, W_g):
    if W_g.shape != (2 * y.shape[1], y.shape[1]):
        raise ValueError(f"fusion weight must be {(2 * y.shape[1], y.shape[1])}, got {tuple(W_g.shape)}")
    g = torch.sigmoid(torch.cat([y, y_scs], dim=1) @ W_g)
    # lerp == g * y + (1 - g) * y_scs, without the ulp overshoot of the expanded form near saturation
    return torch.lerp(y_scs, y, g), g


class Head(nn.Module):
    def __init__(self, d, widths, gen):
        super().__init__()
        h1, h2 = widths
        self.W1 = _weight(gen, d, h1)
        self.b1 = _zeros(h1)
        self.W2 = _weight(gen, h1, h2)
        self.b2 = _zeros(h2)

    def forward(self, z):
        return torch.relu(z @ self.W1 + self.b1) @ self.W2 + self.b2


def predict(z, head, n):
    e = head(z)
    return e[:n] @ e[n:].T


class SharpQoS(nn.Module):
    def __init__(self, cfg: ModelConfig, tasks: int, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tasks = tasks
        gen = torch.Generator().manual_seed(seed)
        d, L, ci = cfg.d, cfg.layers, cfg.curvature_init
        self.ctx_region = HyGCN(d, L, gen, ci)
        self.ctx_as = HyGCN(d, L, gen, ci)
        self.qos = nn.ModuleList(HHGCN(d, L, gen, ci) for _ in range(tasks))
        self.snr = SNRRouter(d, cfg.k_snr, cfg.d_snr, tasks, gen, cfg)
        self.cross = SNRRouter(d, cfg.k_cross, cfg.d_snr, tasks, gen, cfg)
        self.fusion = nn.ParameterList(_weight(gen, 2 * d, d) for _ in range(tasks))
        self.heads = nn.ModuleList(Head(d, cfg.head_widths, gen) for _ in range(tasks))

    def sample_noise(self, gen):
        return {"snr": sample_uniform(self.snr.log_alpha.shape, gen),
                "cross": sample_uniform(self.cross.log_alpha.shape, gen)}

    def forward(self, inputs: ModelInputs, mode="infer", noise=None, gen=None):
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if inputs.P != self.tasks:
            raise ValueError(f"model built for {self.tasks} tasks, inputs carry {inputs.P}")
        if mode == "train" and noise is None:
            if gen is None:
                raise ValueError("train mode needs gate noise or a generator")
            noise = self.sample_noise(gen)
        noise = noise or {}
        n, P = inputs.n, self.tasks

        stacks = [self.ctx_region.stack, self.ctx_as.stack]
        for enc in self.qos:
            stacks.extend(enc.stacks())
        outs = run_stacks(stacks, inputs.stack_feats(), inputs.stack_adj())
        y_r = self.ctx_region.project(outs[0])
        y_a = self.ctx_as.project(outs[1])
        y_ra = y_r + y_a
        y_qos = [enc.project(*outs[2 + 3 * p: 5 + 3 * p]) for p, enc in enumerate(self.qos)]

        g_snr = self.snr.gates(mode, noise.get("snr"))
        phis = self.snr.blocks(y_ra)
        y_shared = [self.snr.route(phis, p, g_snr) for p in range(P)]

        g_cross = self.cross.gates(mode, noise.get("cross"))
        if P > 1:
            source_phis = [self.cross.blocks(y) for y in y_qos]
            y_cross = [sum(self.cross.route(source_phis[j], p, g_cross) for j in range(P) if j != p)
                       for p in range(P)]
        else:
            y_cross = [torch.zeros_like(y_qos[0])]

        y_scs, zs, fgates, preds = [], [], [], []
        for p in range(P):
            scs = y_shared[p] + y_cross[p]
            z, g = gated_fusion(y_qos[p], scs, self.fusion[p])
            y_scs.append(scs)
            zs.append(z)
            fgates.append(g)
            preds.append(predict(z, self.heads[p], n))
        return ForwardOutputs(y_r, y_a, y_ra, y_qos, y_shared, y_cross, y_scs, zs, preds,
                              g_snr, g_cross, self.snr.expected_l0(), self.cross.expected_l0(), fgates)

    def no_decay_names(self):
        return {name for name, _ in self.named_parameters()
                if name.endswith("curvature.raw") or name.endswith("log_alpha")}

    def active_gates(self):
        with torch.no_grad():
            return int(inference_gate(self.snr.log_alpha, self.cfg.delta).sum()
                       + inference_gate(self.cross.log_alpha, self.cfg.delta).sum())


# ------------------------------------------------------------------ flat parameter view

def parameter_manifest(model):
    return [(name, list(p.shape)) for name, p in model.named_parameters()]


def flat_parameters(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def load_flat_parameters(model, vec):
    vec = torch.as_tensor(vec, dtype=DTYPE)
    total = sum(p.numel() for p in model.parameters())
    if vec.numel() != total:
        raise ValueError(f"expected {total} values, got {vec.numel()}")
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(vec[offset:offset + p.numel()].reshape(p.shape))
            offset += p.numel()


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model, path, meta=None):
    """``path`` becomes a directory holding meta.json and params.bin (little-endian f8)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    info = {"config": asdict(model.cfg), "tasks": model.tasks,
            "parameters": parameter_manifest(model), **(meta or {})}
    (path / "meta.json").write_text(json.dumps(info, indent=2))
    (path / "params.bin").write_bytes(flat_parameters(model).numpy().astype("<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    info = json.loads((path / "meta.json").read_text())
    model = SharpQoS(ModelConfig(**info["config"]), info["tasks"])
    if parameter_manifest(model) != [(name, shape) for name, shape in info["parameters"]]:
        raise ValueError(f"{path}: parameter manifest does not match the model layout")
    vec = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    load_flat_parameters(model, torch.from_numpy(vec.copy()))
    return model, info


def write_gate_dump(model, directory, task_names):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for p, name in enumerate(task_names):
            with open(directory / f"gates_{name}.csv", "w") as fh:
                fh.write("router,block,log_alpha,inference_gate\n")
                for router_name, router in (("snr", model.snr), ("cross", model.cross)):
                    gates = inference_gate(router.log_alpha, model.cfg.delta)
                    for k in range(router.k):
                        fh.write(f"{router_name},{k},{float(router.log_alpha[p, k])!r},{int(gates[p, k])}\n")


def multiply_adds(cfg, n, m, P, nnz):
    """Rough multiply-add count of one forward pass.

    ``nnz`` maps graph names (as produced by GraphSet.named) to their
    non-zero counts.
    """
    d, L, N = cfg.d, cfg.layers, n + m
    h1, h2 = cfg.head_widths

    def stack(rows, edges):
        return L * (edges * d + 2 * rows * d * d)

    total = stack(N, nnz["region"]) + stack(N, nnz["as"]) + 2 * N * d * (L + 1) * d
    for p in range(P):
        total += stack(N, nnz[f"qos{p}"]) + stack(n, nnz[f"hyper_user{p}"])
        total += stack(m, nnz[f"hyper_service{p}"]) + N * 2 * d * (L + 1) * d
    routed = N * d * cfg.d_snr
    total += cfg.k_snr * routed * (1 + P) + cfg.k_cross * routed * (P + P * max(P - 1, 0))
    total += P * (N * 2 * d * d + N * (d * h1 + h1 * h2) + n * m * h2)
    return int(total)
