"""Independent reference computations used by the unit and acceptance tests.

Nothing here imports the model internals: the scalar forward trace works on
Python floats with the ``math`` module, reading parameter values from a
model only through its attribute names.
"""
import math

import numpy as np
import torch

from sharpqos import featinit, graphs, sharpnet
from sharpqos.qosdata import QoSDataset


# ---------------------------------------------------------------- scalar ball maps

def exp0(v, c):
    s = math.sqrt(c)
    return math.tanh(s * v) / s


def log0(x, c):
    s = math.sqrt(c)
    assert abs(s * x) < 1 - 1e-5, "oracle expects points well inside the ball"
    return math.atanh(s * x) / s


def mobius_add(x, y, c):
    # one-dimensional Moebius addition collapses to the relativistic velocity sum
    return (x + y) / (1 + c * x * y)


def wrapped_relu(x, c):
    return exp0(max(log0(x, c), 0.0), c)


def sigmoid(x):
    return 1 / (1 + math.exp(-x))


def softplus(x):
    return math.log1p(math.exp(x))


# ---------------------------------------------------------------- scalar network

def normalized_two_node(linked):
    """D^-1/2 (A + I) D^-1/2 for two nodes, with guarded degrees."""
    a = 1.0 if linked else 0.0
    deg = max(a, 1.0)
    return [[1 / deg, a / deg], [a / deg, 1 / deg]]


def f(t):
    return float(t.detach().reshape(-1)[0]) if t.numel() == 1 else t.detach().reshape(-1).tolist()


def stack_trace(stack, feats, adj):
    """Layer outputs (tangent view) of a d=1 HyConv stack over len(feats) nodes."""
    c = softplus(f(stack.curvature.raw)) + 1e-5
    nodes = range(len(feats))
    x = [exp0(v, c) for v in feats]
    outs = [[log0(v, c) for v in x]]
    for layer in stack.layers:
        W1, b1, W2, b2 = f(layer.W1), f(layer.b1), f(layer.W2), f(layer.b2)
        agg = [sum(adj[i][j] * outs[-1][j] for j in nodes) for i in nodes]
        h = [mobius_add(exp0(a * W1, c), exp0(b1, c), c) for a in agg]
        x = [wrapped_relu(v, c) for v in h]
        h = [mobius_add(exp0(log0(v, c) * W2, c), exp0(b2, c), c) for v in x]
        x = [wrapped_relu(v, c) for v in h]
        outs.append([log0(v, c) for v in x])
    return outs


def hygcn_trace(enc, feats, adj):
    outs = stack_trace(enc.stack, feats, adj)
    W = f(enc.W)
    W = W if isinstance(W, list) else [W]
    return [sum(max(outs[l][i], 0.0) * W[l] for l in range(len(outs))) for i in range(len(feats))]


def hhgcn_trace(enc, feats, adj):
    """Two nodes: user 0 and service 1, each alone in its hypergraph."""
    bi = stack_trace(enc.bipartite, feats, adj)
    us = stack_trace(enc.user, feats[:1], [[1.0]])
    sv = stack_trace(enc.service, feats[1:], [[1.0]])
    W = f(enc.W)
    out = []
    for i in range(2):
        hyper = us if i == 0 else sv
        row = i if i == 0 else 0
        s = sum(bi[l][i] * W[2 * l] + hyper[l][row] * W[2 * l + 1] for l in range(len(bi)))
        out.append(max(s, 0.0))
    return out


def router_trace(router, y, p, gates, ln_eps=1e-5):
    """Gated mean of routed blocks for one scalar node feature."""
    total, weight = 0.0, 0.0
    for k in range(router.k):
        norm = router.norms[k]
        ln = (y - y) / math.sqrt(0.0 + ln_eps) * f(norm.weight) + f(norm.bias)
        phi = max(ln * f(router.dense_w[k]) + f(router.dense_b[k]), 0.0)
        total += gates[p][k] * phi * f(router.task_w[p, k])
        weight += gates[p][k]
    return total / (weight + 1e-8)


def hard_concrete(log_alpha, u, tau=2 / 3, gamma=1.1, beta=-0.1):
    s = sigmoid((math.log(u) - math.log(1 - u) + log_alpha) / tau)
    return min(max(s * (gamma - beta) + beta, 0.0), 1.0)


def gates_trace(router, mode, noise=None, delta=0.5):
    la = router.log_alpha.detach().tolist()
    if mode == "infer":
        return [[1.0 if sigmoid(a) > delta else 0.0 for a in row] for row in la]
    u = noise.tolist()
    return [[hard_concrete(a, uu) for a, uu in zip(row, urow)] for row, urow in zip(la, u)]


def scalar_forward(model, qos_feats, region_feats, as_feats, same_region, same_as, mode="infer", noise=None):
    """Intermediate features and predictions of a d=1 model on one user and one service.

    Returns a dict with per-node lists ``y_region``, ``y_as``, ``y_qos``,
    ``y_scs``, ``z`` and the scalar predictions ``pred``.
    """
    P = model.tasks
    region_adj = normalized_two_node(same_region)
    as_adj = normalized_two_node(same_as)
    qos_adj = normalized_two_node(True)
    y_r = hygcn_trace(model.ctx_region, region_feats, region_adj)
    y_a = hygcn_trace(model.ctx_as, as_feats, as_adj)
    y_ra = [a + b for a, b in zip(y_r, y_a)]
    y_q = [hhgcn_trace(model.qos[p], qos_feats[p], qos_adj) for p in range(P)]
    noise = noise or {}
    g_snr = gates_trace(model.snr, mode, noise.get("snr"))
    g_cross = gates_trace(model.cross, mode, noise.get("cross"))
    preds, y_scs, zs = [], [], []
    for p in range(P):
        z, scs_p = [], []
        for i in range(2):
            shared = router_trace(model.snr, y_ra[i], p, g_snr)
            cross = sum(router_trace(model.cross, y_q[j][i], p, g_cross) for j in range(P) if j != p)
            scs = shared + cross
            scs_p.append(scs)
            Wg = f(model.fusion[p])
            g = sigmoid(y_q[p][i] * Wg[0] + scs * Wg[1])
            z.append(g * y_q[p][i] + (1 - g) * scs)
        head = model.heads[p]
        e = [max(v * f(head.W1) + f(head.b1), 0.0) * f(head.W2) + f(head.b2) for v in z]
        preds.append(e[0] * e[1])
        y_scs.append(scs_p)
        zs.append(z)
    return {"y_region": y_r, "y_as": y_a, "y_qos": y_q, "y_scs": y_scs, "z": zs, "pred": preds}


def scalar_model(seed=0, tasks=2, k=2):
    """A d=1 model with every parameter (biases, norms, logits included) set at random."""
    cfg = sharpnet.ModelConfig(d=1, layers=2, k_snr=k, k_cross=k, d_snr=1, head_widths=(1, 1))
    model = sharpnet.SharpQoS(cfg, tasks, seed=seed)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for name, prm in model.named_parameters():
            if name.endswith("curvature.raw"):
                prm.copy_(torch.empty_like(prm).uniform_(-0.5, 0.5, generator=g))
            elif name.endswith("log_alpha"):
                prm.copy_(torch.randn(prm.shape, generator=g, dtype=prm.dtype))
            elif ".layers." in name and name[-2] == "W":
                # positive HyConv weights keep the aggregation path alive through the ReLUs
                prm.copy_(torch.empty_like(prm).uniform_(0.3, 1.2, generator=g))
            else:
                prm.copy_(torch.empty_like(prm).uniform_(-1.2, 1.2, generator=g))
        # keep some gates open in inference mode so routing contributes
        model.snr.log_alpha[:, 0] = 1.0
        model.cross.log_alpha[:, 0] = 1.0
    return model


def scalar_inputs(qos_feats, region_feats, as_feats, same_region, same_as, tasks=2):
    values = [np.array([[1.0 + p]]) for p in range(tasks)]
    ds = QoSDataset(values, ["r"], ["a"], ["r" if same_region else "q"], ["a" if same_as else "b"],
                    [f"t{p}" for p in range(tasks)])
    gs = graphs.build_graph_set(ds, ds.observed_mask)
    col = lambda v: np.asarray(v, dtype=np.float64).reshape(2, 1)
    bank = featinit.FeatureBank([col(q) for q in qos_feats], col(region_feats), col(as_feats))
    return sharpnet.ModelInputs.build(gs, bank, 1)


# ---------------------------------------------------------------- gradient check

def finite_difference_check(model, loss_fn, h=1e-5, floor=1e-5):
    """Per-parameter relative error between autograd and central differences.

    The error of one parameter tensor is ``max|g_a - g_n| / max(max|g_a|, max|g_n|, floor)``.
    Taking the max over the tensor keeps single vanishing entries from blowing the
    ratio up; the floor does the same for tensors whose gradient is structurally
    zero or tiny: central differences at h=1e-5 carry about 1e-9 of rounding
    noise on these losses, so gradients below the floor are held to an
    absolute error of 1e-3 * floor instead.
    """
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    errors = {}
    with torch.no_grad():
        for name, prm in model.named_parameters():
            analytic = prm.grad.detach().clone() if prm.grad is not None else torch.zeros_like(prm)
            numeric = torch.zeros_like(prm)
            flat = prm.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                down = float(loss_fn())
                flat[i] = old
                numeric.view(-1)[i] = (up - down) / (2 * h)
            scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
            errors[name] = float((analytic - numeric).abs().max()) / scale
    return errors


# ---------------------------------------------------------------- tiny instance

TINY_MODEL = dict(d=8, layers=1, k_snr=2, k_cross=2, d_snr=8, head_widths=(8, 8))


def tiny_instance(seed=0, td=60):
    """n=4 users, m=5 services, two tasks, features of width 8."""
    from sharpqos.qosdata import SplitSpec, split
    from sharpqos.synthetic import low_rank_dataset

    ds = low_rank_dataset(n=4, m=5, n_regions=2, n_as=3, seed=seed)
    splits = split(ds, SplitSpec(td, seed=seed))
    bank = featinit.build_features(ds, splits[0], 8, 8, nmf_iters=50, ae_epochs=50, seed=seed)
    gs = graphs.build_graph_set(ds, splits[0])
    return ds, splits, sharpnet.ModelInputs.build(gs, bank, ds.n)


def training_loss(model, ds, mask, inputs, noise, weights, lam):
    targets = [torch.as_tensor(v) for v in ds.values]
    out = model(inputs, mode="train", noise=noise)
    losses = [(out.pred[p][torch.as_tensor(mask[p])] - targets[p][torch.as_tensor(mask[p])]).abs().mean()
              for p in range(ds.P)]
    return sum(w * l for w, l in zip(weights, losses)) + lam * (out.l0_snr + out.l0_cross)


def perturb_parameters(model, seed=5, scale=0.3):
    """Move zero-initialized biases and unit norm scales off their special values.

    At zero biases every HyConv stack is independent of its curvature (the
    exp/log maps cancel), so the curvature gradient would be identically zero
    and a finite-difference comparison would only see rounding noise.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, prm in model.named_parameters():
            leaf = name.split(".")[-1]
            if leaf in ("b1", "b2", "bias", "dense_b", "weight"):
                prm.add_(scale * torch.randn(prm.shape, generator=g, dtype=prm.dtype))
    return model
