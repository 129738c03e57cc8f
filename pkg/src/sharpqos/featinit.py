"""Initial node features: masked NMF factors and autoencoded one-hot context."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

NMF_EPS = 1e-12


@dataclass
class FeatureBank:
    qos_feats: list          # P arrays, N x d1
    region_feats: np.ndarray  # N x d2
    as_feats: np.ndarray      # N x d2

    @property
    def d1(self):
        return self.qos_feats[0].shape[1]

    @property
    def d2(self):
        return self.region_feats.shape[1]

    def sources(self):
        yield "region", self.region_feats
        yield "as", self.as_feats
        for p, f in enumerate(self.qos_feats):
            yield f"qos{p}", f

    def save(self, directory, meta=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, f in self.sources():
            write_feature_file(directory / f"features_{name}.bin", f)
        info = {"P": len(self.qos_feats), "d1": self.d1, "d2": self.d2, **(meta or {})}
        (directory / "features_meta.json").write_text(json.dumps(info, indent=2))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        info = json.loads((directory / "features_meta.json").read_text())
        qos = [read_feature_file(directory / f"features_qos{p}.bin") for p in range(info["P"])]
        return cls(qos, read_feature_file(directory / "features_region.bin"),
                   read_feature_file(directory / "features_as.bin"))


def write_feature_file(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes())


def read_feature_file(path):
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f8").reshape(rows, cols).copy()


def masked_error(Q, mask, U, V):
    return float(np.linalg.norm(mask * (Q - U @ V.T)))


def nmf(Q, mask, rank, iters=200, seed=0, history=None):
    """Nonnegative factors U (n x rank), V (m x rank) with mask * (U V^T) ~ mask * Q.

    Multiplicative updates restricted to the masked entries.  Pass a list as
    ``history`` to collect the masked Frobenius error after every iteration.
    """
    Q = np.asarray(Q, dtype=np.float64)
    M = np.asarray(mask, dtype=np.float64)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if not M.any():
        raise ValueError("nothing to factor: mask is empty")
    MQ = M * Q
    rng = np.random.default_rng(seed)
    scale = np.sqrt(MQ.sum() / M.sum() / rank)
    U = rng.uniform(0, 1, (Q.shape[0], rank)) * scale
    V = rng.uniform(0, 1, (Q.shape[1], rank)) * scale
    if history is not None:
        history.append(masked_error(Q, M, U, V))
    for _ in range(iters):
        U *= (MQ @ V) / ((M * (U @ V.T)) @ V + NMF_EPS)
        V *= (MQ.T @ U) / ((M * (U @ V.T)).T @ U + NMF_EPS)
        if history is not None:
            history.append(masked_error(Q, M, U, V))
    return U, V


def onehot_context(values):
    """One-hot rows for a categorical column; categories in sorted order."""
    cats, codes = np.unique(np.asarray(values).astype(str), return_inverse=True)
    out = np.zeros((codes.size, cats.size))
    out[np.arange(codes.size), codes] = 1.0
    return out


class AutoEncoder(nn.Module):
    def __init__(self, n_in, width):
        super().__init__()
        self.encoder = nn.Linear(n_in, width, dtype=torch.float64)
        self.decoder = nn.Linear(width, n_in, dtype=torch.float64)

    def encode(self, x):
        return torch.relu(self.encoder(x))

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.encode(x)))


def autoencode(X, width, epochs=300, seed=0, lr=1e-3, losses=None):
    """Train a one-hidden-layer autoencoder on ``X`` and return the codes."""
    X = torch.as_tensor(np.asarray(X), dtype=torch.float64)
    if width >= X.shape[1]:
        log.warning("autoencoder width %d >= input width %d; compression is trivial", width, X.shape[1])
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        model = AutoEncoder(X.shape[1], width)
    with torch.no_grad():
        # a unit negative on every row never receives gradient; mirror it into the active side
        dead = (model.encoder(X) <= 0).all(dim=0)
        model.encoder.weight[dead] *= -1
        model.encoder.bias[dead] *= -1
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = ((model(X) - X) ** 2).mean()
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(loss.item())
    with torch.no_grad():
        if losses is not None:
            losses.append(float(((model(X) - X) ** 2).mean()))
        return model.encode(X).numpy()


def assemble_bank(qos_factors, context_codes):
    """Stack user blocks above service blocks.

    ``qos_factors`` is a list of (U, V) pairs, ``context_codes`` maps
    ``"region"``/``"as"`` to (user codes, service codes).
    """
    def stack(u, s, name):
        if u.shape[1] != s.shape[1]:
            raise ValueError(f"{name}: user width {u.shape[1]} != service width {s.shape[1]}")
        return np.vstack([u, s])

    qos = [stack(U, V, f"qos{p}") for p, (U, V) in enumerate(qos_factors)]
    return FeatureBank(qos, stack(*context_codes["region"], "region"), stack(*context_codes["as"], "as"))


def build_features(ds, train_mask, d1=128, d2=128, nmf_iters=200, ae_epochs=300, seed=0):
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(ds.P + 4)]
    factors = [nmf(ds.values[p], train_mask[p], d1, nmf_iters, seeds[p]) for p in range(ds.P)]
    ctx_seeds = iter(seeds[ds.P:])
    codes = {}
    for attr, users, services in (("region", ds.user_region, ds.service_region),
                                  ("as", ds.user_as, ds.service_as)):
        codes[attr] = (autoencode(onehot_context(users), d2, ae_epochs, next(ctx_seeds)),
                       autoencode(onehot_context(services), d2, ae_epochs, next(ctx_seeds)))
    return assemble_bank(factors, codes)
