"""Invocation, context and hypergraph adjacencies.

Node indexing is shared with the feature bank: users occupy rows 0..n-1 and
services rows n..N-1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DEG_EPS = 1.0


@dataclass(frozen=True)
class SparseAdj:
    matrix: sp.csr_matrix
    symmetric: bool = False

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        object.__setattr__(self, "matrix", m)
        if not np.isfinite(m.data).all():
            raise ValueError("adjacency weights must be finite")

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def n_cols(self):
        return self.matrix.shape[1]

    @property
    def nnz(self):
        return self.matrix.nnz

    def entries(self):
        coo = self.matrix.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def toarray(self):
        return self.matrix.toarray()

    def same_as(self, other):
        a, b = self.matrix, other.matrix
        return (a.shape == b.shape and np.array_equal(a.indptr, b.indptr)
                and np.array_equal(a.indices, b.indices) and np.array_equal(a.data, b.data))


@dataclass(frozen=True)
class GraphSet:
    qos: list
    region: SparseAdj
    as_graph: SparseAdj
    hyper_user: list
    hyper_service: list

    def named(self):
        """(name, adjacency) pairs in a stable order."""
        yield "region", self.region
        yield "as", self.as_graph
        for p, (a, u, s) in enumerate(zip(self.qos, self.hyper_user, self.hyper_service)):
            yield f"qos{p}", a
            yield f"hyper_user{p}", u
            yield f"hyper_service{p}", s

    def dump(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, adj in self.named():
            with open(directory / f"edges_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["row", "col", "weight"])
                w.writerows(adj.entries())


def build_invocation_graph(ds, train_mask, p):
    n, N = ds.n, ds.N
    rows, cols = np.nonzero(train_mask[p])
    r = np.concatenate([rows, cols + n])
    c = np.concatenate([cols + n, rows])
    A = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(N, N))
    return SparseAdj(A, symmetric=True)


def _category_codes(user_vals, service_vals):
    _, codes = np.unique(np.concatenate([user_vals, service_vals]).astype(str), return_inverse=True)
    return codes


def build_context_graph(ds, attribute):
    """Connect every pair of distinct entities sharing a region (or AS) value."""
    if attribute == "region":
        codes = _category_codes(ds.user_region, ds.service_region)
    elif attribute == "as":
        codes = _category_codes(ds.user_as, ds.service_as)
    else:
        raise ValueError(f"unknown context attribute {attribute!r}")
    N = codes.size
    # membership matrix B (N x categories); B B^T links co-members
    B = sp.csr_matrix((np.ones(N), (np.arange(N), codes)), shape=(N, codes.max() + 1))
    A = (B @ B.T).tocsr()
    A = A - sp.diags(A.diagonal())
    A.eliminate_zeros()
    return SparseAdj(A, symmetric=True)


def _guarded(deg):
    return np.maximum(deg, DEG_EPS)


def _symmetrize(M):
    # removes last-bit asymmetry left by the triple products
    return ((M + M.T) * 0.5).tocsr()


def normalize_adjacency(adj):
    """D^{-1/2} (A + I) D^{-1/2} with D the row sums of A (guarded for isolated nodes)."""
    A = adj.matrix
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    deg = _guarded(np.asarray(A.sum(axis=1)).ravel())
    d = sp.diags(deg ** -0.5)
    out = d @ (A + sp.identity(A.shape[0], format="csr")) @ d
    if adj.symmetric:
        out = _symmetrize(out)
    return SparseAdj(out, symmetric=adj.symmetric)


def build_hypergraphs(ds, train_mask, p):
    """Normalized user (n x n) and service (m x m) co-invocation adjacencies."""
    H = sp.csr_matrix(train_mask[p].astype(np.float64))
    du = _guarded(np.asarray(H.sum(axis=1)).ravel())
    ds_ = _guarded(np.asarray(H.sum(axis=0)).ravel())
    du_half = sp.diags(du ** -0.5)
    ds_half = sp.diags(ds_ ** -0.5)
    user = du_half @ H @ sp.diags(1 / ds_) @ H.T @ du_half
    service = ds_half @ H.T @ sp.diags(1 / du) @ H @ ds_half
    return SparseAdj(_symmetrize(user), symmetric=True), SparseAdj(_symmetrize(service), symmetric=True)


def build_graph_set(ds, train_mask):
    qos, hu, hs = [], [], []
    for p in range(ds.P):
        qos.append(normalize_adjacency(build_invocation_graph(ds, train_mask, p)))
        u, s = build_hypergraphs(ds, train_mask, p)
        hu.append(u)
        hs.append(s)
    region = normalize_adjacency(build_context_graph(ds, "region"))
    as_graph = normalize_adjacency(build_context_graph(ds, "as"))
    return GraphSet(qos, region, as_graph, hu, hs)
