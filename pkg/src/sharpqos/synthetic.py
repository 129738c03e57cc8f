"""Small generated datasets used by the bundled fixtures and tests."""
from __future__ import annotations

import numpy as np

from .qosdata import QoSDataset


def low_rank_dataset(n=30, m=20, rank=2, scales=(1.0, 20.0), n_regions=4, n_as=6, density=1.0, seed=0):
    """Tasks ``scale * U_p V_p^T`` with positive rank-``rank`` factors.

    Factors share a per-region offset so the context graphs carry signal.
    ``density`` < 1 hides a random subset of entries.
    """
    rng = np.random.default_rng(seed)
    user_region = rng.integers(0, n_regions, n)
    service_region = rng.integers(0, n_regions, m)
    user_as = rng.integers(0, n_as, n)
    service_as = rng.integers(0, n_as, m)
    values = []
    for scale in scales:
        region_u = rng.uniform(0.2, 1.0, (n_regions, rank))
        region_s = rng.uniform(0.2, 1.0, (n_regions, rank))
        U = region_u[user_region] + rng.uniform(0.0, 0.6, (n, rank))
        V = region_s[service_region] + rng.uniform(0.0, 0.6, (m, rank))
        Q = scale * U @ V.T
        if density < 1:
            Q = np.where(rng.random((n, m)) < density, Q, 0.0)
        values.append(Q)
    names = ["rt", "tp", "re", "ct"][: len(scales)] if len(scales) <= 4 else [f"t{p}" for p in range(len(scales))]
    return QoSDataset(values,
                      [f"R{r}" for r in user_region], [f"AS{a}" for a in user_as],
                      [f"R{r}" for r in service_region], [f"AS{a}" for a in service_as],
                      task_names=names)
