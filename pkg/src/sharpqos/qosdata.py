"""QoS matrices, context attributes, splits and evaluation variants."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.ensemble import IsolationForest

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class QoSDataset:
    """P user x service QoS matrices plus region/AS ids per entity.

    ``values[p]`` is a dense n x m float array holding 0 where nothing was
    observed; ``observed_mask[p]`` is ``values[p] > 0``.
    """

    values: list[np.ndarray]
    user_region: np.ndarray
    user_as: np.ndarray
    service_region: np.ndarray
    service_as: np.ndarray
    task_names: list[str]
    observed_mask: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.values = [np.asarray(v, dtype=np.float64) for v in self.values]
        if not self.values:
            raise DatasetError("dataset needs at least one task")
        shape = self.values[0].shape
        for name, v in zip(self.task_names, self.values):
            if v.shape != shape:
                raise DatasetError(f"task {name!r} has shape {v.shape}, expected {shape}")
            if (v < 0).any():
                raise DatasetError(f"task {name!r} has negative values")
        if len(self.task_names) != len(self.values):
            raise DatasetError("one task name per matrix required")
        self.observed_mask = [v > 0 for v in self.values]
        n, m = shape
        self.user_region = np.asarray(self.user_region, dtype=object)
        self.user_as = np.asarray(self.user_as, dtype=object)
        self.service_region = np.asarray(self.service_region, dtype=object)
        self.service_as = np.asarray(self.service_as, dtype=object)
        if len(self.user_region) != n or len(self.user_as) != n:
            raise DatasetError(f"need region and AS for all {n} users")
        if len(self.service_region) != m or len(self.service_as) != m:
            raise DatasetError(f"need region and AS for all {m} services")

    @property
    def n(self):
        return self.values[0].shape[0]

    @property
    def m(self):
        return self.values[0].shape[1]

    @property
    def P(self):
        return len(self.values)

    @property
    def N(self):
        return self.n + self.m

    def n_observed(self, p=None):
        if p is None:
            return [int(mask.sum()) for mask in self.observed_mask]
        return int(self.observed_mask[p].sum())

    def with_values(self, values):
        """Copy of this dataset with replaced matrices (same context)."""
        return QoSDataset(values, self.user_region, self.user_as, self.service_region,
                          self.service_as, list(self.task_names))

    def subsample(self, users, services):
        """Restrict to the given user and service indices (in that order)."""
        users = np.asarray(users)
        services = np.asarray(services)
        return QoSDataset([v[np.ix_(users, services)] for v in self.values],
                          self.user_region[users], self.user_as[users],
                          self.service_region[services], self.service_as[services],
                          list(self.task_names))


@dataclass(frozen=True)
class SplitSpec:
    train_density: float
    seed: int = 0
    val_fraction: float = 0.05

    def __post_init__(self):
        if not 0 < self.train_density < 100:
            raise ValueError(f"train_density must lie in (0, 100), got {self.train_density}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


COLD_START_KINDS = ("CU", "CS", "CB")


@dataclass(frozen=True)
class ColdStartSpec:
    kind: str
    csp: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in COLD_START_KINDS:
            raise ValueError(f"cold-start kind must be one of {COLD_START_KINDS}, got {self.kind!r}")
        if not 0 <= self.csp <= 100:
            raise ValueError(f"csp must lie in [0, 100], got {self.csp}")

    @classmethod
    def parse(cls, text, seed=0):
        """Parse ``"CB:10"`` style flags."""
        kind, _, pct = text.partition(":")
        if not pct:
            raise ValueError(f"expected KIND:PCT, got {text!r}")
        return cls(kind.upper(), float(pct), seed)


# ---------------------------------------------------------------- loading

def _read_matrix(path):
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    bad = (arr < 0) & (arr != -1)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DatasetError(f"{path}: negative value {arr[i, j]} at ({i}, {j}); only -1 may mark missing")
    arr[arr == -1] = 0.0
    return arr


def read_context(path, n, m):
    """Parse the ``kind index region as`` TSV into four id arrays."""
    user_region = [None] * n
    user_as = [None] * n
    service_region = [None] * m
    service_as = [None] * m
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = {"kind", "index", "region", "as"} - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            kind = row["kind"].strip()
            idx = int(row["index"])
            if kind == "user":
                regions, ases, limit = user_region, user_as, n
            elif kind == "service":
                regions, ases, limit = service_region, service_as, m
            else:
                raise DatasetError(f"{path}:{lineno}: unknown entity kind {kind!r}")
            if not 0 <= idx < limit:
                raise DatasetError(f"{path}:{lineno}: {kind} index {idx} out of range")
            regions[idx] = row["region"].strip()
            ases[idx] = row["as"].strip()
    for kind, arr in (("user", user_region), ("service", service_region)):
        holes = [i for i, v in enumerate(arr) if v is None]
        if holes:
            raise DatasetError(f"{path}: no context row for {kind} index {holes[0]}")
    return user_region, user_as, service_region, service_as


def load_dataset(matrix_paths, context_path, task_names):
    if len(matrix_paths) != len(task_names):
        raise DatasetError("one task name per matrix file required")
    values = [_read_matrix(p) for p in matrix_paths]
    shapes = {v.shape for v in values}
    if len(shapes) != 1:
        raise DatasetError(f"matrix shapes differ across tasks: {sorted(shapes)}")
    n, m = values[0].shape
    ctx = read_context(context_path, n, m)
    ds = QoSDataset(values, *ctx, task_names=list(task_names))
    for name, count in zip(ds.task_names, ds.n_observed()):
        if count == 0:
            log.warning("task %r has no observed entries", name)
    return ds


def write_context(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["kind", "index", "region", "as"])
        for i in range(ds.n):
            w.writerow(["user", i, ds.user_region[i], ds.user_as[i]])
        for j in range(ds.m):
            w.writerow(["service", j, ds.service_region[j], ds.service_as[j]])


def save_archive(ds, directory, seed=None):
    """Write the normalized archive: meta.json, context.tsv, values_<task>.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"n": ds.n, "m": ds.m, "P": ds.P, "task_names": ds.task_names, "seed": seed}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    write_context(ds, directory / "context.tsv")
    for name, v in zip(ds.task_names, ds.values):
        rows, cols = np.nonzero(v > 0)
        with open(directory / f"values_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "value"])
            for i, j in zip(rows, cols):
                w.writerow([int(i), int(j), repr(float(v[i, j]))])


def load_archive(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    n, m = meta["n"], meta["m"]
    values = []
    for name in meta["task_names"]:
        v = np.zeros((n, m))
        data = np.loadtxt(directory / f"values_{name}.csv", delimiter=",", skiprows=1, ndmin=2)
        if data.size:
            v[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
        values.append(v)
    ctx = read_context(directory / "context.tsv", n, m)
    return QoSDataset(values, *ctx, task_names=list(meta["task_names"]))


def _read_wsdream_list(path, country_col, as_col):
    regions, ases = [], []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if not line.strip() or line.startswith(("[", "=")):
                continue
            parts = line.rstrip("\n").split("\t")
            regions.append(parts[country_col].strip() if len(parts) > country_col else "")
            ases.append(parts[as_col].strip() if len(parts) > as_col else "")
    return regions, ases


def load_wsdream(directory):
    """Read the raw WS-DREAM dataset #1 layout.

    Expects ``rtMatrix.txt``, ``tpMatrix.txt``, ``userlist.txt`` and
    ``wslist.txt`` (tab separated, bracketed header lines).  Country is used
    as the region attribute.
    """
    directory = Path(directory)
    values = [_read_matrix(directory / "rtMatrix.txt"), _read_matrix(directory / "tpMatrix.txt")]
    if values[0].shape != values[1].shape:
        raise DatasetError("rt and tp matrices differ in shape")
    n, m = values[0].shape
    u_reg, u_as = _read_wsdream_list(directory / "userlist.txt", 2, 4)
    s_reg, s_as = _read_wsdream_list(directory / "wslist.txt", 4, 6)
    if len(u_reg) != n or len(s_reg) != m:
        raise DatasetError(f"user/service lists ({len(u_reg)}, {len(s_reg)}) do not match matrices {n}x{m}")
    return QoSDataset(values, u_reg, u_as, s_reg, s_as, task_names=["rt", "tp"])


# ---------------------------------------------------------------- sampling

def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split(ds, spec):
    """Per-task train/val/test masks over that task's observed entries."""
    ss = np.random.SeedSequence(spec.seed)
    train, val, test = [], [], []
    for p, child in enumerate(ss.spawn(ds.P)):
        rng = np.random.default_rng(child)
        obs = np.flatnonzero(ds.observed_mask[p])
        k = _round_half_up(spec.train_density / 100 * obs.size)
        if k == 0:
            raise DatasetError(
                f"task {ds.task_names[p]!r}: {spec.train_density}% of {obs.size} observed entries "
                "rounds to zero training entries")
        chosen = rng.permutation(obs)[:k]
        n_val = _round_half_up(spec.val_fraction * k)
        masks = []
        for idx in (chosen[n_val:], chosen[:n_val]):
            mask = np.zeros(ds.values[p].shape, dtype=bool)
            mask.flat[idx] = True
            masks.append(mask)
        tr, va = masks
        train.append(tr)
        val.append(va)
        test.append(ds.observed_mask[p] & ~tr & ~va)
    return train, val, test


def cold_start_entities(n, m, spec):
    """Indices of cold-start users and services.

    Users and services draw from independent streams, so CU and CB pick the
    same users for a given seed (likewise CS and CB for services).
    """
    users = np.array([], dtype=int)
    services = np.array([], dtype=int)
    if spec.kind in ("CU", "CB"):
        rng = np.random.default_rng([spec.seed, 0])
        users = np.sort(rng.permutation(n)[: int(math.floor(spec.csp / 100 * n))])
    if spec.kind in ("CS", "CB"):
        rng = np.random.default_rng([spec.seed, 1])
        services = np.sort(rng.permutation(m)[: int(math.floor(spec.csp / 100 * m))])
    return users, services


def make_cold_start(ds, train_mask, spec):
    users, services = cold_start_entities(ds.n, ds.m, spec)
    out = []
    for mask in train_mask:
        mask = mask.copy()
        mask[users, :] = False
        mask[:, services] = False
        out.append(mask)
    return out


def outlier_scores(values, seed=0, n_trees=100):
    """Isolation-forest anomaly scores for scalar values (higher = more anomalous)."""
    x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    forest = IsolationForest(n_estimators=n_trees, max_samples=min(256, len(x)), random_state=seed)
    forest.fit(x)
    return -forest.score_samples(x)


def filter_outliers(ds, test_mask, fraction, seed=0):
    """Drop the ``fraction`` percent most anomalous test entries of every task.

    Fractions up to 10% are the intended range; larger ones are allowed but
    logged since they start removing ordinary values.
    """
    if not 0 <= fraction < 100:
        raise ValueError(f"outlier fraction must lie in [0, 100), got {fraction}")
    if fraction > 10:
        log.warning("outlier fraction %g%% exceeds the usual 0-10%% range", fraction)
    out = []
    for p, mask in enumerate(test_mask):
        mask = mask.copy()
        idx = np.flatnonzero(mask)
        k = _round_half_up(fraction / 100 * idx.size)
        if k > 0:
            scores = outlier_scores(ds.values[p].flat[idx], seed=seed)
            order = np.lexsort((idx, -scores))
            mask.flat[idx[order[:k]]] = False
        out.append(mask)
    return out
