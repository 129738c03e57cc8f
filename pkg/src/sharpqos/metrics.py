"""Error metrics, relative improvement and grouped confidence intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z_SCORES = {90: 1.6449, 95: 1.9600, 99: 2.5758}


def metrics(pred, truth, mask):
    """(MAE, RMSE) over the entries selected by ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("test mask is empty")
    err = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(truth, dtype=np.float64)[mask]
    return float(np.abs(err).mean()), float(np.sqrt((err * err).mean()))


def improvement(p1, p2):
    """Percentage by which ``p1`` improves on the reference ``p2``."""
    if p2 == 0:
        raise ValueError("reference value must be non-zero")
    return (p2 - p1) / p2 * 100.0


def interval(mean, std, groups, level):
    """``mean -/+ z * std / sqrt(groups)`` for a level in Z_SCORES."""
    if level not in Z_SCORES:
        raise ValueError(f"unsupported confidence level {level}; choose from {sorted(Z_SCORES)}")
    half = Z_SCORES[level] * std / math.sqrt(groups)
    return mean - half, mean + half


@dataclass
class GroupedIntervals:
    groups: int
    group_means: np.ndarray
    mean: float
    std: float
    overall_mae: float
    intervals: dict
    accepted: dict

    def as_dict(self):
        return {"groups": self.groups, "mean": self.mean, "std": self.std,
                "overall_mae": self.overall_mae,
                "intervals": {str(k): list(v) for k, v in self.intervals.items()},
                "h0_accepted": {str(k): v for k, v in self.accepted.items()}}


def confidence_intervals(errors, groups=50, levels=(90, 95, 99), seed=None):
    """Split absolute errors into ``groups`` equal chunks and bound their mean MAE.

    Chunks are taken sequentially, after a seeded shuffle when ``seed`` is
    given; the ``len(errors) % groups`` trailing values are dropped.  The
    null hypothesis is accepted at a level when the overall MAE (all
    errors) lies inside that level's interval.
    """
    errors = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    if groups < 2:
        raise ValueError("need at least two groups for a sample standard deviation")
    if errors.size < groups:
        raise ValueError(f"{errors.size} errors cannot fill {groups} groups")
    if seed is not None:
        errors_used = errors[np.random.default_rng(seed).permutation(errors.size)]
    else:
        errors_used = errors
    size = errors.size // groups
    means = errors_used[: size * groups].reshape(groups, size).mean(axis=1)
    if np.all(means == means[0]):
        # summation rounding would otherwise leave a spurious ulp-sized spread
        mean, std = float(means[0]), 0.0
    else:
        mean, std = float(means.mean()), float(means.std(ddof=1))
    overall = float(errors.mean())
    ivs = {lv: interval(mean, std, groups, lv) for lv in levels}
    # summation order differs between the overall and grouped means, so allow a few ulps
    slack = 8 * np.spacing(max(abs(overall), abs(mean)))
    accepted = {lv: bool(lo - slack <= overall <= hi + slack) for lv, (lo, hi) in ivs.items()}
    return GroupedIntervals(groups, means, mean, std, overall, ivs, accepted)
