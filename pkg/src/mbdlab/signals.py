"""Debiased ranking signals and the bucketized-counting baselines they replace.

RPS standardizes a prediction against its cohort, ``(p - mu) / sigma``; the
value model folds it back into the final score by boosting, filtering or
reweighting.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtr

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
STRATEGIES = ("none", "additive", "filter", "reweight")


class SparsityError(ValueError):
    """Raised when a correction needs statistics from an empty bucket."""


def _finite(name: str, *arrays) -> list[np.ndarray]:
    out = [np.asarray(a, dtype=float) for a in arrays]
    for a in out:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}: non-finite input")
    return out


def rps(p, mu, sigma, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Relative preference score ``(p - mu) / max(sigma, floor)``."""
    p, mu, sigma = _finite("rps", p, mu, sigma)
    return (p - mu) / np.maximum(sigma, floor)


def rps_from_estimate(p, est, floor: float = SIGMA_FLOOR) -> np.ndarray:
    return rps(p, est.mu, est.sigma, floor)


def percentile(z) -> np.ndarray:
    """Standard normal CDF of an RPS value."""
    (z,) = _finite("percentile", z)
    return ndtr(z)


@dataclass
class VmPolicy:
    """Value-model weights plus the RPS integration strategy.

    Thresholds are in RPS units: ``tau_high`` is the boost threshold (alpha),
    ``tau_low`` the filter threshold (minus beta).
    """

    weights: tuple[float, ...] = (1.0,)
    strategy: str = "none"
    tau_high: float = 1.5
    tau_low: float = -1.5
    boost_weight: float = 1.0
    reweight_alpha: float = 1.0
    reweight_form: str = "power"  # power | sigmoid
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 1.0 <= self.tau_high <= 3.0:
            raise ValueError(f"tau_high must lie in [1, 3] sigma, got {self.tau_high}")
        if self.tau_low > 0:
            raise ValueError(f"tau_low is a below-mean threshold and must be <= 0, got {self.tau_low}")
        if self.boost_weight < 0:
            raise ValueError("boost_weight must be >= 0")
        if self.reweight_form not in ("power", "sigmoid"):
            raise ValueError(f"unknown reweight form {self.reweight_form!r}")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be > 0")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.reweight_alpha):
            raise ValueError("policy weights must be finite")


def vm_score(predictions, policy: VmPolicy) -> np.ndarray:
    """``S = sum_t w_t * y_t``; ``predictions`` is a sequence of per-task arrays."""
    preds = [np.asarray(p, dtype=float) for p in predictions]
    if len(preds) != len(policy.weights):
        raise ValueError(f"{len(preds)} task predictions for {len(policy.weights)} weights")
    return sum((w * p for w, p in zip(policy.weights, preds)), np.zeros_like(preds[0]))


def integrate(score, z, policy: VmPolicy, p=None, mu=None) -> np.ndarray:
    """Fold an RPS signal ``z`` into the value-model score.

    The power reweight form needs ``p`` and ``mu``; where ``mu <= 0`` it is not
    defined and those rows use ``sigmoid(z)`` instead.
    """
    score, z = _finite("integrate", score, z)
    if policy.strategy == "none":
        return score.copy()
    if policy.strategy == "additive":
        return score + policy.boost_weight * np.maximum(0.0, z - policy.tau_high)
    if policy.strategy == "filter":
        return score * (z >= policy.tau_low)
    if policy.reweight_form == "sigmoid":
        return score * expit(z)
    if p is None or mu is None:
        raise ValueError("power reweighting needs p and mu")
    p, mu = _finite("integrate", p, mu)
    bad = (mu <= 0) | (p < 0)
    if np.any(bad):
        log.warning("power reweight undefined for %d rows with mu <= 0 or p < 0; using sigmoid(z)", int(bad.sum()))
    ratio = np.where(bad, 1.0, p / np.where(bad, 1.0, mu))
    return score * np.where(bad, expit(z), ratio ** policy.reweight_alpha)


# ------------------------------------------------------------------ bucket tables


def nearest_rank(values, q: float) -> float:
    """Smallest value with at least ``q`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return float("nan")
    rank = int(np.ceil(q * len(v)))
    return float(v[max(rank, 1) - 1])


@dataclass
class BucketTable:
    attribute: str
    edges: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    p95: np.ndarray
    snapshot: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if self.edges.ndim != 1 or len(self.edges) < 2 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("bucket edges must be a strictly increasing list of at least two values")

    @property
    def n_buckets(self) -> int:
        return len(self.edges) - 1

    def bucket_of(self, values) -> np.ndarray:
        """Bucket index per value; values outside the edges land in the end buckets."""
        idx = np.searchsorted(self.edges, np.asarray(values, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_buckets - 1)

    def defined(self) -> np.ndarray:
        return self.count >= 1

    def stats(self, values) -> tuple[np.ndarray, np.ndarray]:
        b = self.bucket_of(values)
        if not np.all(self.count[b] >= 1):
            empty = sorted(set(int(k) for k in b[self.count[b] < 1]))
            raise SparsityError(f"bucket(s) {empty} of {self.attribute!r} have no data")
        return self.mean[b], self.var[b]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attribute", "lo", "hi", "count", "mean", "variance", "p95", "snapshot"])
            for k in range(self.n_buckets):
                w.writerow([self.attribute, repr(float(self.edges[k])), repr(float(self.edges[k + 1])),
                            int(self.count[k]), repr(float(self.mean[k])), repr(float(self.var[k])),
                            repr(float(self.p95[k])), self.snapshot])

    @classmethod
    def from_csv(cls, path) -> "BucketTable":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty bucket table")
        edges = [float(r["lo"]) for r in rows] + [float(rows[-1]["hi"])]
        col = lambda k: np.array([float(r[k]) for r in rows])
        return cls(rows[0]["attribute"], np.array(edges), col("count").astype(int), col("mean"), col("variance"),
                   col("p95"), int(rows[0]["snapshot"]))


def build_bucket_table(attribute_values, targets, edges, attribute: str = "attribute", snapshot: int = 0) -> BucketTable:
    """Per-bucket count, mean, population variance and nearest-rank 95th percentile of ``targets``."""
    x = np.asarray(attribute_values, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"attribute {x.shape} and target {y.shape} lengths differ")
    table = BucketTable(attribute, np.asarray(edges, dtype=float), np.zeros(0, int), np.zeros(0), np.zeros(0),
                        np.zeros(0), snapshot)
    b = table.bucket_of(x)
    k = table.n_buckets
    count = np.bincount(b, minlength=k)
    mean = np.full(k, np.nan)
    var = np.full(k, np.nan)
    p95 = np.full(k, np.nan)
    for j in np.flatnonzero(count):
        v = y[b == j]
        mean[j] = v.mean()
        var[j] = np.mean((v - mean[j]) ** 2)
        p95[j] = nearest_rank(v, 0.95)
    table.count, table.mean, table.var, table.p95 = count, mean, var, p95
    return table


def naive_correction(y, table: BucketTable, values, form: str = "mean", floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Bucket-normalized signal: ``y - mu_k`` or ``(y - mu_k) / sigma_k``."""
    if form not in ("mean", "z"):
        raise ValueError(f"form must be 'mean' or 'z', got {form!r}")
    mu, var = table.stats(values)
    y = np.asarray(y, dtype=float)
    return y - mu if form == "mean" else (y - mu) / np.maximum(np.sqrt(var), floor)


# ------------------------------------------------------------------ threshold baselines


def nts(pred_ts, pskip, avg7d, c: float = 1.0) -> np.ndarray:
    """``sigmoid(c * (pred_ts * (1 - pskip) - avg7d))``."""
    pskip = np.asarray(pskip, dtype=float)
    if np.any((pskip < 0) | (pskip > 1)):
        raise ValueError("pskip must lie in [0, 1]")
    if not c > 0:
        raise ValueError("c must be > 0")
    return expit(c * (np.asarray(pred_ts, dtype=float) * (1.0 - pskip) - np.asarray(avg7d, dtype=float)))


def vvp95(watch, table: BucketTable, values) -> np.ndarray:
    """1 where watch time reaches its duration bucket's 95th-percentile threshold."""
    b = table.bucket_of(values)
    if not np.all(table.count[b] >= 1):
        raise SparsityError(f"empty bucket in {table.attribute!r}")
    return (np.asarray(watch, dtype=float) >= table.p95[b]).astype(float)


def vvp95_nts(watch, pskip, avg7d, table: BucketTable, values, c: float = 1.0) -> np.ndarray:
    return vvp95(watch, table, values) * nts(watch, pskip, avg7d, c)
