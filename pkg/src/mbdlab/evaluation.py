"""Offline metrics, debias-correlation and fit tables, efficiency ratios, staleness runs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import signals as sig
from .mbd import BranchConfig, MbdBranch, fit_moments, logit_target

# duration buckets, %dWT, %dVV and the reported efficiency ratio of a live length-debiasing launch
REFERENCE_LENGTH_SHIFTS = (
    ("0-5s", -0.64, -0.83, "77"),
    ("5-10s", -0.75, -0.80, "94"),
    ("10-15s", -0.62, -0.77, "81"),
    ("15-30s", -0.19, -0.40, "47"),
    ("30-45s", 0.43, 0.12, "350"),
    ("45-60s", 0.60, 0.27, "222"),
    ("60-90s", 0.77, 0.39, "198"),
    ("90-180s", 0.85, 0.41, "209"),
    ("3-5m", 1.05, 0.55, "191"),
    ("5-10m", 0.73, 0.13, "562"),
    ("10-30m", 0.31, -0.23, "-135"),
    ("30-60m", 0.53, 0.25, ">200"),
    ("60m+", -0.65, -0.46, "143"),
)


# ------------------------------------------------------------------ scalar metrics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if len(a) == 0:
        raise ValueError("empty series")
    return a, b


def bias(a, b) -> float:
    """Mean of ``a - b``."""
    a, b = _pair(a, b)
    return float(np.mean(a - b))


def gaussian_nll(p, mu, var) -> float:
    """Mean of ``(p - mu)^2 / (2 var) + log(var) / 2``."""
    p, mu = _pair(p, mu)
    var = np.broadcast_to(np.asarray(var, dtype=float), p.shape)
    if np.any(~(var > 0)):
        raise ValueError("gaussian_nll needs var > 0 everywhere")
    return float(np.mean((p - mu) ** 2 / (2 * var) + 0.5 * np.log(var)))


def pearson(a, b) -> float | None:
    """Pearson correlation, or ``None`` when either series is constant or too short."""
    a, b = _pair(a, b)
    if len(a) < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(np.dot(da, da))), math.sqrt(float(np.dot(db, db)))
    if na == 0.0 or nb == 0.0 or not np.isfinite(na * nb):
        return None
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


# ------------------------------------------------------------------ report container


@dataclass
class Metric:
    value: float | None
    n: int

    @property
    def defined(self) -> bool:
        return self.value is not None and bool(np.isfinite(self.value))


@dataclass
class MetricReport:
    name: str
    metrics: dict[str, Metric] = field(default_factory=dict)
    series: dict[str, list[dict]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, key: str, value, n: int) -> None:
        self.metrics[key] = Metric(None if value is None else float(value), int(n))

    def value(self, key: str) -> float | None:
        return self.metrics[key].value

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "metrics": {k: {"value": _round(m.value), "n": m.n, "defined": m.defined} for k, m in self.metrics.items()},
            "series": {k: [{c: _round(v) for c, v in row.items()} for row in rows] for k, rows in self.series.items()},
            "provenance": self.provenance,
        }


def _round(v, digits: int = 4):
    if isinstance(v, (bool, np.bool_)) or v is None or isinstance(v, str):
        return v if not isinstance(v, np.bool_) else bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    if not np.isfinite(v):
        return None
    r = round(v, digits)
    return 0.0 if r == 0 else r


def _fmt(v) -> str:
    v = _round(v)
    if v is None:
        return "undefined"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_table(path, columns: list[str], rows: list[dict], header: str | None = None) -> None:
    """Tab-separated table; floats rounded to 4 decimals, undefined values spelled out."""
    lines = [] if header is None else [f"# {header}"]
    lines.append("\t".join(columns))
    lines += ["\t".join(_fmt(r.get(c)) for c in columns) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ cluster baseline


def quantile_edges(values, n_buckets: int) -> np.ndarray:
    """Equal-mass edges; duplicate quantiles (atoms) are merged."""
    values = np.asarray(values, dtype=float)
    edges = np.unique(np.quantile(values, np.linspace(0, 1, n_buckets + 1)))
    if len(edges) < 2:
        edges = np.array([values.min(), values.min() + 1.0])
    return edges


def cluster_baseline(attribute, labels, n_buckets: int = 3, edges=None) -> sig.BucketTable:
    """Coarse per-bucket mean and population variance of transformed labels."""
    edges = quantile_edges(attribute, n_buckets) if edges is None else edges
    return sig.build_bucket_table(attribute, labels, edges, attribute="cluster")


def transformed_labels(labels, task_kind: str, space: str, transform: str = "identity") -> np.ndarray:
    """Labels in the space the branch works in (log1p for watch time, logit for binary tasks)."""
    y = np.asarray(labels, dtype=float)
    if task_kind == "binary":
        return logit_target(y) if space == "logit" else y
    return np.log1p(y) if transform == "log1p" else y


def signal_quality(p, est, cluster_mu, cluster_var, ranker_pair=None, attribute=None, align_edges=None,
                   align_labels=None) -> MetricReport:
    """Bias, NLL and alignment metrics for one task.

    ``p``, ``est``, ``cluster_*`` live in the branch space. ``ranker_pair`` is
    (prediction, label) in the ranker's natural output space (log1p seconds or
    probability vs 0/1) and feeds only the ranker bias column. When ``align_edges`` is given, uncertainty
    alignment is also computed across those attribute buckets: mean sigma_MBD
    per bucket against the standard deviation of ``align_labels`` there.
    """
    p = np.asarray(p, dtype=float)
    rep = MetricReport("signal_quality")
    n = len(p)
    rep.add("bias_p_y", bias(*ranker_pair) if ranker_pair is not None else None, n)
    rep.add("bias_mu_p", bias(est.mu, p), n)
    rep.add("nll_cluster", gaussian_nll(p, cluster_mu, np.maximum(cluster_var, 1e-12)), n)
    rep.add("nll_mbd", gaussian_nll(p, est.mu, est.var), n)
    rep.add("rho_p_mu", pearson(p, est.mu), n)
    rep.add("rho_sigma_rows", pearson(est.sigma, np.sqrt(cluster_var)), n)
    if align_edges is not None:
        table = sig.build_bucket_table(attribute, align_labels, align_edges, attribute="align")
        b = table.bucket_of(attribute)
        ok = table.defined()
        s_mbd = np.array([est.sigma[b == k].mean() if ok[k] else np.nan for k in range(table.n_buckets)])
        s_cl = np.sqrt(table.var)
        rep.add("rho_sigma_buckets", pearson(s_mbd[ok], s_cl[ok]), int(ok.sum()))
        rep.series["alignment"] = [
            {"lo": table.edges[k], "hi": table.edges[k + 1], "count": int(table.count[k]),
             "sigma_mbd": s_mbd[k], "sigma_cluster": s_cl[k]} for k in range(table.n_buckets)]
    return rep


# ------------------------------------------------------------------ debias correlation


def debias_correlation_report(attribute, task_signals: dict[str, dict[str, np.ndarray]]) -> MetricReport:
    """rho(signal, attribute) for every (task, signal) pair."""
    rep = MetricReport("debias_correlation")
    attribute = np.asarray(attribute, dtype=float)
    rows = []
    for task, signals in task_signals.items():
        for name, values in signals.items():
            values = np.asarray(values, dtype=float)
            mask = np.isfinite(values)
            rho = pearson(values[mask], attribute[mask])
            rep.add(f"{task}/{name}", rho, int(mask.sum()))
            rows.append({"task": task, "signal": name, "rho": rho, "n": int(mask.sum())})
    rep.series["rows"] = rows
    return rep


def distribution_fit_by_bucket(attribute, p, est, edges) -> list[dict]:
    """Per-bucket empirical mean/variance of p beside the branch's mean mu and sigma^2."""
    attribute = np.asarray(attribute, dtype=float)
    p = np.asarray(p, dtype=float)
    table = sig.build_bucket_table(attribute, p, edges, attribute="fit")
    b = table.bucket_of(attribute)
    rows = []
    for k in range(table.n_buckets):
        m = b == k
        defined = bool(m.any())
        rows.append({
            "lo": table.edges[k], "hi": table.edges[k + 1], "count": int(m.sum()), "defined": defined,
            "mean_p": table.mean[k] if defined else None, "var_p": table.var[k] if defined else None,
            "mean_mu": est.mu[m].mean() if defined else None, "mean_var": est.var[m].mean() if defined else None,
        })
    return rows


# ------------------------------------------------------------------ efficiency


@dataclass
class EfficiencyRow:
    label: str
    d_wt: float | None
    d_vv: float | None
    ratio: float | None
    flag: str = ""


def efficiency_ratio(d_wt: float, d_vv: float) -> float | None:
    """Percent efficiency ``100 * dWT / dVV``; ``None`` when dVV is zero."""
    if d_vv == 0:
        return None
    return 100.0 * d_wt / d_vv


def ratio_interval(d_wt: float, d_vv: float, half_step: float = 0.005) -> tuple[float, float] | None:
    """Range of ``100 * dWT / dVV`` over inputs within ``half_step`` of the given (rounded) values."""
    lo_v, hi_v = d_vv - half_step, d_vv + half_step
    if lo_v <= 0 <= hi_v:
        return None
    corners = [100.0 * w / v for w in (d_wt - half_step, d_wt + half_step) for v in (lo_v, hi_v)]
    return min(corners), max(corners)


def matches_reported(d_wt: float, d_vv: float, reported: str, half_step: float = 0.005) -> tuple[bool, bool]:
    """(point match, interval match) of a reported integer-percent ratio.

    The point reading rounds the ratio of the printed shifts. The interval
    reading allows the printed shifts themselves to be rounded to
    ``half_step`` and the ratio to integer percent.
    """
    ratio = efficiency_ratio(d_wt, d_vv)
    if reported.startswith(">"):
        bound = float(reported[1:])
        return ratio is not None and ratio > bound, ratio is not None and ratio > bound
    target = float(reported)
    # an exact half (47.5) may have been rounded either way
    point = ratio is not None and (abs(ratio - target) < 0.5 or math.isclose(abs(ratio - target), 0.5))
    iv = ratio_interval(d_wt, d_vv, half_step)
    interval = iv is not None and iv[0] - 0.5 <= target <= iv[1] + 0.5
    return point, interval


def efficiency_analysis(labels, control_vv, control_wt, treat_vv, treat_wt) -> list[EfficiencyRow]:
    """Per-bucket percent shifts in views and watch time, and their ratio."""
    rows = []
    for i, label in enumerate(labels):
        cv, cw, tv, tw = (float(np.asarray(a)[i]) for a in (control_vv, control_wt, treat_vv, treat_wt))
        if cv <= 0 or cw <= 0:
            rows.append(EfficiencyRow(label, None, None, None, "zero control exposure"))
            continue
        d_vv = 100.0 * (tv - cv) / cv
        d_wt = 100.0 * (tw - cw) / cw
        ratio = efficiency_ratio(d_wt, d_vv)
        rows.append(EfficiencyRow(label, d_wt, d_vv, ratio, "" if ratio is not None else "zero view shift"))
    return rows


# ------------------------------------------------------------------ staleness


@dataclass
class StalenessResult:
    index: np.ndarray
    multiplier: np.ndarray
    frozen: np.ndarray
    mbd: np.ndarray
    n: np.ndarray

    def rows(self) -> list[dict]:
        return [{"index": int(i), "multiplier": m, "frozen_mean_z": f, "mbd_mean_z": g, "n": int(n)}
                for i, m, f, g, n in zip(self.index, self.multiplier, self.frozen, self.mbd, self.n)]


def staleness_experiment(attribute, xp, y, timestamp, schedule, edges, branch_config: BranchConfig,
                         steps_per_index: int = 300, initial_steps: int | None = None,
                         window: int = 1) -> StalenessResult:
    """Mean z-score of realized (transformed) labels per time index under two baselines.

    The frozen table is built once from index 0. The branch is fit on index 0,
    then refit after each index is scored on the most recent ``window``
    indices, so index t is always scored by a model that has seen only indices
    < t (index 0 is in-sample for both).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    attribute = np.asarray(attribute, dtype=float)
    y = np.asarray(y, dtype=float)
    timestamp = np.asarray(timestamp)
    n_idx = int(timestamp.max()) + 1
    first = timestamp == 0
    table = sig.build_bucket_table(attribute[first], y[first], edges, attribute="snapshot", snapshot=0)
    branch = MbdBranch(branch_config, input_dim=xp.shape[1])
    fit_moments(branch, xp[first], y[first], steps=initial_steps or branch_config.steps, seed=branch_config.seed)
    frozen, mbd, counts = np.zeros(n_idx), np.zeros(n_idx), np.zeros(n_idx, dtype=int)
    for t in range(n_idx):
        m = timestamp == t
        counts[t] = int(m.sum())
        if counts[t] == 0:
            frozen[t] = mbd[t] = np.nan
            continue
        frozen[t] = float(np.mean(sig.naive_correction(y[m], table, attribute[m], form="z")))
        est = branch.estimate(xp[m])
        mbd[t] = float(np.mean(sig.rps(y[m], est.mu, est.sigma)))
        if t > 0:
            recent = (timestamp > t - window) & (timestamp <= t)
            fit_moments(branch, xp[recent], y[recent], steps=steps_per_index, seed=branch_config.seed + t)
    schedule = np.asarray(schedule, dtype=float)[:n_idx]
    return StalenessResult(np.arange(n_idx), schedule, frozen, mbd, counts)


def oracle_rps_correlation(p, mu, sigma, attribute) -> float | None:
    return pearson(sig.rps(p, mu, sigma), attribute)

