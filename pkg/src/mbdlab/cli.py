"""Config-driven pipeline: gen-data -> train-ranker -> train-mbd -> rerank -> report.

Every stage reads its inputs from and writes its outputs to ``--out``; each
artifact carries a provenance line with the config hash and seed. ``all`` runs
the stages in order.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import signals as sig
from .mbd import BiasFeatureSet, BranchConfig, MbdBranch, build_branch, train_branch
from .numerics import NumericalError
from .ranker import RankerConfig, RankerModel, TaskSpec, build_ranker, train
from .synthenv import Dataset, GeneratorConfig, column_groups, feature_columns, generate, linear_drift

log = logging.getLogger("mbdlab")

STAGES = ("gen-data", "train-ranker", "train-mbd", "rerank", "report")
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4
REPORT_FILES = ("table1_signal_quality.tsv", "table2_debias_correlation.tsv", "table3_efficiency.tsv",
                "fig_bucket_fit.tsv", "fig_staleness.tsv", "summary.json")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class RerankConfig:
    n_requests: int = 200
    n_candidates: int = 20
    top_k: int = 5
    debias_task: str = "watch_time"
    branch: str = "duration"


@dataclass
class StalenessConfig:
    enabled: bool = True
    n_interactions: int = 30_000
    n_indices: int = 30
    drift_end: float = 0.8
    steps_initial: int = 1500
    steps_per_index: int = 200


@dataclass
class EvalConfig:
    fit_edges: list[float] = field(default_factory=lambda: [2.0, 3.6, 6.3, 11.3, 20.0, 36.0, 63.0, 113.0, 200.0,
                                                            356.0, 600.0])
    cluster_buckets: int = 3
    vvp_edges: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 30.0, 45.0, 60.0, 90.0, 180.0,
                                                            300.0, 600.0])
    vvp_source: str = "predicted"  # predicted | realized
    nts_c: float = 0.1
    pskip: float = 0.0
    efficiency_edges: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 30.0, 45.0, 60.0, 90.0,
                                                                   180.0, 300.0, 600.0])
    staleness: StalenessConfig = field(default_factory=StalenessConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    test_fraction: float = 0.2
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    tasks: list[TaskSpec] = field(default_factory=list)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    branches: list[BranchConfig] = field(default_factory=list)
    policy: sig.VmPolicy = field(default_factory=sig.VmPolicy)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "generator": self.generator.to_dict(),
            "tasks": [asdict(t) for t in self.tasks],
            "ranker": {**asdict(self.ranker), "trunk": list(self.ranker.trunk), "head": list(self.ranker.head)},
            "branches": [b.to_dict() for b in self.branches],
            "policy": {**asdict(self.policy), "weights": list(self.policy.weights)},
            "rerank": asdict(self.rerank),
            "evaluation": asdict(self.evaluation),
            "out": self.out,
        }

    def digest(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def provenance(self) -> str:
        return f"config_sha256={self.digest()} seed={self.seed}"

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def branch(self, task: str, name: str) -> BranchConfig:
        for b in self.branches:
            if b.task == task and b.feature_set.name == name:
                return b
        raise KeyError(f"{task}/{name}")


def _build(cls, payload, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(payload: dict, seed: int | None = None) -> ExperimentConfig:
    """Validate a config mapping; every error names the offending field path."""
    if not isinstance(payload, dict):
        raise ConfigError("<root>: expected an object")
    payload = copy.deepcopy(payload)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    cfg = ExperimentConfig()
    if seed is not None:
        payload["seed"] = seed
    cfg.seed = payload.get("seed", 0)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {cfg.seed!r}")
    cfg.test_fraction = payload.get("test_fraction", 0.2)
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError(f"test_fraction: must lie in (0, 1), got {cfg.test_fraction!r}")
    cfg.out = payload.get("out", cfg.out)

    gen = dict(payload.get("generator", {}))
    gen.setdefault("seed", cfg.seed)
    cfg.generator = _build(GeneratorConfig, gen, "generator")

    tasks = payload.get("tasks", [asdict(TaskSpec("watch_time", "regression", "log1p")), asdict(TaskSpec("like", "binary")),
                                  asdict(TaskSpec("loop", "binary", observed_where="item_format_video"))])
    cfg.tasks = [_build(TaskSpec, t, f"tasks[{i}]") for i, t in enumerate(tasks)]
    names = [t.name for t in cfg.tasks]
    for i, t in enumerate(cfg.tasks):
        if t.name not in ("watch_time", "like", "loop"):
            raise ConfigError(f"tasks[{i}].name: no label {t.name!r} in the generated data")
    if len(set(names)) != len(names):
        raise ConfigError("tasks: duplicate task names")

    r = dict(payload.get("ranker", {}))
    r.setdefault("seed", cfg.seed)
    cfg.ranker = _build(RankerConfig, r, "ranker")
    cfg.ranker.trunk, cfg.ranker.head = tuple(cfg.ranker.trunk), tuple(cfg.ranker.head)

    columns = feature_columns(cfg.generator.latent_dim)
    groups = column_groups(columns)
    for i, t in enumerate(cfg.tasks):
        if t.observed_where is not None and t.observed_where not in columns:
            raise ConfigError(f"tasks[{i}].observed_where: unknown column {t.observed_where!r}")
    cfg.branches = []
    for i, b in enumerate(payload.get("branches", [])):
        path = f"branches[{i}]"
        b = dict(b)
        fs = b.pop("feature_set", None)
        if not isinstance(fs, dict) or "name" not in fs or "columns" not in fs:
            raise ConfigError(f"{path}.feature_set: expected {{name, columns}}")
        for j, c in enumerate(fs["columns"]):
            if c not in columns and c not in groups:
                raise ConfigError(f"{path}.feature_set.columns[{j}]: unknown column {c!r}")
        if b.get("task") not in names:
            raise ConfigError(f"{path}.task: unknown task {b.get('task')!r}")
        b.setdefault("seed", cfg.seed)
        try:
            feature_set = BiasFeatureSet(fs["name"], tuple(fs["columns"]))
            feature_set.expand(columns)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}.feature_set: {exc}") from None
        cfg.branches.append(_build(BranchConfig, {**b, "feature_set": feature_set}, path))
    keys = [(b.task, b.feature_set.name) for b in cfg.branches]
    if len(set(keys)) != len(keys):
        raise ConfigError("branches: duplicate (task, feature_set.name) pair")

    pol = dict(payload.get("policy", {}))
    pol.setdefault("weights", [1.0] * len(cfg.tasks))
    cfg.policy = _build(sig.VmPolicy, pol, "policy")
    if len(cfg.policy.weights) != len(cfg.tasks):
        raise ConfigError(f"policy.weights: {len(cfg.policy.weights)} weights for {len(cfg.tasks)} tasks")

    cfg.rerank = _build(RerankConfig, payload.get("rerank", {}), "rerank")
    if cfg.rerank.top_k < 1 or cfg.rerank.n_candidates < cfg.rerank.top_k:
        raise ConfigError("rerank.top_k: must satisfy 1 <= top_k <= n_candidates")
    if cfg.branches:
        try:
            cfg.branch(cfg.rerank.debias_task, cfg.rerank.branch)
        except KeyError:
            raise ConfigError(f"rerank.branch: no branch {cfg.rerank.debias_task}/{cfg.rerank.branch}") from None

    evd = dict(payload.get("evaluation", {}))
    st = _build(StalenessConfig, evd.pop("staleness", {}), "evaluation.staleness")
    cfg.evaluation = _build(EvalConfig, {**evd, "staleness": st}, "evaluation")
    if st.n_indices < 2 or not st.drift_end > 0:
        raise ConfigError("evaluation.staleness: need n_indices >= 2 and drift_end > 0")
    for name in ("fit_edges", "vvp_edges", "efficiency_edges"):
        e = np.asarray(getattr(cfg.evaluation, name), dtype=float)
        if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
            raise ConfigError(f"evaluation.{name}: edges must be strictly increasing")
    if cfg.evaluation.vvp_source not in ("realized", "predicted"):
        raise ConfigError(f"evaluation.vvp_source: expected realized or predicted")
    if not cfg.evaluation.nts_c > 0 or not 0.0 <= cfg.evaluation.pskip <= 1.0:
        raise ConfigError("evaluation.nts_c / evaluation.pskip out of range")
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(payload, seed)


def default_config_path() -> Path:
    return Path(str(resources.files("mbdlab") / "configs" / "default.json"))


# ------------------------------------------------------------------ artifacts


class Paths:
    def __init__(self, out):
        self.out = Path(out)
        self.data = self.out / "data"
        self.models = self.out / "models"
        self.rerank = self.out / "rerank"
        self.reports = self.out / "reports"

    def train(self):
        return self.data / "train.csv"

    def test(self):
        return self.data / "test.csv"

    def ranker(self):
        return self.models / "ranker.json"

    def branch(self, b: BranchConfig):
        return self.models / f"mbd_{b.task}_{b.feature_set.name}.json"


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run the {stage!r} stage first")
    return path


def _prov_dict(cfg: ExperimentConfig, stage: str) -> dict:
    return {"config_sha256": cfg.digest(), "seed": cfg.seed, "stage": stage}


# ------------------------------------------------------------------ stages


def stage_gen_data(cfg: ExperimentConfig, paths: Paths) -> None:
    data = generate(cfg.generator)
    train_set, test_set = data.split(cfg.test_fraction, cfg.seed)
    paths.data.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance() + " stage=gen-data"
    train_set.to_csv(paths.train(), prov)
    test_set.to_csv(paths.test(), prov)
    log.info("generated %d train / %d test interactions", len(train_set), len(test_set))


def _load_data(paths: Paths) -> tuple[Dataset, Dataset]:
    return Dataset.from_csv(_need(paths.train(), "gen-data")), Dataset.from_csv(_need(paths.test(), "gen-data"))


def stage_train_ranker(cfg: ExperimentConfig, paths: Paths) -> None:
    train_set, _ = _load_data(paths)
    model = build_ranker(train_set, cfg.tasks, cfg.ranker)
    trace = train(model, train_set)
    paths.models.mkdir(parents=True, exist_ok=True)
    model.save(paths.ranker(), {**_prov_dict(cfg, "train-ranker"), "final_loss": trace.epoch_loss[-1]})


def _load_ranker(paths: Paths) -> RankerModel:
    return RankerModel.load(_need(paths.ranker(), "train-ranker"))


def stage_train_mbd(cfg: ExperimentConfig, paths: Paths) -> None:
    train_set, _ = _load_data(paths)
    ranker = _load_ranker(paths)
    for bc in cfg.branches:
        branch = build_branch(bc, ranker)
        trace = train_branch(branch, ranker, train_set)
        branch.save(paths.branch(bc), {**_prov_dict(cfg, "train-mbd"), "final_loss": trace.loss[-1],
                                       "skipped": trace.skipped})


def _load_branches(cfg: ExperimentConfig, paths: Paths) -> dict[tuple[str, str], MbdBranch]:
    return {(b.task, b.feature_set.name): MbdBranch.load(_need(paths.branch(b), "train-mbd")) for b in cfg.branches}


CANDIDATE_FIELDS = ("request_id", "candidate_id", "user_id", "item_id", "item_duration")


def build_candidates(cfg: ExperimentConfig, test_set: Dataset, ranker: RankerModel, branch: MbdBranch) -> list[dict]:
    """Group held-out rows into per-user candidate lists carrying ranker predictions and x'."""
    rc = cfg.rerank
    pred = ranker.predict(test_set.X)
    signal = branch.signal_from_prediction(pred)
    xp = branch.project(test_set.X)
    dur = test_set.col("item_duration")
    rows, request = [], 0
    for user in np.unique(test_set.user_id):
        idx = np.flatnonzero(test_set.user_id == user)
        for start in range(0, len(idx) - rc.n_candidates + 1, rc.n_candidates):
            if request >= rc.n_requests:
                return rows
            for i in idx[start:start + rc.n_candidates]:
                row = {"request_id": request, "candidate_id": int(i), "user_id": int(test_set.user_id[i]),
                       "item_id": int(test_set.item_id[i]), "item_duration": float(dur[i])}
                for t in cfg.tasks:
                    row[f"pred_{t.name}"] = float(pred[t.name][i])
                row["signal"] = float(signal[i])
                for j in range(xp.shape[1]):
                    row[f"xp_{j}"] = float(xp[i, j])
                row["label_watch_time"] = float(test_set.watch_time[i])
                rows.append(row)
            request += 1
    return rows


def candidate_columns(cfg: ExperimentConfig, xp_dim: int) -> list[str]:
    return [*CANDIDATE_FIELDS, *(f"pred_{t.name}" for t in cfg.tasks), "signal",
            *(f"xp_{j}" for j in range(xp_dim)), "label_watch_time"]


def write_csv(path: Path, columns: list[str], rows: list[dict], provenance: str) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in columns])


ID_FIELDS = ("request_id", "candidate_id", "user_id", "item_id", "rank")


def read_rows(path: Path, columns: list[str]) -> tuple[list[dict], int]:
    """Parse a provenance-headed CSV; malformed rows are skipped and counted."""
    rows, skipped = [], 0
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or any(c not in header for c in columns):
        raise ValueError(f"{path}: header must contain {columns}")
    pos = {c: header.index(c) for c in columns}
    for raw in reader:
        try:
            if len(raw) != len(header):
                raise ValueError("wrong field count")
            row = {c: float(raw[pos[c]]) for c in columns}
            if not all(np.isfinite(v) for v in row.values()):
                raise ValueError("non-finite field")
            for c in ID_FIELDS:
                if c in row:
                    row[c] = int(row[c])
            rows.append(row)
        except ValueError:
            skipped += 1
    if skipped:
        log.warning("skipped %d malformed rows in %s", skipped, path)
    return rows, skipped


def rerank(rows: list[dict], policy: sig.VmPolicy, task_names: list[str], mu, sigma) -> list[dict]:
    """Score, adjust and sort candidates within each request.

    ``mu``/``sigma`` are the branch estimates per row. Sort key: adjusted score
    descending, then candidate id ascending. Filtered candidates (adjusted
    score zeroed by the filter strategy) are dropped from the output.
    """
    if not rows:
        return []
    preds = [np.array([r[f"pred_{t}"] for r in rows]) for t in task_names]
    s = sig.vm_score(preds, policy)
    p = np.array([r["signal"] for r in rows])
    mu = np.asarray(mu, dtype=float)
    z = sig.rps(p, mu, sigma, policy.sigma_floor)
    adj = sig.integrate(s, z, policy, p=p, mu=mu)
    keep = z >= policy.tau_low if policy.strategy == "filter" else np.ones(len(rows), dtype=bool)
    out = []
    requests = np.array([r["request_id"] for r in rows])
    for req in np.unique(requests):
        idx = [i for i in np.flatnonzero(requests == req) if keep[i]]
        order = sorted(idx, key=lambda i: (-adj[i], rows[i]["candidate_id"]))
        for rank, i in enumerate(order):
            out.append({"request_id": int(req), "rank": rank, "candidate_id": rows[i]["candidate_id"],
                        "s_final": float(s[i]), "rps": float(z[i]), "adjusted": float(adj[i]),
                        "item_duration": rows[i]["item_duration"], "label_watch_time": rows[i]["label_watch_time"]})
    return out


def rerank_with_branch(rows: list[dict], policy: sig.VmPolicy, task_names: list[str], branch: MbdBranch) -> list[dict]:
    if not rows:
        return []
    xp = np.array([[r[f"xp_{j}"] for j in range(branch.input_dim)] for r in rows])
    est = branch.estimate(xp)
    return rerank(rows, policy, task_names, est.mu, est.sigma)


RANKED_COLUMNS = ["request_id", "rank", "candidate_id", "s_final", "rps", "adjusted", "item_duration",
                  "label_watch_time"]


def stage_rerank(cfg: ExperimentConfig, paths: Paths) -> None:
    _, test_set = _load_data(paths)
    ranker = _load_ranker(paths)
    branch = _load_branches(cfg, paths)[(cfg.rerank.debias_task, cfg.rerank.branch)]
    paths.rerank.mkdir(parents=True, exist_ok=True)
    columns = candidate_columns(cfg, branch.input_dim)
    prov = cfg.provenance() + " stage=rerank"
    write_csv(paths.rerank / "candidates.csv", columns, build_candidates(cfg, test_set, ranker, branch), prov)
    rows, _ = read_rows(paths.rerank / "candidates.csv", columns)
    names = [t.name for t in cfg.tasks]
    control = sig.VmPolicy(**{**asdict(cfg.policy), "strategy": "none"})
    write_csv(paths.rerank / "ranked_control.csv", RANKED_COLUMNS, rerank_with_branch(rows, control, names, branch),
              prov)
    write_csv(paths.rerank / "ranked_treatment.csv", RANKED_COLUMNS,
              rerank_with_branch(rows, cfg.policy, names, branch), prov)


# ------------------------------------------------------------------ report


def _ranked(path: Path) -> list[dict]:
    return read_rows(_need(path, "rerank"), RANKED_COLUMNS)[0]


def exposure_by_bucket(ranked: list[dict], edges, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    table = sig.BucketTable("item_duration", np.asarray(edges, dtype=float), np.zeros(0), np.zeros(0), np.zeros(0),
                            np.zeros(0))
    shown = [r for r in ranked if r["rank"] < top_k]
    b = table.bucket_of([r["item_duration"] for r in shown])
    vv = np.bincount(b, minlength=table.n_buckets).astype(float)
    wt = np.bincount(b, weights=[r["label_watch_time"] for r in shown], minlength=table.n_buckets)
    return vv, wt


def _bucket_labels(edges) -> list[str]:
    return [f"{edges[i]:g}-{edges[i + 1]:g}s" for i in range(len(edges) - 1)]


def item_average(train_set: Dataset, test_set: Dataset) -> np.ndarray:
    """Per-item mean training watch time (global mean for unseen items)."""
    n = int(max(train_set.item_id.max(), test_set.item_id.max())) + 1
    s = np.bincount(train_set.item_id, weights=train_set.watch_time, minlength=n)
    c = np.bincount(train_set.item_id, minlength=n)
    seen = c[test_set.item_id] > 0
    return np.where(seen, s[test_set.item_id] / np.maximum(c[test_set.item_id], 1), train_set.watch_time.mean())


def stage_report(cfg: ExperimentConfig, paths: Paths) -> dict:
    train_set, test_set = _load_data(paths)
    ranker = _load_ranker(paths)
    branches = _load_branches(cfg, paths)
    e = cfg.evaluation
    paths.reports.mkdir(parents=True, exist_ok=True)
    header = cfg.provenance() + " stage=report"
    pred = ranker.predict(test_set.X)
    dur_tr, dur = train_set.col("item_duration"), test_set.col("item_duration")
    summary = {"provenance": _prov_dict(cfg, "report"), "n_train": len(train_set), "n_test": len(test_set)}

    # table1_signal_quality: per debiased task
    t1_rows, t1 = [], {}
    fit_rows = []
    for (task, fs_name), branch in branches.items():
        spec = ranker.task(task)
        keep_tr = spec.observed(train_set.columns, train_set.X)
        keep = spec.observed(test_set.columns, test_set.X)
        p = branch.signal_from_prediction(pred)[keep]
        est_all = branch.estimate_features(test_set.X)
        est = type(est_all)(est_all.mu[keep], est_all.var[keep])
        y_tr = ev.transformed_labels(train_set.label(task)[keep_tr], spec.kind, branch.space, spec.transform)
        y_te = ev.transformed_labels(test_set.label(task)[keep], spec.kind, branch.space, spec.transform)
        cluster = ev.cluster_baseline(dur_tr[keep_tr], y_tr, e.cluster_buckets)
        c_mu, c_var = cluster.stats(dur[keep])
        natural = pred[task][keep], spec.target(test_set.label(task)[keep])
        rep = ev.signal_quality(p, est, c_mu, c_var, ranker_pair=natural, attribute=dur[keep],
                                align_edges=e.fit_edges, align_labels=y_te)
        row = {"task": task, "branch": fs_name, "space": branch.space, "n": int(keep.sum())}
        row.update({k: m.value for k, m in rep.metrics.items()})
        t1_rows.append(row)
        t1[f"{task}/{fs_name}"] = rep.to_dict()
        for r in ev.distribution_fit_by_bucket(dur[keep], p, est, e.fit_edges):
            fit_rows.append({"task": task, "branch": fs_name, **r})
    ev.write_table(paths.reports / "table1_signal_quality.tsv",
                   ["task", "branch", "space", "n", "bias_p_y", "bias_mu_p", "nll_cluster", "nll_mbd", "rho_p_mu",
                    "rho_sigma_rows", "rho_sigma_buckets"], t1_rows, header)
    ev.write_table(paths.reports / "fig_bucket_fit.tsv",
                   ["task", "branch", "lo", "hi", "count", "defined", "mean_p", "var_p", "mean_mu", "mean_var"],
                   fit_rows, header)
    summary["table1"] = t1

    # table2_debias_correlation: each signal against duration
    vvp_table = sig.build_bucket_table(dur_tr, train_set.watch_time, e.vvp_edges, "item_duration")
    pred_ts = np.expm1(pred["watch_time"]) if "watch_time" in pred else None
    task_signals = {}
    for (task, fs_name), branch in branches.items():
        spec = ranker.task(task)
        keep = spec.observed(test_set.columns, test_set.X)
        y = test_set.label(task)
        p = branch.signal_from_prediction(pred)
        est = branch.estimate_features(test_set.X)
        s = {"y": y, "log_y": np.log1p(y) if spec.kind == "regression" else None, "p": pred[task],
             "rps": sig.rps(p, est.mu, est.sigma)}
        if task == "watch_time":
            watch = y if e.vvp_source == "realized" else pred_ts
            vvp = sig.vvp95(watch, vvp_table, dur)
            s["vvp95"] = vvp
            s["vvp95_nts"] = vvp * sig.nts(pred_ts, e.pskip, item_average(train_set, test_set), e.nts_c)
        task_signals[f"{task}/{fs_name}"] = {k: np.where(keep, v, np.nan) for k, v in s.items() if v is not None}
    t2 = ev.debias_correlation_report(dur, task_signals)
    ev.write_table(paths.reports / "table2_debias_correlation.tsv", ["task", "signal", "rho", "n"],
                   t2.series["rows"], header)
    summary["table2"] = {k: _round(m.value) for k, m in t2.metrics.items()}

    # table3_efficiency: traffic shift by duration bucket after reranking, plus the reference-shift arithmetic
    control = _ranked(paths.rerank / "ranked_control.csv")
    treat = _ranked(paths.rerank / "ranked_treatment.csv")
    cv, cw = exposure_by_bucket(control, e.efficiency_edges, cfg.rerank.top_k)
    tv, tw = exposure_by_bucket(treat, e.efficiency_edges, cfg.rerank.top_k)
    t3_rows = [{"source": "synthetic", "bucket": r.label, "d_wt_pct": r.d_wt, "d_vv_pct": r.d_vv,
                "ratio_pct": r.ratio, "flag": r.flag or "-"}
               for r in ev.efficiency_analysis(_bucket_labels(e.efficiency_edges), cv, cw, tv, tw)]
    for label, d_wt, d_vv, reported in ev.REFERENCE_LENGTH_SHIFTS:
        point, interval = ev.matches_reported(d_wt, d_vv, reported)
        t3_rows.append({"source": "reference", "bucket": label, "d_wt_pct": d_wt, "d_vv_pct": d_vv,
                        "ratio_pct": ev.efficiency_ratio(d_wt, d_vv),
                        "flag": f"reported={reported} point={int(point)} interval={int(interval)}"})
    ev.write_table(paths.reports / "table3_efficiency.tsv",
                   ["source", "bucket", "d_wt_pct", "d_vv_pct", "ratio_pct", "flag"], t3_rows, header)
    summary["table3"] = [{k: _round(v) for k, v in r.items()} for r in t3_rows]

    # staleness under a watch-time down-drift
    st = cfg.evaluation.staleness
    st_rows = []
    if st.enabled:
        res = run_staleness(cfg)
        st_rows = res.rows()
        summary["staleness"] = {"final_frozen": _round(res.frozen[-1]), "final_mbd": _round(res.mbd[-1])}
    ev.write_table(paths.reports / "fig_staleness.tsv", ["index", "multiplier", "frozen_mean_z", "mbd_mean_z", "n"],
                   st_rows, header)
    ev.write_json(paths.reports / "summary.json", summary)
    return summary


def _round(v):
    return ev._round(v)


def run_staleness(cfg: ExperimentConfig) -> ev.StalenessResult:
    st = cfg.evaluation.staleness
    schedule = linear_drift(1.0, st.drift_end, st.n_indices)
    gen = GeneratorConfig.from_dict({**cfg.generator.to_dict(), "n_interactions": st.n_interactions,
                                     "drift": schedule, "seed": cfg.generator.seed + 1})
    data = generate(gen)
    dur = data.col("item_duration")
    xp = np.log(dur)[:, None]
    xp = (xp - xp.mean()) / xp.std()
    bc = BranchConfig("watch_time", BiasFeatureSet("duration", ("item_length",)), trunk=(16, 16),
                      target="label", steps=st.steps_initial, seed=cfg.seed)
    return ev.staleness_experiment(dur, xp, np.log1p(data.watch_time), data.timestamp, schedule,
                                   cfg.evaluation.fit_edges, bc, steps_per_index=st.steps_per_index,
                                   initial_steps=st.steps_initial)


# ------------------------------------------------------------------ entry point

STAGE_FUNCS = {"gen-data": stage_gen_data, "train-ranker": stage_train_ranker, "train-mbd": stage_train_mbd,
               "rerank": stage_rerank, "report": stage_report}


def run(command: str, config_path=None, seed: int | None = None, out=None) -> int:
    try:
        cfg = load_config(config_path or default_config_path(), seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    paths = Paths(out or cfg.out)
    stages = STAGES if command == "all" else (command,)
    try:
        for stage in stages:
            log.info("stage %s", stage)
            STAGE_FUNCS[stage](cfg, paths)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mbdlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", nargs="?", choices=(*STAGES, "all"), help="stage to run")
    parser.add_argument("--stage", choices=(*STAGES, "all"), help="alternative to the positional command")
    parser.add_argument("--config", help="experiment config (JSON); defaults to the bundled config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    command = args.stage or args.command
    if command is None:
        parser.error("give a command or --stage")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(command, args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
