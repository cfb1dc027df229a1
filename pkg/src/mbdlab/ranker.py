"""Multi-task point-estimation ranker: shared ReLU trunk, one head per task."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .numerics import Adam, Mlp, MlpSpec, ParamStore, Tape
from .synthenv import ONE_HOT_COLUMNS, Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # "regression" | "binary"
    transform: str = "identity"  # "identity" | "log1p"
    observed_where: str | None = None  # one-hot column gating where the label exists

    def __post_init__(self):
        if self.kind not in ("regression", "binary"):
            raise ValueError(f"task {self.name}: kind must be regression or binary, got {self.kind!r}")
        if self.transform not in ("identity", "log1p"):
            raise ValueError(f"task {self.name}: unknown transform {self.transform!r}")
        if self.kind == "binary" and self.transform != "identity":
            raise ValueError(f"task {self.name}: binary tasks take raw 0/1 labels")

    @property
    def loss(self) -> str:
        return "bce" if self.kind == "binary" else "squared_error"

    def target(self, labels: np.ndarray) -> np.ndarray:
        return np.log1p(labels) if self.transform == "log1p" else np.asarray(labels, dtype=float)

    def observed(self, columns: list[str], X: np.ndarray) -> np.ndarray:
        if self.observed_where is None:
            return np.ones(len(X), dtype=bool)
        return np.asarray(X)[:, list(columns).index(self.observed_where)] > 0.5


DEFAULT_TASKS = (
    TaskSpec("watch_time", "regression", "log1p"),
    TaskSpec("like", "binary"),
    TaskSpec("loop", "binary", observed_where="item_format_video"),
)


@dataclass
class FeatureSchema:
    names: list[str]
    means: list[float]
    scales: list[float]

    @classmethod
    def fit(cls, columns: list[str], X: np.ndarray) -> "FeatureSchema":
        means, scales = [], []
        for j, name in enumerate(columns):
            if name in ONE_HOT_COLUMNS:
                means.append(0.0)
                scales.append(1.0)
            else:
                sd = float(X[:, j].std())
                means.append(float(X[:, j].mean()))
                scales.append(sd if sd > 0 else 1.0)
        return cls(list(columns), means, scales)

    def check(self, columns: list[str]) -> None:
        if list(columns) != self.names:
            raise ValueError(f"feature schema mismatch: expected {self.names}, got {list(columns)}")

    def normalize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != len(self.names):
            raise nx.ShapeError(f"expected {len(self.names)} features, got {X.shape[-1]}")
        return (X - np.asarray(self.means)) / np.asarray(self.scales)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RankerConfig:
    trunk: tuple[int, ...] = (64, 64)
    head: tuple[int, ...] = (32,)
    lr: float = 1e-3
    optimizer: str = "adam"
    epochs: int = 4
    batch_size: int = 256
    seed: int = 0
    shuffle: bool = True


class RankerModel:
    def __init__(self, schema: FeatureSchema, tasks=DEFAULT_TASKS, config: RankerConfig | None = None,
                 store: ParamStore | None = None):
        self.schema = schema
        self.tasks = tuple(tasks)
        self.config = config or RankerConfig()
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names in {names}")
        init = store is None
        self.store = store if store is not None else ParamStore(seed=self.config.seed)
        cfg = self.config
        d = len(schema.names)
        self.trunk = Mlp(MlpSpec((d, *cfg.trunk), output_activation="relu", seed=cfg.seed), self.store,
                         "ranker.trunk", init=init)
        self.heads = {
            t.name: Mlp(MlpSpec((cfg.trunk[-1], *cfg.head, 1), seed=cfg.seed + 1 + i), self.store,
                        f"ranker.head.{t.name}", init=init)
            for i, t in enumerate(self.tasks)
        }

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    @property
    def param_names(self) -> list[str]:
        return self.store.names("ranker.")

    def forward(self, tape: Tape, Xn: np.ndarray) -> dict[str, nx.Node]:
        """Recorded forward pass on normalized features; binary heads return logits."""
        h = self.trunk.forward(tape, Xn)
        return {name: nx.column(head.forward(tape, h), 0) for name, head in self.heads.items()}

    def raw_outputs(self, X: np.ndarray, normalized: bool = False) -> dict[str, np.ndarray]:
        Xn = np.asarray(X, dtype=float) if normalized else self.schema.normalize(X)
        h = self.trunk(np.atleast_2d(Xn))
        return {name: head(h)[:, 0] for name, head in self.heads.items()}

    def predict(self, X: np.ndarray, normalized: bool = False) -> dict[str, np.ndarray]:
        """Per-task predictions: regression in target space, binary as probabilities.

        Binary tasks also expose ``<name>_logit``.
        """
        raw = self.raw_outputs(X, normalized)
        out = {}
        for t in self.tasks:
            if t.kind == "binary":
                out[t.name] = expit(raw[t.name])
                out[f"{t.name}_logit"] = raw[t.name]
            else:
                out[t.name] = raw[t.name]
        return out

    def loss(self, tape: Tape, Xn: np.ndarray, targets: dict[str, np.ndarray], masks: dict | None = None):
        outs = self.forward(tape, Xn)
        total = None
        for t in self.tasks:
            w = None if masks is None or masks.get(t.name) is None else masks[t.name].astype(float)
            if t.kind == "binary":
                term = nx.bce_with_logits(outs[t.name], targets[t.name], w)
            elif w is None:
                term = nx.mean(nx.square(outs[t.name] - targets[t.name]))
            else:
                term = nx.total(nx.mul(w / max(w.sum(), 1.0), nx.square(outs[t.name] - targets[t.name])))
            total = term if total is None else total + term
        return total, outs

    def targets(self, data: Dataset) -> dict[str, np.ndarray]:
        return {t.name: t.target(data.label(t.name)) for t in self.tasks}

    def masks(self, data: Dataset) -> dict[str, np.ndarray | None]:
        return {t.name: None if t.observed_where is None else t.observed(data.columns, data.X) for t in self.tasks}

    def save(self, path, provenance: dict | None = None) -> None:
        path = Path(path)
        meta = {"kind": "ranker", "config": _jsonable(asdict(self.config)),
                "tasks": [asdict(t) for t in self.tasks], "provenance": provenance or {}}
        self.store.save(path, extra=meta)
        sidecar = {"schema": self.schema.to_dict(), "provenance": provenance or {}}
        schema_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RankerModel":
        path = Path(path)
        payload = json.loads(path.read_text())
        meta = payload.get("meta", {})
        if meta.get("kind") != "ranker":
            raise ValueError(f"{path} is not a ranker checkpoint")
        cfg = meta["config"]
        config = RankerConfig(**{**cfg, "trunk": tuple(cfg["trunk"]), "head": tuple(cfg["head"])})
        schema = FeatureSchema(**json.loads(schema_path(path).read_text())["schema"])
        tasks = tuple(TaskSpec(**t) for t in meta["tasks"])
        return cls(schema, tasks, config, store=ParamStore.from_dict(payload))


def schema_path(path: Path) -> Path:
    return path.with_name(path.stem + ".schema.json")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def build_ranker(data: Dataset, tasks=DEFAULT_TASKS, config: RankerConfig | None = None) -> RankerModel:
    return RankerModel(FeatureSchema.fit(data.columns, data.X), tasks, config)


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class TrainTrace:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0


def train(model: RankerModel, data: Dataset, optimizer=None, epochs: int | None = None, seed: int | None = None,
          batch_size: int | None = None, shuffle: bool | None = None) -> TrainTrace:
    """Mini-batch fit of all task heads; shuffling is a pure function of ``seed``."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model.schema.check(data.columns)
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    batch_size = cfg.batch_size if batch_size is None else batch_size
    shuffle = cfg.shuffle if shuffle is None else shuffle
    if optimizer is None:
        optimizer = nx.make_optimizer(cfg.optimizer, model.store, cfg.lr, model.param_names)
    Xn = model.schema.normalize(data.X)
    targets = model.targets(data)
    masks = model.masks(data)
    rng = np.random.default_rng(seed)
    trace = TrainTrace()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in batches(len(data), batch_size, rng if shuffle else None):
            model.store.zero_grad()
            tape = Tape()
            loss, _ = model.loss(tape, Xn[idx], {k: v[idx] for k, v in targets.items()},
                                 {k: None if v is None else v[idx] for k, v in masks.items()})
            value = float(loss.value)
            if not np.isfinite(value):
                log.error("non-finite ranker loss at epoch %d step %d", epoch, trace.steps)
                raise nx.NumericalError(f"non-finite ranker loss at epoch {epoch}, step {trace.steps}")
            tape.backward(loss)
            optimizer.step()
            total += value * len(idx)
            count += len(idx)
            trace.steps += 1
        trace.epoch_loss.append(total / count)
        log.info("ranker epoch %d loss %.5f", epoch, trace.epoch_loss[-1])
    model.store.zero_grad()
    return trace
