"""Contextual mean/variance branch trained by decoupled method of moments.

The branch sees only a projection x' of the features and regresses the ranker's
detached prediction p:

    mean loss      (sg[p] - mu(x'))^2
    variance loss  (var(x') - sg[(p - sg[mu(x')])^2])^2
    pinball loss   [tau - 1(p < q)] (p - q)          (optional quantile heads)

Binary tasks are handled in logit space by default, where sparse events are
not squashed against zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .numerics import Mlp, MlpSpec, ParamStore, Tape
from .ranker import FeatureSchema, RankerModel, batches
from .synthenv import Dataset, column_groups

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
PROB_CLAMP = 1e-6
LOGIT_BOUND = float(np.log((1 - PROB_CLAMP) / PROB_CLAMP))
RAW_VAR_CAP = 50.0


@dataclass(frozen=True)
class BiasFeatureSet:
    name: str
    columns: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if not self.columns:
            raise ValueError(f"bias feature set {self.name!r} is empty")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError(f"bias feature set {self.name!r} has duplicate entries")

    def expand(self, schema_names) -> list[str]:
        """Resolve group aliases (``user_full``, ``item_length``...) to schema columns."""
        schema_names = list(schema_names)
        groups = column_groups(schema_names)
        out = []
        for c in self.columns:
            if c in schema_names:
                out.append(c)
            elif c in groups:
                out.extend(groups[c])
            else:
                raise KeyError(f"bias feature set {self.name!r}: unknown column {c!r}")
        if len(set(out)) != len(out):
            raise ValueError(f"bias feature set {self.name!r} resolves to duplicate columns")
        return out

    def indices(self, schema_names) -> list[int]:
        schema_names = list(schema_names)
        return [schema_names.index(c) for c in self.expand(schema_names)]


def project(x: np.ndarray, feature_set: BiasFeatureSet, schema_names) -> np.ndarray:
    """Columns of ``x`` named by the feature set, in declared order."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(schema_names):
        raise nx.ShapeError(f"expected {len(schema_names)} features, got {x.shape[-1]}")
    return x[..., feature_set.indices(schema_names)]


DURATION_DEBIAS = BiasFeatureSet("duration", ("user_full", "item_length"))
COLD_START_DEBIAS = BiasFeatureSet("cold_start", ("user_full", "item_views"))
REGIONAL_DEBIAS = BiasFeatureSet("regional", ("user_region", "item_full"))


# ------------------------------------------------------------------ losses


def _pair(a, b):
    tape = nx._tape_of(a, b)
    return nx._lift(a, tape), nx._lift(b, tape)


def mean_loss(p, mu) -> nx.Node:
    p, mu = _pair(p, mu)
    return nx.mean(nx.square(nx.stop_gradient(p) - mu))


def variance_loss(p, mu, var) -> nx.Node:
    tape = nx._tape_of(p, mu, var)
    p, mu, var = (nx._lift(v, tape) for v in (p, mu, var))
    residual_sq = nx.stop_gradient(nx.square(nx.stop_gradient(p) - nx.stop_gradient(mu)))
    return nx.mean(nx.square(var - residual_sq))


def pinball_loss(p, q, tau: float) -> nx.Node:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    p, q = _pair(p, q)
    p = nx.stop_gradient(p)
    weight = tau - (p.value < q.value).astype(float)
    return nx.mean(nx.mul(weight, p - q))


def logit_target(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("logit_target expects probabilities in [0, 1]")
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return np.log(p / (1 - p))


# ------------------------------------------------------------------ branch


@dataclass
class BranchConfig:
    task: str
    feature_set: BiasFeatureSet
    trunk: tuple[int, ...] = (32, 32)
    quantiles: tuple[float, ...] = ()
    target: str = "prediction"  # or "label"
    space: str | None = None  # logit | probability | identity; None picks by task kind
    var_floor: float = VAR_FLOOR
    optimizer: str = "adam"
    lr: float = 3e-3
    batch_size: int | None = 2048  # None = full batch
    steps: int = 10_000
    lr_final: float = 0.1  # linear decay to lr * lr_final over the run
    warm_start: bool = True  # start heads at the global moments of the first training targets
    seed: int = 0

    def __post_init__(self):
        self.trunk = tuple(self.trunk)
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if self.target not in ("prediction", "label"):
            raise ValueError(f"target must be 'prediction' or 'label', got {self.target!r}")
        if self.space not in (None, "logit", "probability", "identity"):
            raise ValueError(f"unknown space {self.space!r}")
        for q in self.quantiles:
            if not 0.0 < q < 1.0:
                raise ValueError(f"quantile level must lie in (0, 1), got {q}")
        if not self.var_floor > 0:
            raise ValueError("var_floor must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_set"] = {"name": self.feature_set.name, "columns": list(self.feature_set.columns)}
        d["trunk"] = list(self.trunk)
        d["quantiles"] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BranchConfig":
        d = dict(d)
        fs = d.pop("feature_set")
        return cls(feature_set=BiasFeatureSet(fs["name"], tuple(fs["columns"])), **d)


@dataclass
class DistributionEstimate:
    mu: np.ndarray
    var: np.ndarray
    quantiles: dict[float, np.ndarray] = field(default_factory=dict)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var)

    def crossings(self) -> int:
        """Rows whose quantile estimates are not non-decreasing in tau."""
        if len(self.quantiles) < 2:
            return 0
        q = np.column_stack([self.quantiles[t] for t in sorted(self.quantiles)])
        return int(np.sum(np.any(np.diff(q, axis=1) < 0, axis=1)))


class MbdBranch:
    """Mean head, variance head and optional quantile heads over a shared trunk on x'."""

    def __init__(self, config: BranchConfig, schema: FeatureSchema | None = None, task_kind: str = "regression",
                 input_dim: int | None = None, store: ParamStore | None = None):
        self.config = config
        self.schema = schema
        self.task_kind = task_kind
        if schema is not None:
            self.columns = config.feature_set.expand(schema.names)
            self.input_idx = config.feature_set.indices(schema.names)
            dim = len(self.input_idx)
        else:
            if input_dim is None:
                raise ValueError("need a schema or an explicit input_dim")
            self.columns, self.input_idx, dim = None, None, int(input_dim)
        if input_dim is not None and input_dim != dim:
            raise nx.ShapeError(f"input_dim {input_dim} does not match feature set width {dim}")
        self.input_dim = dim
        self.space = config.space or ("logit" if task_kind == "binary" else "identity")
        if task_kind != "binary" and self.space != "identity":
            raise ValueError(f"space {self.space!r} only applies to binary tasks")
        init = store is None
        self.fresh = init
        self.store = store if store is not None else ParamStore(seed=config.seed)
        s = config.seed
        p = f"mbd.{config.task}.{config.feature_set.name}"
        self.prefix = p
        if config.trunk:
            self.trunk = Mlp(MlpSpec((dim, *config.trunk), output_activation="relu", seed=s), self.store,
                             f"{p}.trunk", init=init)
            width = config.trunk[-1]
        else:
            self.trunk = None
            width = dim
        self.mean_head = Mlp(MlpSpec((width, 1), seed=s + 1), self.store, f"{p}.mean", init=init)
        self.var_head = Mlp(MlpSpec((width, 1), seed=s + 2), self.store, f"{p}.var", init=init)
        self.quantile_heads = {
            tau: Mlp(MlpSpec((width, 1), seed=s + 3 + i), self.store, f"{p}.q{tau:g}", init=init)
            for i, tau in enumerate(config.quantiles)
        }

    @property
    def param_names(self) -> list[str]:
        return self.store.names(self.prefix + ".")

    # -- inputs and targets

    def project(self, X: np.ndarray, normalized: bool = False) -> np.ndarray:
        if self.schema is None:
            raise ValueError("branch has no feature schema; pass x' directly")
        Xn = np.asarray(X, dtype=float) if normalized else self.schema.normalize(X)
        return project(Xn, self.config.feature_set, self.schema.names)

    def signal_from_raw(self, raw: np.ndarray) -> np.ndarray:
        """Map a ranker head output (logit for binary tasks) into the branch's space."""
        raw = np.asarray(raw, dtype=float)
        if self.space == "logit":
            return np.clip(raw, -LOGIT_BOUND, LOGIT_BOUND)
        if self.space == "probability":
            return expit(raw)
        return raw

    def signal_from_prediction(self, pred: dict, task: str | None = None) -> np.ndarray:
        task = task or self.config.task
        raw = pred[f"{task}_logit"] if self.task_kind == "binary" else pred[task]
        return self.signal_from_raw(raw)

    def signal_from_label(self, y: np.ndarray, transform: str = "identity") -> np.ndarray:
        y = np.log1p(y) if transform == "log1p" else np.asarray(y, dtype=float)
        if self.space == "logit":
            return logit_target(y)
        return y

    # -- forward

    def forward(self, tape: Tape, xp):
        h = self.trunk.forward(tape, xp) if self.trunk is not None else nx._lift(np.atleast_2d(xp), tape)
        mu = nx.column(self.mean_head.forward(tape, h), 0)
        raw = nx.column(self.var_head.forward(tape, h), 0)
        var = nx.clip(nx.exp(nx.clip(raw, hi=RAW_VAR_CAP)), lo=self.config.var_floor)
        qs = {tau: nx.column(head.forward(tape, h), 0) for tau, head in self.quantile_heads.items()}
        return mu, var, qs

    def estimate(self, xp: np.ndarray) -> DistributionEstimate:
        xp = np.asarray(xp, dtype=float)
        if xp.shape[-1] != self.input_dim:
            raise nx.ShapeError(f"branch expects x' of width {self.input_dim}, got {xp.shape[-1]}")
        xp = np.atleast_2d(xp)
        h = self.trunk(xp) if self.trunk is not None else xp
        mu = self.mean_head(h)[:, 0]
        var = np.maximum(np.exp(np.minimum(self.var_head(h)[:, 0], RAW_VAR_CAP)), self.config.var_floor)
        qs = {tau: head(h)[:, 0] for tau, head in self.quantile_heads.items()}
        return DistributionEstimate(mu, var, qs)

    def estimate_features(self, X: np.ndarray, normalized: bool = False) -> DistributionEstimate:
        return self.estimate(self.project(X, normalized))

    def aux_loss(self, tape: Tape, xp, p):
        """Mean + variance (+ pinball) loss against an already-detached target node."""
        mu, var, qs = self.forward(tape, xp)
        total = mean_loss(p, mu) + variance_loss(p, mu, var)
        for tau, q in qs.items():
            total = total + pinball_loss(p, q, tau)
        return total

    # -- persistence

    def save(self, path, provenance: dict | None = None) -> None:
        meta = {"kind": "mbd", "config": self.config.to_dict(), "task_kind": self.task_kind,
                "space": self.space, "input_dim": self.input_dim, "columns": self.columns,
                "schema": self.schema.to_dict() if self.schema else None, "provenance": provenance or {}}
        self.store.save(path, extra=meta)

    @classmethod
    def load(cls, path) -> "MbdBranch":
        payload = json.loads(Path(path).read_text())
        meta = payload.get("meta", {})
        if meta.get("kind") != "mbd":
            raise ValueError(f"{path} is not a branch checkpoint")
        schema = FeatureSchema(**meta["schema"]) if meta.get("schema") else None
        return cls(BranchConfig.from_dict(meta["config"]), schema, meta["task_kind"],
                   input_dim=None if schema else meta["input_dim"], store=ParamStore.from_dict(payload))


def build_branch(config: BranchConfig, ranker: RankerModel) -> MbdBranch:
    return MbdBranch(config, ranker.schema, ranker.task(config.task).kind)


# ---------------------------------------------------------------- training


@dataclass
class BranchTrace:
    loss: list[float] = field(default_factory=list)
    steps: int = 0
    skipped: int = 0


def _step_batches(n: int, batch_size: int | None, steps: int, rng: np.random.Generator):
    done = 0
    while done < steps:
        for idx in batches(n, batch_size or n, rng if batch_size else None):
            if done >= steps:
                return
            yield idx
            done += 1


def fit_moments(branch: MbdBranch, xp: np.ndarray, target: np.ndarray, steps: int | None = None,
                seed: int | None = None, optimizer=None, batch_size: int | None = -1,
                trace: BranchTrace | None = None) -> BranchTrace:
    """Train the branch on fixed (x', p) pairs: the frozen-ranker path."""
    cfg = branch.config
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    batch_size = cfg.batch_size if batch_size == -1 else batch_size
    xp = np.asarray(xp, dtype=float)
    target = np.asarray(target, dtype=float)
    trace = trace or BranchTrace()
    ok = np.isfinite(target)
    if not ok.all():
        trace.skipped += int((~ok).sum())
        log.warning("skipping %d examples with non-finite targets", int((~ok).sum()))
        xp, target = xp[ok], target[ok]
    if optimizer is None:
        optimizer = nx.make_optimizer(cfg.optimizer, branch.store, cfg.lr, branch.param_names)
    if cfg.warm_start and branch.fresh:
        warm_start(branch, target)
    branch.fresh = False
    rng = np.random.default_rng(seed)
    base_lr = optimizer.lr
    for i, idx in enumerate(_step_batches(len(target), batch_size, steps, rng)):
        optimizer.lr = _decayed(base_lr, cfg.lr_final, i, steps)
        branch.store.zero_grad()
        tape = Tape()
        loss = branch.aux_loss(tape, xp[idx], tape.constant(target[idx]))
        tape.backward(loss)
        optimizer.step()
        trace.loss.append(float(loss.value))
        trace.steps += 1
    optimizer.lr = base_lr
    branch.store.zero_grad()
    return trace


def warm_start(branch: MbdBranch, target: np.ndarray, shrink: float = 0.1) -> None:
    """Point every head at the pooled moments of ``target`` and damp the head weights.

    Starting the variance head near the pooled variance matters: under
    sigma^2 = exp(raw) the variance loss gradient on ``raw`` scales with
    sigma^2, so regions that start tiny barely recover.
    """
    target = np.asarray(target, dtype=float)
    target = target[np.isfinite(target)]
    if len(target) == 0:
        return
    st = branch.store
    heads = [(branch.mean_head, float(target.mean())),
             (branch.var_head, float(np.log(max(target.var(), branch.config.var_floor))))]
    heads += [(h, float(np.quantile(target, tau))) for tau, h in branch.quantile_heads.items()]
    for head, bias in heads:
        last = head.spec.n_layers - 1
        st[f"{head.prefix}.w{last}"][...] *= shrink
        st[f"{head.prefix}.b{last}"][:] = bias
    branch.fresh = False


def _decayed(lr: float, final: float, i: int, steps: int) -> float:
    return lr * (1.0 - (1.0 - final) * i / max(steps - 1, 1))


def branch_targets(branch: MbdBranch, ranker: RankerModel | None, data: Dataset) -> np.ndarray:
    if branch.config.target == "label":
        transform = ranker.task(branch.config.task).transform if ranker is not None else "identity"
        return branch.signal_from_label(data.label(branch.config.task), transform)
    return branch.signal_from_raw(ranker.raw_outputs(data.X)[branch.config.task])


def train_branch(branch: MbdBranch, ranker: RankerModel, data: Dataset, optimizer=None, steps: int | None = None,
                 seed: int | None = None, mode: str = "frozen", ranker_optimizer=None, ranker_loss: bool = True,
                 batch_size: int | None = -1) -> BranchTrace:
    """Fit the branch against the ranker's detached predictions.

    ``mode="frozen"`` precomputes p once. ``mode="joint"`` runs the ranker on
    the same tape every step; its own loss is optional and the auxiliary losses
    reach it only through ``stop_gradient`` (i.e. not at all).
    """
    if mode == "frozen":
        keep = ranker.task(branch.config.task).observed(data.columns, data.X)
        return fit_moments(branch, branch.project(data.X)[keep], branch_targets(branch, ranker, data)[keep], steps,
                           seed, optimizer, batch_size)
    if mode != "joint":
        raise ValueError(f"unknown mode {mode!r}")
    cfg = branch.config
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    batch_size = cfg.batch_size if batch_size == -1 else batch_size
    if optimizer is None:
        optimizer = nx.make_optimizer(cfg.optimizer, branch.store, cfg.lr, branch.param_names)
    if ranker_loss and ranker_optimizer is None:
        rc = ranker.config
        ranker_optimizer = nx.make_optimizer(rc.optimizer, ranker.store, rc.lr, ranker.param_names)
    Xn = ranker.schema.normalize(data.X)
    xp = project(Xn, cfg.feature_set, ranker.schema.names)
    targets = ranker.targets(data)
    masks = ranker.masks(data)
    observed = ranker.task(cfg.task).observed(data.columns, data.X)
    labels = branch_targets(branch, ranker, data) if cfg.target == "label" else None
    if cfg.warm_start and branch.fresh:
        warm_start(branch, (labels if labels is not None else branch_targets(branch, ranker, data))[observed])
    branch.fresh = False
    rng = np.random.default_rng(seed)
    trace = BranchTrace()
    base_lr = optimizer.lr
    for i, idx in enumerate(_step_batches(len(data), batch_size, steps, rng)):
        optimizer.lr = _decayed(base_lr, cfg.lr_final, i, steps)
        branch.store.zero_grad()
        ranker.store.zero_grad()
        tape = Tape()
        if ranker_loss:
            main, outs = ranker.loss(tape, Xn[idx], {k: v[idx] for k, v in targets.items()},
                                     {k: None if v is None else v[idx] for k, v in masks.items()})
        else:
            main, outs = None, ranker.forward(tape, Xn[idx])
        if labels is not None:
            p = tape.constant(labels[idx])
        else:
            p = nx.stop_gradient(outs[cfg.task])
            if branch.space == "logit":
                p = nx.clip(p, -LOGIT_BOUND, LOGIT_BOUND)
            elif branch.space == "probability":
                p = nx.sigmoid(p)
        xb = xp[idx]
        finite = np.isfinite(p.value)
        trace.skipped += int((~finite).sum())
        keep = finite & observed[idx]
        if not keep.all():
            p, xb = tape.constant(p.value[keep]), xb[keep]
        aux = branch.aux_loss(tape, xb, p)
        total = aux if main is None else main + aux
        tape.backward(total)
        optimizer.step()
        if ranker_loss:
            ranker_optimizer.step()
        trace.loss.append(float(aux.value))
        trace.steps += 1
    optimizer.lr = base_lr
    branch.store.zero_grad()
    ranker.store.zero_grad()
    return trace
