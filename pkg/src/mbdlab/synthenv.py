"""Synthetic users, items and interactions with planted engagement biases.

Every bias the debiasing branch is supposed to remove is planted here with a
known sign: duration inflates watch time and deflates looping, photos get less
dwell than videos, users differ in patience and like threshold, cold items are
noisier, and an optional per-timestamp multiplier drifts watch time.

Generative process for one interaction (user u, item v, timestamp t)::

    a          = sigmoid(quality_v + taste_u . topic_v)
    completion = sigmoid(kappa * (a + patience_u) + eps),  eps ~ N(0, (noise * cold(views_v))^2)
    watch_time = completion * duration_v * photo_dwell^[photo] * drift[t]     (capped at 3 * duration)
    P(loop)    = sigmoid(loop_alpha * a - loop_beta * log(duration_v))         (photos never loop)
    P(like)    = sigmoid(like_gain * a + like_threshold_u + photo/region offsets + like_base)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

LOG_MIN_DURATION = np.log(2.0)
LOG_MAX_DURATION = np.log(600.0)
MAX_LOOPS = 3.0
LABELS = ("watch_time", "like", "loop")


@dataclass
class GeneratorConfig:
    n_users: int = 100
    n_items: int = 4000
    n_interactions: int = 100_000
    seed: int = 0
    latent_dim: int = 4
    kappa: float = 2.0
    watch_noise: float = 1.0
    photo_fraction: float = 0.2
    photo_duration: float = 5.0
    photo_dwell: float = 0.5
    region_b_fraction: float = 0.3
    max_log_views: float = float(np.log(1e6))
    exposure_power: float = 0.3
    cold_noise_gain: float = 1.5
    cold_noise_scale: float = 3.0
    loop_alpha: float = 3.0
    loop_beta: float = 1.0
    like_gain: float = 3.0
    like_base: float = -6.3
    like_photo_offset: float = -0.5
    like_region_b_offset: float = -0.5
    quality_score_noise: float = 0.5
    drift: list[float] = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_interactions", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        for name in ("kappa", "photo_duration", "photo_dwell", "max_log_views", "cold_noise_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")
        for name in ("watch_noise", "cold_noise_gain", "exposure_power", "quality_score_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        for name in ("photo_fraction", "region_b_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)!r}")
        if not 2.0 <= self.photo_duration <= 600.0:
            raise ValueError("photo_duration must lie in [2, 600] seconds")
        if len(self.drift) < 1 or any(not m > 0 for m in self.drift):
            raise ValueError("drift must be a nonempty list of positive multipliers")

    @property
    def n_timestamps(self) -> int:
        return len(self.drift)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"unknown generator fields: {unknown}")
        return cls(**payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def linear_drift(start: float, end: float, n: int) -> list[float]:
    return [float(v) for v in np.linspace(start, end, n)]


# ------------------------------------------------------------------ schema


def feature_columns(latent_dim: int = 4) -> list[str]:
    user = ["user_patience", "user_activity", "user_like_threshold", "user_region_a", "user_region_b"]
    user += [f"user_taste_{i}" for i in range(latent_dim)]
    item = ["item_duration", "item_log_duration", "item_format_photo", "item_format_video", "item_log_views",
            "item_quality_score"]
    item += [f"item_topic_{i}" for i in range(latent_dim)]
    return user + item


ONE_HOT_COLUMNS = frozenset({"user_region_a", "user_region_b", "item_format_photo", "item_format_video"})


def column_groups(columns: list[str]) -> dict[str, list[str]]:
    """Named aliases usable in a bias feature set."""
    return {
        "user_full": [c for c in columns if c.startswith("user_")],
        "item_full": [c for c in columns if c.startswith("item_")],
        "user_region": ["user_region_a", "user_region_b"],
        "item_length": ["item_log_duration"],
        "item_views": ["item_log_views"],
        "item_format": ["item_format_photo", "item_format_video"],
        "user_taste": [c for c in columns if c.startswith("user_taste_")],
        "item_topic": [c for c in columns if c.startswith("item_topic_")],
    }


# -------------------------------------------------------------- populations


@dataclass
class Users:
    patience: np.ndarray
    activity: np.ndarray
    like_threshold: np.ndarray
    region_b: np.ndarray
    taste: np.ndarray

    def __len__(self):
        return len(self.patience)

    def take(self, idx) -> "Users":
        return Users(*(getattr(self, f.name)[idx] for f in fields(self)))


@dataclass
class Items:
    duration: np.ndarray
    quality: np.ndarray
    photo: np.ndarray
    views: np.ndarray
    topic: np.ndarray
    quality_score: np.ndarray

    def __len__(self):
        return len(self.duration)

    def take(self, idx) -> "Items":
        return Items(*(getattr(self, f.name)[idx] for f in fields(self)))


def _latent_scale(k: int) -> float:
    # taste . topic has unit variance
    return k ** -0.25


def sample_users(cfg: GeneratorConfig, n: int, rng: np.random.Generator, exposure_weighted: bool = False) -> Users:
    if exposure_weighted:
        # activity density tilted by the sampling weight (0.2 + activity), inverse CDF
        u = rng.uniform(size=n)
        activity = -0.2 + np.sqrt(0.04 + 1.4 * u)
    else:
        activity = rng.uniform(size=n)
    return Users(
        patience=rng.normal(0.0, 0.5, size=n),
        activity=activity,
        like_threshold=rng.normal(0.0, 1.0, size=n),
        region_b=rng.uniform(size=n) < cfg.region_b_fraction,
        taste=rng.normal(0.0, _latent_scale(cfg.latent_dim), size=(n, cfg.latent_dim)),
    )


def sample_items(cfg: GeneratorConfig, n: int, rng: np.random.Generator, exposure_weighted: bool = False) -> Items:
    photo = rng.uniform(size=n) < cfg.photo_fraction
    duration = np.exp(rng.uniform(LOG_MIN_DURATION, LOG_MAX_DURATION, size=n))
    duration = np.where(photo, cfg.photo_duration, duration)
    u = rng.uniform(size=n)
    g, top = cfg.exposure_power, cfg.max_log_views
    if exposure_weighted and g > 0:
        # log1p(views) ~ U(0, top) tilted by exp(g * log1p(views)), inverse CDF
        log_views = np.log1p(u * np.expm1(g * top)) / g
    else:
        log_views = u * top
    quality = rng.normal(0.0, 1.0, size=n)
    return Items(
        duration=duration,
        quality=quality,
        photo=photo,
        views=np.floor(np.expm1(log_views)),
        topic=rng.normal(0.0, _latent_scale(cfg.latent_dim), size=(n, cfg.latent_dim)),
        quality_score=quality + rng.normal(0.0, cfg.quality_score_noise, size=n),
    )


def user_weights(users: Users) -> np.ndarray:
    w = 0.2 + users.activity
    return w / w.sum()


def item_weights(cfg: GeneratorConfig, items: Items) -> np.ndarray:
    w = np.exp(cfg.exposure_power * np.log1p(items.views))
    return w / w.sum()


def features(cfg: GeneratorConfig, users: Users, items: Items) -> np.ndarray:
    """Observable feature matrix; the affinity and true item quality stay hidden."""
    return np.column_stack([
        users.patience,
        users.activity,
        users.like_threshold,
        (~users.region_b).astype(float),
        users.region_b.astype(float),
        users.taste,
        items.duration,
        np.log(items.duration),
        items.photo.astype(float),
        (~items.photo).astype(float),
        np.log1p(items.views),
        items.quality_score,
        items.topic,
    ])


def affinity(users: Users, items: Items) -> np.ndarray:
    return expit(items.quality + np.sum(users.taste * items.topic, axis=1))


def cold_noise_multiplier(cfg: GeneratorConfig, views) -> np.ndarray:
    return 1.0 + cfg.cold_noise_gain * np.exp(-np.log1p(views) / cfg.cold_noise_scale)


def simulate_labels(cfg: GeneratorConfig, users: Users, items: Items, t: np.ndarray, rng: np.random.Generator):
    """Draw (watch_time, like, loop) for aligned user/item rows."""
    n = len(users)
    a = affinity(users, items)
    eps = rng.normal(0.0, 1.0, size=n) * cfg.watch_noise * cold_noise_multiplier(cfg, items.views)
    with np.errstate(invalid="ignore"):
        arg = cfg.kappa * (a + users.patience)
    arg = np.where(np.isnan(arg), 0.0, arg) + eps
    completion = expit(arg)
    drift = np.asarray(cfg.drift, dtype=float)[t]
    watch = completion * items.duration * np.where(items.photo, cfg.photo_dwell, 1.0) * drift
    watch = np.minimum(watch, MAX_LOOPS * items.duration)
    p_loop = np.where(items.photo, 0.0, expit(cfg.loop_alpha * a - cfg.loop_beta * np.log(items.duration)))
    loop = (rng.uniform(size=n) < p_loop).astype(float)
    like_logit = (cfg.like_gain * a + users.like_threshold + cfg.like_base
                  + np.where(items.photo, cfg.like_photo_offset, 0.0)
                  + np.where(users.region_b, cfg.like_region_b_offset, 0.0))
    like = (rng.uniform(size=n) < expit(like_logit)).astype(float)
    return watch, like, loop


# ----------------------------------------------------------------- dataset


@dataclass
class Dataset:
    columns: list[str]
    X: np.ndarray
    watch_time: np.ndarray
    like: np.ndarray
    loop: np.ndarray
    timestamp: np.ndarray
    user_id: np.ndarray
    item_id: np.ndarray

    def __len__(self):
        return len(self.watch_time)

    def label(self, name: str) -> np.ndarray:
        if name not in LABELS:
            raise KeyError(f"unknown label {name!r}")
        return getattr(self, name)

    def col(self, name: str) -> np.ndarray:
        return self.X[:, self.columns.index(name)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.columns, self.X[idx], self.watch_time[idx], self.like[idx], self.loop[idx],
                       self.timestamp[idx], self.user_id[idx], self.item_id[idx])

    def split(self, test_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))

    def header(self) -> list[str]:
        return ["user_id", "item_id", *self.columns, *LABELS, "timestamp"]

    def to_csv(self, path, provenance: str | None = None) -> None:
        table = np.column_stack([self.user_id, self.item_id, self.X, self.watch_time, self.like, self.loop,
                                 self.timestamp])
        with open(path, "w") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            fh.write(",".join(self.header()) + "\n")
            np.savetxt(fh, table, fmt="%.17g", delimiter=",")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path) as fh:
            line = fh.readline()
            skip = 1
            while line.startswith("#"):
                line = fh.readline()
                skip += 1
        header = line.strip().split(",")
        table = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
        if table.shape[1] != len(header):
            raise ValueError(f"{path}: {table.shape[1]} columns but header has {len(header)}")
        idx = {h: i for i, h in enumerate(header)}
        for req in ("user_id", "item_id", *LABELS, "timestamp"):
            if req not in idx:
                raise ValueError(f"{path}: missing column {req!r}")
        columns = [h for h in header if h not in ("user_id", "item_id", *LABELS, "timestamp")]
        return cls(
            columns=columns,
            X=table[:, [idx[c] for c in columns]],
            watch_time=table[:, idx["watch_time"]],
            like=table[:, idx["like"]],
            loop=table[:, idx["loop"]],
            timestamp=table[:, idx["timestamp"]].astype(np.int64),
            user_id=table[:, idx["user_id"]].astype(np.int64),
            item_id=table[:, idx["item_id"]].astype(np.int64),
        )


@dataclass
class World:
    """A generated population plus its interaction log."""

    config: GeneratorConfig
    users: Users
    items: Items
    data: Dataset


def _streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def generate_world(cfg: GeneratorConfig) -> World:
    cfg.validate()
    r_users, r_items, r_pairs, r_labels = _streams(cfg.seed)
    users = sample_users(cfg, cfg.n_users, r_users)
    items = sample_items(cfg, cfg.n_items, r_items)
    n = cfg.n_interactions
    uid = r_pairs.choice(cfg.n_users, size=n, p=user_weights(users))
    iid = r_pairs.choice(cfg.n_items, size=n, p=item_weights(cfg, items))
    t = r_pairs.integers(0, cfg.n_timestamps, size=n)
    u, v = users.take(uid), items.take(iid)
    watch, like, loop = simulate_labels(cfg, u, v, t, r_labels)
    data = Dataset(feature_columns(cfg.latent_dim), features(cfg, u, v), watch, like, loop, t, uid, iid)
    return World(cfg, users, items, data)


def generate(cfg: GeneratorConfig) -> Dataset:
    return generate_world(cfg).data


def apply_drift(data: Dataset, schedule) -> Dataset:
    """Scale watch time by ``schedule[timestamp]``; other labels are untouched."""
    schedule = np.asarray(schedule, dtype=float)
    if len(data) and data.timestamp.max() >= len(schedule):
        raise ValueError(f"drift schedule has {len(schedule)} entries but timestamp {int(data.timestamp.max())} occurs")
    if np.any(schedule <= 0):
        raise ValueError("drift multipliers must be positive")
    out = data.subset(np.arange(len(data)))
    out.watch_time = data.watch_time * schedule[data.timestamp]
    return out


# ------------------------------------------------------------------ oracle

USER_FIELDS = {"user_patience": "patience", "user_activity": "activity", "user_like_threshold": "like_threshold",
               "user_region": "region_b", "user_taste": "taste"}
ITEM_FIELDS = {"item_duration": "duration", "item_quality": "quality", "item_format": "photo",
               "item_views": "views", "item_topic": "topic", "item_quality_score": "quality_score"}


@dataclass
class OracleStats:
    mean: float
    variance: float
    stderr: float
    n: int


def _items_in_range(cfg: GeneratorConfig, n: int, rng: np.random.Generator, lo: float, hi: float) -> Items:
    """Exposure-weighted items conditioned on lo <= duration < hi, by rejection."""
    if not lo < hi:
        raise ValueError(f"empty duration range [{lo}, {hi})")
    kept, total = [], 0
    for _ in range(1000):
        batch = sample_items(cfg, max(4 * n, 1024), rng, exposure_weighted=True)
        idx = np.flatnonzero((batch.duration >= lo) & (batch.duration < hi))
        kept.append(batch.take(idx))
        total += len(idx)
        if total >= n:
            break
    else:
        raise ValueError(f"duration range [{lo}, {hi}) has negligible mass")
    return Items(*(np.concatenate([getattr(k, f.name) for k in kept])[:n] for f in fields(Items)))


def _context_population(cfg: GeneratorConfig, context: dict, n: int, rng: np.random.Generator):
    unknown = sorted(set(context) - set(USER_FIELDS) - set(ITEM_FIELDS) - {"timestamp", "item_duration_range"})
    if unknown:
        raise KeyError(f"unknown context feature(s): {unknown}")
    if "item_duration_range" in context and "item_duration" in context:
        raise ValueError("give item_duration or item_duration_range, not both")
    users = sample_users(cfg, n, rng, exposure_weighted=True)
    if "item_duration_range" in context:
        items = _items_in_range(cfg, n, rng, *context["item_duration_range"])
    else:
        items = sample_items(cfg, n, rng, exposure_weighted=True)
    for key, value in context.items():
        if key == "user_region":
            if value not in ("A", "B"):
                raise ValueError(f"user_region must be 'A' or 'B', got {value!r}")
            users.region_b = np.full(n, value == "B")
        elif key == "item_format":
            if value not in ("photo", "video"):
                raise ValueError(f"item_format must be 'photo' or 'video', got {value!r}")
            items.photo = np.full(n, value == "photo")
        elif key in USER_FIELDS:
            attr = USER_FIELDS[key]
            setattr(users, attr, np.broadcast_to(np.asarray(value, dtype=float), getattr(users, attr).shape).copy())
        elif key in ITEM_FIELDS:
            attr = ITEM_FIELDS[key]
            setattr(items, attr, np.broadcast_to(np.asarray(value, dtype=float), getattr(items, attr).shape).copy())
    if "item_duration" in context and "item_format" not in context:
        items.photo = np.full(n, float(context["item_duration"]) == cfg.photo_duration)
    elif "item_duration" not in context:
        items.duration = np.where(items.photo, cfg.photo_duration,
                                  np.where(items.duration == cfg.photo_duration,
                                           np.exp(rng.uniform(LOG_MIN_DURATION, LOG_MAX_DURATION, size=n)),
                                           items.duration))
    if "item_format" in context and context["item_format"] == "photo":
        items.duration = np.full(n, cfg.photo_duration)
    t = np.full(n, int(context.get("timestamp", 0)))
    if t[0] >= cfg.n_timestamps:
        raise ValueError(f"timestamp {t[0]} outside drift schedule")
    return users, items, t


def oracle_conditional_stats(cfg: GeneratorConfig, context: dict, task: str, n_mc: int, seed: int = 0,
                             transform: str = "identity", predictor=None) -> OracleStats:
    """Monte Carlo mean and variance of a label (or of ``predictor``) given fixed context variables.

    Unfixed user and item attributes are drawn from the exposure-weighted
    population the interaction log is sampled from. With ``predictor`` the
    statistics are of ``predictor(features)`` instead of the label; it receives
    the raw feature matrix and must return one value per row.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if task not in LABELS:
        raise KeyError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    users, items, t = _context_population(cfg, context, n_mc, rng)
    if predictor is not None:
        values = np.asarray(predictor(features(cfg, users, items)), dtype=float)
    else:
        watch, like, loop = simulate_labels(cfg, users, items, t, rng)
        values = {"watch_time": watch, "like": like, "loop": loop}[task]
    if transform == "log1p":
        values = np.log1p(values)
    elif transform != "identity":
        raise ValueError(f"unknown transform {transform!r}")
    var = float(values.var())
    return OracleStats(float(values.mean()), var, float(np.sqrt(var / n_mc)), n_mc)


def oracle_row_stats(cfg: GeneratorConfig, users: Users, durations, predictor, n_mc: int, seed: int = 0,
                     chunk: int = 200_000) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Monte Carlo mean and variance of ``predictor`` given that row's user and item duration.

    Every other item attribute is drawn from the exposure-weighted population,
    so this is the conditional law at x' = {user, duration}.
    """
    durations = np.asarray(durations, dtype=float)
    if len(users) != len(durations):
        raise ValueError(f"{len(users)} users for {len(durations)} durations")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    per = max(1, chunk // n_mc)
    mean, var = np.empty(len(durations)), np.empty(len(durations))
    for start in range(0, len(durations), per):
        rows = np.arange(start, min(start + per, len(durations)))
        rep = np.repeat(rows, n_mc)
        items = sample_items(cfg, len(rep), rng, exposure_weighted=True)
        items.duration = durations[rep]
        items.photo = items.duration == cfg.photo_duration
        values = np.asarray(predictor(features(cfg, users.take(rep), items)), dtype=float).reshape(len(rows), n_mc)
        mean[rows] = values.mean(axis=1)
        var[rows] = values.var(axis=1)
    return mean, var
