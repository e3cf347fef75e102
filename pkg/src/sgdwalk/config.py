"""Experiment configuration: file grammar, defaults, seed derivation.

Config files use a flat key-value format with one section per module::

    # comment
    [optim]
    batch_size = 100
    epochs = 6

Unknown sections or keys are rejected outright so typos fail loudly.
Every random stream in a run derives from one master seed through
``derive_seed(master_seed, label)``: the first 8 bytes, little-endian, of
SHA-256 over ``"{master_seed}/{label}"``.
"""

import hashlib
import json
from dataclasses import dataclass, fields

EXPERIMENTS = (
    "walk-gd",
    "walk-sgd",
    "barrier-census",
    "height-vs-lr",
    "cosine-study",
    "iso-noise",
    "spectral-track",
    "quad-rates",
    "schedule-compare",
)


class ConfigError(ValueError):
    """Bad config file, bad CLI value, or an impossible combination."""


def derive_seed(master_seed, label):
    """Deterministic 64-bit sub-seed for one named random stream."""
    digest = hashlib.sha256(f"{master_seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# section -> key -> (type tag, default). Types: int, float, str, ints, floats.
SCHEMA = {
    "model": {
        "hidden": ("ints", (64,)),
        "init_scale": ("float", 1.0),
    },
    "data": {
        "source": ("str", "blobs"),
        "images": ("str", ""),
        "labels": ("str", ""),
        "val_images": ("str", ""),
        "val_labels": ("str", ""),
        "limit": ("int", 5000),
        "classes": ("int", 10),
        "dim": ("int", 20),
        "per_class": ("int", 500),
        "separation": ("float", 3.0),
        "val_per_class": ("int", 100),
    },
    "optim": {
        "batch_size": ("int", 100),
        "epochs": ("int", 6),
        "lr": ("float", 0.0),
        "lr_grid": ("floats", (5.0, 2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005)),
        "schedule": ("str", "constant"),
        "lr_min": ("float", 0.0),
        "decay": ("float", 0.5),
        "period": ("int", 100),
        "half_cycle": ("int", 25),
        "ramp_up": ("int", 75),
        "plateau": ("int", 75),
        "ramp_down": ("int", 75),
        "noise": ("str", "none"),
        "eval_period": ("int", 1),
        "budget_updates": ("int", 300),
    },
    "walk": {
        "workers": ("int", 1),
        "slice_epochs": ("str", "first,last"),
    },
    "metrics": {
        "significance_rel": ("float", 0.01),
        "smooth_window": ("int", 51),
    },
    "curvature": {
        "period_epochs": ("int", 1),
        "power_iters": ("int", 200),
        "power_tol": ("float", 1e-3),
    },
    "quad": {
        "lambdas": ("floats", (0.5, 1.0, 2.0)),
        "eta_start": ("float", 0.1),
        "eta_stop": ("float", 2.2),
        "eta_step": ("float", 0.1),
    },
    "study": {
        "batch_grid": ("str", "16,100,full"),
        "lr_factor": ("float", 0.5),
    },
}


def _convert(section, key, raw):
    tag = SCHEMA[section][key][0]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "ints":
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if tag == "floats":
            return tuple(float(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {tag}") from exc


def parse_config_file(path):
    """Parse the sectioned key-value grammar; returns {(section, key): value}."""
    values = {}
    section = None
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            if section is None:
                raise ConfigError(f"{path}:{lineno}: key outside any section")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r} in section [{section}]"
                )
            values[(section, key)] = _convert(section, key, raw)
    return values


def parse_schedule_flag(text):
    """CLI schedule spec: kind[:comma-separated parameters].

    constant:RATE | stepwise:RATE,DECAY,PERIOD | cyclical:MIN,MAX,HALF |
    trapezoid:MIN,MAX,UP,PLATEAU,DOWN. A bare kind keeps file/default
    parameters.
    """
    kind, _, rest = text.partition(":")
    updates = {("optim", "schedule"): kind}
    parts = [p for p in rest.split(",") if p] if rest else []
    try:
        if kind == "constant":
            if len(parts) == 1:
                updates[("optim", "lr")] = float(parts[0])
            elif parts:
                raise ConfigError("constant schedule takes one parameter")
        elif kind == "stepwise":
            if parts:
                if len(parts) != 3:
                    raise ConfigError("stepwise takes RATE,DECAY,PERIOD")
                updates[("optim", "lr")] = float(parts[0])
                updates[("optim", "decay")] = float(parts[1])
                updates[("optim", "period")] = int(parts[2])
        elif kind == "cyclical":
            if parts:
                if len(parts) != 3:
                    raise ConfigError("cyclical takes MIN,MAX,HALF_CYCLE")
                updates[("optim", "lr_min")] = float(parts[0])
                updates[("optim", "lr")] = float(parts[1])
                updates[("optim", "half_cycle")] = int(parts[2])
        elif kind == "trapezoid":
            if parts:
                if len(parts) != 5:
                    raise ConfigError("trapezoid takes MIN,MAX,UP,PLATEAU,DOWN")
                updates[("optim", "lr_min")] = float(parts[0])
                updates[("optim", "lr")] = float(parts[1])
                updates[("optim", "ramp_up")] = int(parts[2])
                updates[("optim", "plateau")] = int(parts[3])
                updates[("optim", "ramp_down")] = int(parts[4])
        else:
            raise ConfigError(f"unknown schedule kind {kind!r}")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad schedule spec {text!r}") from exc
    return updates


def parse_noise_flag(text):
    """CLI noise spec: 'none' or 'iso:FACTOR'."""
    if text == "none":
        return {("optim", "noise"): "none"}
    kind, _, factor = text.partition(":")
    if kind != "iso" or not factor:
        raise ConfigError(f"noise spec must be 'none' or 'iso:FACTOR', got {text!r}")
    try:
        float(factor)
    except ValueError as exc:
        raise ConfigError(f"bad noise factor {factor!r}") from exc
    return {("optim", "noise"): f"iso:{factor}"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings for one run."""

    experiment: str
    out_dir: str
    master_seed: int
    # model
    hidden: tuple
    init_scale: float
    # data
    source: str
    images: str
    labels: str
    val_images: str
    val_labels: str
    limit: int
    classes: int
    dim: int
    per_class: int
    separation: float
    val_per_class: int
    # optim
    batch_size: int
    epochs: int
    lr: float
    lr_grid: tuple
    schedule: str
    lr_min: float
    decay: float
    period: int
    half_cycle: int
    ramp_up: int
    plateau: int
    ramp_down: int
    noise: str
    eval_period: int
    budget_updates: int
    # walk
    workers: int
    slice_epochs: str
    # metrics
    significance_rel: float
    smooth_window: int
    # curvature
    period_epochs: int
    power_iters: int
    power_tol: float
    # quad
    lambdas: tuple
    eta_start: float
    eta_stop: float
    eta_step: float
    # study
    batch_grid: str
    lr_factor: float
    # bookkeeping: which (section, key) pairs the user set explicitly
    explicit: frozenset = frozenset()

    @property
    def noise_mode(self):
        return "isotropic" if self.noise.startswith("iso") else "none"

    @property
    def noise_factor(self):
        if not self.noise.startswith("iso:"):
            return 0.0
        return float(self.noise.partition(":")[2])

    def was_set(self, section, key):
        return (section, key) in self.explicit

    def resolved(self):
        """All settings as a plain JSON-safe dict (out_dir excluded)."""
        out = {}
        for f in fields(self):
            if f.name in ("out_dir", "explicit"):
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def digest(self):
        """Hex SHA-256 over the canonical JSON form of the resolved settings."""
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def build_config(experiment, out_dir, master_seed, file_values=None,
                 overrides=None):
    """Merge defaults <- config file <- CLI overrides into a typed config."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}"
        )
    merged = {}
    explicit = set()
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            merged[(section, key)] = default
    for source in (file_values or {}), (overrides or {}):
        for pair, value in source.items():
            if pair[0] not in SCHEMA or pair[1] not in SCHEMA[pair[0]]:
                raise ConfigError(f"unknown setting {pair[0]}.{pair[1]}")
            merged[pair] = value
            explicit.add(pair)

    cfg = ExperimentConfig(
        experiment=experiment,
        out_dir=str(out_dir),
        master_seed=int(master_seed),
        hidden=merged[("model", "hidden")],
        init_scale=merged[("model", "init_scale")],
        source=merged[("data", "source")],
        images=merged[("data", "images")],
        labels=merged[("data", "labels")],
        val_images=merged[("data", "val_images")],
        val_labels=merged[("data", "val_labels")],
        limit=merged[("data", "limit")],
        classes=merged[("data", "classes")],
        dim=merged[("data", "dim")],
        per_class=merged[("data", "per_class")],
        separation=merged[("data", "separation")],
        val_per_class=merged[("data", "val_per_class")],
        batch_size=merged[("optim", "batch_size")],
        epochs=merged[("optim", "epochs")],
        lr=merged[("optim", "lr")],
        lr_grid=tuple(merged[("optim", "lr_grid")]),
        schedule=merged[("optim", "schedule")],
        lr_min=merged[("optim", "lr_min")],
        decay=merged[("optim", "decay")],
        period=merged[("optim", "period")],
        half_cycle=merged[("optim", "half_cycle")],
        ramp_up=merged[("optim", "ramp_up")],
        plateau=merged[("optim", "plateau")],
        ramp_down=merged[("optim", "ramp_down")],
        noise=merged[("optim", "noise")],
        eval_period=merged[("optim", "eval_period")],
        budget_updates=merged[("optim", "budget_updates")],
        workers=merged[("walk", "workers")],
        slice_epochs=merged[("walk", "slice_epochs")],
        significance_rel=merged[("metrics", "significance_rel")],
        smooth_window=merged[("metrics", "smooth_window")],
        period_epochs=merged[("curvature", "period_epochs")],
        power_iters=merged[("curvature", "power_iters")],
        power_tol=merged[("curvature", "power_tol")],
        lambdas=tuple(merged[("quad", "lambdas")]),
        eta_start=merged[("quad", "eta_start")],
        eta_stop=merged[("quad", "eta_stop")],
        eta_step=merged[("quad", "eta_step")],
        batch_grid=merged[("study", "batch_grid")],
        lr_factor=merged[("study", "lr_factor")],
        explicit=frozenset(explicit),
    )
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg.source not in ("blobs", "idx"):
        raise ConfigError(f"data source must be 'blobs' or 'idx', got {cfg.source!r}")
    if cfg.source == "idx" and (not cfg.images or not cfg.labels):
        raise ConfigError("idx source needs [data] images and labels paths")
    if cfg.schedule not in ("constant", "stepwise", "cyclical", "trapezoid"):
        raise ConfigError(f"unknown schedule {cfg.schedule!r}")
    if cfg.schedule != "constant" and cfg.lr == 0.0:
        raise ConfigError(f"{cfg.schedule} schedule needs an explicit lr")
    if cfg.noise != "none":
        if not cfg.noise.startswith("iso:"):
            raise ConfigError(f"noise must be 'none' or 'iso:FACTOR', got {cfg.noise!r}")
        try:
            factor = float(cfg.noise.partition(":")[2])
        except ValueError as exc:
            raise ConfigError(f"bad noise factor in {cfg.noise!r}") from exc
        if factor < 0:
            raise ConfigError("noise factor must be nonnegative")
    if cfg.batch_size < 1 or cfg.epochs < 0 or cfg.eval_period < 1:
        raise ConfigError("batch_size/epochs/eval_period out of range")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    if not cfg.lr_grid:
        raise ConfigError("lr_grid must not be empty")
    if cfg.smooth_window < 1:
        raise ConfigError("smooth_window must be at least 1")
    if cfg.eta_step <= 0 or cfg.eta_start <= 0 or cfg.eta_stop < cfg.eta_start:
        raise ConfigError("quad eta grid must satisfy 0 < start <= stop, step > 0")
    if any(lam <= 0 for lam in cfg.lambdas):
        raise ConfigError("quad lambdas must be positive")
