"""Run configuration: one YAML or JSON file drives every subcommand.

Schema (all blocks optional; defaults are materialised in the resolved snapshot):

    seed: 0
    dataset:
      name: mnist | fashion_mnist | cifar10 | toy
      paths:                     # IDX datasets
        train_images, train_labels, test_images, test_labels
      paths:                     # cifar10
        train: [batch files], test: [batch files]
      train_subset, test_subset, eval_subset, attack_subset, verify_subset, subset_seed
      toy: {n_train, n_test, num_classes, shape}
    models: [{name, architecture, checkpoint, hidden}]    # or a single `model:` block
    train: {epochs, batch_size, lr, beta1, beta2, eps_adam, lam, delta_pen, dtype}
    attack: {eps, step_alpha, steps, restarts, random_start, loss}
    verify: {methods, eps, threshold}
    attribution: {m, n, sigma, delta, blur_kernel, noise_sigma, curve_steps, baselines}
    ablation: {lambdas}
    correlate: {reports}

Relative paths are resolved against the config file's directory.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .attribution import BASELINE_KINDS
from .data import DEFAULT_EPS
from .errors import ConfigError, ContractError
from .models import ARCHITECTURES
from .training import TrainConfig
from .verification import METHODS

DATASETS = ("mnist", "fashion_mnist", "cifar10", "toy")
IDX_KEYS = ("train_images", "train_labels", "test_images", "test_labels")
ENV_OUTPUT_ROOT = "TRIGUARD_OUTPUT_ROOT"


@dataclass
class ToyCfg:
    n_train: int = 512
    n_test: int = 128
    num_classes: int = 3
    shape: list = field(default_factory=lambda: [1, 8, 8])


@dataclass
class DatasetCfg:
    name: str = "mnist"
    paths: dict = field(default_factory=dict)
    train_subset: int = None
    test_subset: int = None
    eval_subset: int = 200
    attack_subset: int = 1000
    verify_subset: int = 200
    subset_seed: int = 0
    toy: ToyCfg = field(default_factory=ToyCfg)


@dataclass
class ModelCfg:
    name: str = "simple_cnn"
    architecture: str = "simple_cnn"
    checkpoint: str = None
    hidden: list = field(default_factory=lambda: [64])


@dataclass
class TrainCfg:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lam: float = 0.0
    delta_pen: float = 1e-10
    dtype: str = "float32"


@dataclass
class AttackCfg:
    eps: float = None
    step_alpha: float = None
    steps: int = 40
    restarts: int = 1
    random_start: bool = True
    loss: str = "ce"


@dataclass
class VerifyCfg:
    methods: list = field(default_factory=lambda: list(METHODS))
    eps: float = None
    threshold: float = 0.5


@dataclass
class AttributionCfg:
    m: int = 64
    n: int = 25
    sigma: float = 0.1
    delta: float = 1e-10
    blur_kernel: int = 5
    noise_sigma: float = 0.1
    curve_steps: int = 50
    baselines: list = field(default_factory=lambda: list(BASELINE_KINDS))


@dataclass
class AblationCfg:
    lambdas: list = field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1])


@dataclass
class CorrelateCfg:
    reports: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    models: list = field(default_factory=lambda: [ModelCfg()])
    train: TrainCfg = field(default_factory=TrainCfg)
    attack: AttackCfg = field(default_factory=AttackCfg)
    verify: VerifyCfg = field(default_factory=VerifyCfg)
    attribution: AttributionCfg = field(default_factory=AttributionCfg)
    ablation: AblationCfg = field(default_factory=AblationCfg)
    correlate: CorrelateCfg = field(default_factory=CorrelateCfg)

    # -- derived objects --------------------------------------------------
    def train_config(self):
        return TrainConfig(**asdict(self.train), seed=self.seed,
                           train_subset=self.dataset.train_subset)

    def attack_config(self):
        a = self.attack
        return AttackConfig(eps=a.eps, step_alpha=a.step_alpha, steps=a.steps,
                            restarts=a.restarts, random_start=a.random_start, seed=self.seed,
                            loss=a.loss)

    def snapshot(self):
        """Every setting with defaults filled in, as plain JSON-able data."""
        return asdict(self)


# nested blocks; `models` is a list and handled separately
_NESTED = {"dataset": DatasetCfg, "train": TrainCfg, "attack": AttackCfg, "verify": VerifyCfg,
           "attribution": AttributionCfg, "ablation": AblationCfg, "correlate": CorrelateCfg,
           "toy": ToyCfg}


def _check_type(value, kind, path):
    if value is None:
        return value
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(path, f"expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, raw, path=""):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs = {}
    for f in fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in _NESTED:
            kwargs[f.name] = _build(_NESTED[f.name], raw.get(f.name), sub)
        elif f.name in raw:
            kwargs[f.name] = _check_type(raw[f.name], f.type, sub)
    return cls(**kwargs)


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def _resolve_path(value, base, path):
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    _require(p.exists(), path, f"file not found: {p}")
    return str(p.resolve())


def _validate(cfg, base, command):
    ds = cfg.dataset
    _require(ds.name in DATASETS, "dataset.name", f"must be one of {DATASETS}, got {ds.name!r}")
    for key in ("train_subset", "test_subset", "eval_subset", "attack_subset", "verify_subset"):
        value = getattr(ds, key)
        _require(value is None or value >= 1, f"dataset.{key}", "must be >= 1")
    if ds.name == "toy":
        _require(len(ds.toy.shape) == 3 and all(s >= 1 for s in ds.toy.shape),
                 "dataset.toy.shape", "must be [C, H, W] with positive entries")
        _require(ds.toy.n_train >= 1 and ds.toy.n_test >= 1, "dataset.toy", "sizes must be >= 1")
        _require(ds.toy.num_classes >= 2, "dataset.toy.num_classes", "must be >= 2")
    elif ds.name == "cifar10":
        for split in ("train", "test"):
            files = ds.paths.get(split)
            _require(isinstance(files, list) and files, f"dataset.paths.{split}",
                     "a nonempty list of batch files is required")
            ds.paths[split] = [_resolve_path(p, base, f"dataset.paths.{split}[{i}]")
                               for i, p in enumerate(files)]
    else:
        for key in IDX_KEYS:
            _require(key in ds.paths, f"dataset.paths.{key}", "missing required path")
            ds.paths[key] = _resolve_path(ds.paths[key], base, f"dataset.paths.{key}")
    allowed = {"toy": (), "cifar10": ("train", "test")}.get(ds.name, IDX_KEYS)
    for key in sorted(set(ds.paths) - set(allowed)):
        raise ConfigError(f"dataset.paths.{key}", "unknown path key")

    _require(len(cfg.models) >= 1, "models", "at least one model is required")
    seen = set()
    for i, m in enumerate(cfg.models):
        p = f"models[{i}]"
        _require(m.architecture in (*ARCHITECTURES, "mlp"), f"{p}.architecture",
                 f"unknown architecture {m.architecture!r}")
        _require(m.name not in seen, f"{p}.name", f"duplicate model name {m.name!r}")
        seen.add(m.name)
        _require(all(isinstance(h, int) and h >= 1 for h in m.hidden), f"{p}.hidden",
                 "widths must be positive integers")
        if command not in ("train", "ablate-lambda", "correlate"):
            _require(m.checkpoint is not None, f"{p}.checkpoint", "a checkpoint is required")
        if m.checkpoint is not None and command not in ("train", "ablate-lambda"):
            m.checkpoint = _resolve_path(m.checkpoint, base, f"{p}.checkpoint")

    eps_default = DEFAULT_EPS[ds.name]
    if cfg.attack.eps is None:
        cfg.attack.eps = eps_default
    if cfg.attack.step_alpha is None:
        cfg.attack.step_alpha = cfg.attack.eps / 4
    if cfg.verify.eps is None:
        cfg.verify.eps = eps_default
    _require(cfg.verify.eps >= 0, "verify.eps", "must be >= 0")
    _require(0 <= cfg.verify.threshold <= 1, "verify.threshold", "must lie in [0, 1]")
    _require(cfg.verify.methods and all(m in METHODS for m in cfg.verify.methods),
             "verify.methods", f"each method must be one of {METHODS}")

    at = cfg.attribution
    _require(at.m >= 1, "attribution.m", "must be >= 1")
    _require(at.n >= 1, "attribution.n", "must be >= 1")
    _require(at.sigma >= 0, "attribution.sigma", "must be >= 0")
    _require(at.delta > 0, "attribution.delta", "must be > 0")
    _require(at.blur_kernel >= 1 and at.blur_kernel % 2 == 1, "attribution.blur_kernel",
             "must be odd and positive")
    _require(at.curve_steps >= 2, "attribution.curve_steps", "must be >= 2")
    _require(set(at.baselines) <= set(BASELINE_KINDS), "attribution.baselines",
             f"each baseline must be one of {BASELINE_KINDS}")

    lams = cfg.ablation.lambdas
    _require(len(lams) >= 1, "ablation.lambdas", "must be nonempty")
    _require(all(isinstance(v, (int, float)) and v >= 0 for v in lams), "ablation.lambdas",
             "values must be numbers >= 0")
    _require(list(lams) == sorted(lams), "ablation.lambdas", "must be sorted ascending")
    cfg.ablation.lambdas = [float(v) for v in lams]

    if command == "correlate":
        _require(len(cfg.correlate.reports) >= 1, "correlate.reports", "list at least one report")
        cfg.correlate.reports = [_resolve_path(p, base, f"correlate.reports[{i}]")
                                 for i, p in enumerate(cfg.correlate.reports)]

    # range checks owned by the library dataclasses, reported with field paths
    for section, build in (("train", cfg.train_config), ("attack", cfg.attack_config)):
        try:
            build()
        except ContractError as exc:
            raise ConfigError(section, str(exc)) from None
    return cfg


def parse_config(raw, base_dir=".", command=None):
    """Validate a config mapping; returns a RunConfig with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw = dict(raw)
    if "model" in raw:
        _require("models" not in raw, "model", "give either `model` or `models`, not both")
        raw["models"] = [raw.pop("model")]
    models_raw = raw.pop("models", None)
    cfg = _build(RunConfig, raw)
    if models_raw is not None:
        _require(isinstance(models_raw, list), "models", "must be a list")
        cfg.models = [_build(ModelCfg, m, f"models[{i}]") for i, m in enumerate(models_raw)]
    return _validate(cfg, Path(base_dir), command)


def load_config(path, command=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("--config", f"cannot parse {path}: {exc}") from None
    return parse_config(raw or {}, path.parent, command)


def output_dir(cli_value, command):
    """--output-dir wins, then $TRIGUARD_OUTPUT_ROOT/<command>, then ./triguard-out/<command>."""
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "triguard-out")) / command
