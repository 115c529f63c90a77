"""Run configuration: a JSON object tree with every key checked.

Unknown keys are rejected. Seeds left as ``null`` are derived from
``master_seed``, so one integer reproduces a whole run.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from decu.branching import Codec
from decu.dataset import DatasetConfig
from decu.ensemble import ModelConfig, component_seeds_for
from decu.rng import derive_key

DEFAULT_BRANCH_FRACTIONS = (1.0, 0.75, 0.5, 0.25)
SHIPPED_SEEDS = (0, 1, 2, 3, 4)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    branch_points: tuple = None     # None: DEFAULT_BRANCH_FRACTIONS of T
    class_branch_point: int = None  # None: the smallest grid step
    n_noise: int = 8
    n_seeds: int = 5
    curve_class: int = 0
    curve_seeds: int = 20
    eval_seed: int = None


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 0
    dataset_seed: int = None
    component_seeds: tuple = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    output_dir: str = "runs/default"

    # -- derived values -----------------------------------------------------

    def resolved_dataset_seed(self):
        if self.dataset_seed is not None:
            return int(self.dataset_seed)
        return derive_key(self.master_seed, "dataset") % (2**31)

    def resolved_component_seeds(self):
        if self.component_seeds is not None:
            return tuple(int(s) for s in self.component_seeds)
        return component_seeds_for(self.master_seed, self.model.n_components)

    def resolved_eval_seed(self):
        if self.experiment.eval_seed is not None:
            return int(self.experiment.eval_seed)
        return derive_key(self.master_seed, "eval") % (2**31)

    def stride(self):
        return self.model.T // self.model.ddim_steps

    def branch_points(self):
        if self.experiment.branch_points is not None:
            return tuple(int(b) for b in self.experiment.branch_points)
        return tuple(int(round(f * self.model.T)) for f in DEFAULT_BRANCH_FRACTIONS)

    def class_branch_point(self):
        b = self.experiment.class_branch_point
        return self.stride() if b is None else int(b)

    def latent_dim(self):
        size = int(self.dataset.image_size)
        return Codec(self.model.codec).latent_dim((size, size))

    # -- checks and serialisation -------------------------------------------

    def validate(self):
        try:
            self.dataset.validate()
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.component_seeds is not None and len(self.component_seeds) != self.model.n_components:
            raise ConfigError("component_seeds: need one seed per component "
                              f"({self.model.n_components})")
        ex = self.experiment
        if ex.n_noise < 1 or ex.n_seeds < 1 or ex.curve_seeds < 1:
            raise ConfigError("experiment: n_noise, n_seeds and curve_seeds must be >= 1")
        if not 0 <= ex.curve_class < self.dataset.n_classes:
            raise ConfigError(f"experiment.curve_class: must be in 0..{self.dataset.n_classes - 1}")
        stride = self.stride()
        for b in self.branch_points() + (self.class_branch_point(),):
            if b < stride or b > self.model.T or b % stride:
                raise ConfigError(f"experiment: branch point {b} is not on the DDIM grid "
                                  f"(multiples of {stride} up to {self.model.T})")
        return self

    def to_dict(self):
        def plain(v):
            return list(v) if isinstance(v, tuple) else v

        ds = {k: plain(v) for k, v in asdict(self.dataset).items()}
        mc = asdict(self.model)
        ex = {k: plain(v) for k, v in asdict(self.experiment).items()}
        return {
            "master_seed": self.master_seed,
            "dataset_seed": self.dataset_seed,
            "component_seeds": plain(self.component_seeds),
            "dataset": ds,
            "model": {k: mc[k] for k in _MODEL_KEYS},
            "schedule": {k: mc[k] for k in _SCHEDULE_KEYS},
            "training": {k: mc[k] for k in _TRAINING_KEYS},
            "experiment": ex,
            "output_dir": self.output_dir,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


_MODEL_KEYS = ("hidden", "embed_dim", "codec", "latent_scale", "n_components")
_SCHEDULE_KEYS = ("T", "beta_start", "beta_end", "ddim_steps")
_TRAINING_KEYS = ("pretrain_steps", "component_steps", "batch_size", "lr", "embed_init_scale")


def _check_type(path, value, kind, nullable=False):
    if value is None and nullable:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(value, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _int_list(path, value, nullable=False):
    if value is None and nullable:
        return None
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list of integers")
    return tuple(_check_type(f"{path}[{i}]", v, int) for i, v in enumerate(value))


def _section(path, obj, allowed):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    return obj


def _typed_fields(path, obj, cls, names, special=None):
    special = special or {}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for name in names:
        if name not in obj:
            continue
        if name in special:
            out[name] = special[name](f"{path}.{name}", obj[name])
            continue
        default = defaults[name]
        kind = type(default) if default is not None else int
        out[name] = _check_type(f"{path}.{name}", obj[name], kind, nullable=default is None)
    return out


def from_dict(data):
    top = _section("config", data, ("master_seed", "dataset_seed", "component_seeds", "dataset",
                                    "model", "schedule", "training", "experiment", "output_dir"))
    kw = {}
    if "master_seed" in top:
        kw["master_seed"] = _check_type("master_seed", top["master_seed"], int)
    if "dataset_seed" in top:
        kw["dataset_seed"] = _check_type("dataset_seed", top["dataset_seed"], int, nullable=True)
    if "component_seeds" in top:
        kw["component_seeds"] = _int_list("component_seeds", top["component_seeds"], nullable=True)
    if "output_dir" in top:
        kw["output_dir"] = _check_type("output_dir", top["output_dir"], str)

    ds_names = [f.name for f in fields(DatasetConfig)]
    ds = _section("dataset", top.get("dataset", {}), ds_names)
    kw["dataset"] = DatasetConfig(**_typed_fields(
        "dataset", ds, DatasetConfig, ds_names,
        {"class_counts": _int_list, "bin_counts": _int_list}))

    model_kw = {}
    for name, keys in (("model", _MODEL_KEYS), ("schedule", _SCHEDULE_KEYS),
                       ("training", _TRAINING_KEYS)):
        sec = _section(name, top.get(name, {}), keys)
        model_kw.update(_typed_fields(name, sec, ModelConfig, keys))
    kw["model"] = ModelConfig(**model_kw)

    ex_names = [f.name for f in fields(ExperimentConfig)]
    ex = _section("experiment", top.get("experiment", {}), ex_names)
    kw["experiment"] = ExperimentConfig(**_typed_fields(
        "experiment", ex, ExperimentConfig, ex_names,
        {"branch_points": lambda p, v: _int_list(p, v, nullable=True)}))
    return RunConfig(**kw).validate()


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(data)


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc.reason})") from exc
    return loads(text)


def with_seed(config, master_seed):
    return replace(config, master_seed=int(master_seed)).validate()


# every model field lives in exactly one section
assert set(_MODEL_KEYS + _SCHEDULE_KEYS + _TRAINING_KEYS) == {f.name for f in fields(ModelConfig)}
