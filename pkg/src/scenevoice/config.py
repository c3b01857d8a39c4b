"""Run configuration: defaults, JSON files, and dotted command-line overrides.

A run config is a tree of sections (world, data, model, train, eval, ablate).
Files and overrides are merged into the default tree first; the merged plain
dict is what gets echoed to `resolved_config.json`, then turned into typed
section objects.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import LossWeights
from .synth import WorldSpec
from .train import TrainConfig


@dataclass
class DataConfig:
    n_samples: int = 2048
    mode_mix: tuple = (0.5, 0.25, 0.25)
    data_seed: int = 1
    # distinct-class eval pairs; the default world has 8*8 class combinations
    eval_pairs: int = 64
    eval_seed: int = 2

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("data.n_samples must be >= 1")
        if self.eval_pairs < 2:
            raise ConfigError("data.eval_pairs must be >= 2")


@dataclass
class ModelConfig:
    slot_count: int = 32
    init_seed: int = 3

    def validate(self) -> None:
        if self.slot_count < 1:
            raise ConfigError("model.slot_count must be >= 1")


@dataclass
class EvalConfig:
    n_probe: int = 128
    probe_seed: int = 4
    use_ema: bool = False

    def validate(self) -> None:
        if self.n_probe < 50:
            raise ConfigError("eval.n_probe must be >= 50")


@dataclass
class AblateConfig:
    slot_values: tuple = (32, 64, 128, 256)

    def validate(self) -> None:
        if not self.slot_values or any(int(n) < 1 for n in self.slot_values):
            raise ConfigError("ablate.slot_values must be positive slot counts")


@dataclass
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> None:
        self.world.validate()
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.ablate.validate()


SECTIONS = ("world", "data", "model", "train", "eval", "ablate")


def default_dict() -> dict:
    """The full default tree as a JSON-ready plain dict."""
    return _as_plain(dataclasses.asdict(RunConfig()))


def _as_plain(obj):
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_as_plain(v) for v in obj]
    return obj


def merge_tree(base: dict, update: dict, prefix: str = "") -> None:
    """Recursively fold `update` into `base`, rejecting unknown keys."""
    for key, val in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config field {path!r} must be a section object")
            merge_tree(base[key], val, path + ".")
        else:
            base[key] = val


def _coerce(raw: str, template, path: str):
    """Parse an override string using the default value's type as template."""
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, (list, tuple)):
            val = json.loads(raw)
            if not isinstance(val, list):
                raise ValueError(raw)
            return val
        return raw
    except ValueError as exc:
        kind = type(template).__name__
        raise ConfigError(f"override {path!r}: cannot parse {raw!r} as {kind}") from exc


def apply_overrides(tree: dict, overrides: list[tuple[str, str]]) -> None:
    """Apply dotted-path (key, value) overrides in place, with type coercion."""
    for dotted, raw in overrides:
        parts = dotted.split(".")
        node = tree
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config field {dotted!r}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config field {dotted!r}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"override {dotted!r} targets a section, not a value")
        node[leaf] = _coerce(raw, node[leaf], dotted)


def load_config_file(path: str | os.PathLike) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def resolve_tree(
    config_path: str | os.PathLike | None = None,
    overrides: list[tuple[str, str]] | None = None,
) -> dict:
    """Defaults, then file, then overrides; returns the merged plain dict."""
    tree = default_dict()
    if config_path is not None:
        merge_tree(tree, load_config_file(config_path))
    if overrides:
        apply_overrides(tree, overrides)
    return tree


def _build(cls, section: str, data: dict, tuple_fields: tuple[str, ...] = ()):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config field {section}.{unknown[0]!r}")
    kwargs = dict(data)
    for name in tuple_fields:
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} section: {exc}") from exc


def config_from_tree(tree: dict) -> RunConfig:
    unknown = sorted(set(tree) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r}")
    train_data = dict(tree.get("train", {}))
    lw = train_data.pop("loss_weights", None)
    train = _build(TrainConfig, "train", train_data)
    if lw is not None:
        train.loss_weights = _build(LossWeights, "train.loss_weights", lw)
    cfg = RunConfig(
        world=_build(WorldSpec, "world", tree.get("world", {}), tuple_fields=("snr_db_range",)),
        data=_build(DataConfig, "data", tree.get("data", {}), tuple_fields=("mode_mix",)),
        model=_build(ModelConfig, "model", tree.get("model", {})),
        train=train,
        eval=_build(EvalConfig, "eval", tree.get("eval", {})),
        ablate=_build(AblateConfig, "ablate", tree.get("ablate", {}), tuple_fields=("slot_values",)),
    )
    try:
        cfg.validate()
    except (ValueError, ConfigError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def apply_master_seed(tree: dict, seed: int) -> None:
    """Derive every per-purpose seed in the tree from one master seed."""
    tree["world"]["seed"] = seed
    tree["data"]["data_seed"] = seed + 1
    tree["data"]["eval_seed"] = seed + 2
    tree["model"]["init_seed"] = seed + 3
    tree["train"]["seed"] = seed + 4
    tree["eval"]["probe_seed"] = seed + 5


def write_resolved(tree: dict, out_dir: str | os.PathLike) -> str:
    """Echo the merged config to out_dir/resolved_config.json; returns the path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(os.fspath(out_dir), "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
