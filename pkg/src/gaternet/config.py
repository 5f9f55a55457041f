"""Run configuration: one JSON document describing a whole experiment.

The document has four top-level sections: seed, out_dir, dataset, model,
train. Parsing is strict: an unknown key anywhere is an error naming the
key and where it appeared, because a silently ignored typo (say
"wieght_decay") would invalidate an experiment without any visible
symptom. Input paths named by the dataset section must exist at load
time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from gaternet.data import DataError, DatasetDescriptor
from gaternet.model import LayerSpec, ModelSpec, validate_spec
from gaternet.train import PHASES, TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _require_dict(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object, got {type(value).__name__}")
    return value


_MISSING = object()


class _Section:
    """Dict wrapper that tracks consumed keys and rejects leftovers."""

    def __init__(self, raw: dict, where: str):
        self.raw = _require_dict(raw, where)
        self.where = where
        self.taken: set[str] = set()

    def take(self, key: str, default=_MISSING):
        self.taken.add(key)
        if key in self.raw:
            return self.raw[key]
        if default is _MISSING:
            raise ConfigError(f"{self.where} is missing required key {key!r}")
        return default

    def finish(self) -> None:
        unknown = sorted(set(self.raw) - self.taken)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r} in {self.where}")


def _parse_layer(raw: dict, where: str) -> LayerSpec:
    sec = _Section(raw, where)
    kind = sec.take("kind")
    kwargs = {"kind": kind}
    fields = {
        "conv": ("filters", "kernel", "stride", "padding", "gated", "batchnorm"),
        "pool": ("window",),
        "fc": ("width",),
    }.get(kind)
    if fields is None:
        raise ConfigError(f"{where}: unknown layer kind {kind!r}")
    for name in fields:
        if name in sec.raw:
            kwargs[name] = sec.take(name)
    sec.finish()
    try:
        return LayerSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _parse_model(raw: dict) -> ModelSpec:
    sec = _Section(raw, "model")
    try:
        spec = ModelSpec(
            input_shape=tuple(sec.take("input_shape")),
            num_classes=int(sec.take("num_classes")),
            backbone=tuple(
                _parse_layer(l, f"model.backbone[{i}]")
                for i, l in enumerate(sec.take("backbone"))
            ),
            gater=tuple(
                _parse_layer(l, f"model.gater[{i}]")
                for i, l in enumerate(sec.take("gater", ()))
            ),
            bottleneck=int(sec.take("bottleneck", 1)),
        )
        sec.finish()
        validate_spec(spec)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from e
    return spec


def _parse_dataset(raw: dict, base_dir: Path) -> DatasetDescriptor:
    sec = _Section(raw, "dataset")
    kind = sec.take("kind")
    common = {
        "mean": tuple(sec.take("mean", (0.0, 0.0, 0.0))),
        "std": tuple(sec.take("std", (1.0, 1.0, 1.0))),
        "random_crop": bool(sec.take("random_crop", False)),
        "mirror": bool(sec.take("mirror", False)),
    }
    if kind == "synthetic":
        desc = dict(
            kind=kind,
            num_classes=int(sec.take("num_classes")),
            train_size=int(sec.take("train_size")),
            eval_size=int(sec.take("eval_size")),
            image_size=int(sec.take("image_size", 16)),
            noise=float(sec.take("noise", 0.25)),
            **common,
        )
    elif kind == "cifar10":
        train_paths = tuple(
            str(base_dir / p) for p in sec.take("train_paths")
        )
        eval_path = str(base_dir / sec.take("eval_path"))
        for p in (*train_paths, eval_path):
            if not Path(p).is_file():
                raise ConfigError(f"dataset file does not exist: {p}")
        desc = dict(kind=kind, train_paths=train_paths, eval_path=eval_path,
                    **common)
    else:
        raise ConfigError(f"dataset: unknown kind {kind!r}")
    sec.finish()
    try:
        return DatasetDescriptor(**desc)
    except DataError as e:
        raise ConfigError(f"dataset: {e}") from e


@dataclass(frozen=True)
class PhaseSettings:
    epochs: int
    lr_schedule: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run needs."""

    seed: int
    out_dir: str
    dataset: DatasetDescriptor
    model: ModelSpec
    phases: dict[str, PhaseSettings]
    batch_size: int
    momentum: float
    weight_decay: float
    lambda_: float
    reg_reduction: str
    dropout_start: float
    dropout_end: float

    def make_phase_config(self, phase: str) -> TrainConfig:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}, expected one of {PHASES}")
        settings = self.phases[phase]
        try:
            return TrainConfig(
                phase=phase,
                epochs=settings.epochs,
                batch_size=self.batch_size,
                lr_schedule=settings.lr_schedule,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                lambda_=self.lambda_,
                seed=self.seed,
                dropout_start=self.dropout_start,
                dropout_end=self.dropout_end,
                reg_reduction=self.reg_reduction,
            )
        except ValueError as e:
            raise ConfigError(f"train.phases.{phase}: {e}") from e


def _parse_schedule(raw, where: str) -> tuple[tuple[int, float], ...]:
    if not isinstance(raw, list) or not all(
        isinstance(p, list) and len(p) == 2 for p in raw
    ):
        raise ConfigError(f"{where} must be a list of [epoch, lr] pairs")
    return tuple((int(e), float(lr)) for e, lr in raw)


def _parse_train(raw: dict) -> dict:
    sec = _Section(raw, "train")
    phases_raw = _require_dict(sec.take("phases"), "train.phases")
    unknown = sorted(set(phases_raw) - set(PHASES))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in train.phases")
    phases = {}
    for name in PHASES:
        if name not in phases_raw:
            raise ConfigError(f"train.phases is missing required key {name!r}")
        psec = _Section(phases_raw[name], f"train.phases.{name}")
        phases[name] = PhaseSettings(
            epochs=int(psec.take("epochs")),
            lr_schedule=_parse_schedule(
                psec.take("lr_schedule"), f"train.phases.{name}.lr_schedule"
            ),
        )
        psec.finish()
    out = {
        "phases": phases,
        "batch_size": int(sec.take("batch_size")),
        "momentum": float(sec.take("momentum", 0.9)),
        "weight_decay": float(sec.take("weight_decay", 0.0)),
        "lambda_": float(sec.take("lambda", 0.1)),
        "reg_reduction": str(sec.take("reg_reduction", "mean")),
        "dropout_start": float(sec.take("dropout_start", 0.0)),
        "dropout_end": float(sec.take("dropout_end", 0.05)),
    }
    sec.finish()
    return out


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a run configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    sec = _Section(raw, "config")
    seed = int(sec.take("seed", 0))
    out_dir = str(sec.take("out_dir"))
    dataset = _parse_dataset(
        _require_dict(sec.take("dataset"), "dataset"), path.parent
    )
    model = _parse_model(_require_dict(sec.take("model"), "model"))
    train = _parse_train(_require_dict(sec.take("train"), "train"))
    sec.finish()
    if model.num_classes != dataset.num_classes:
        raise ConfigError(
            f"model.num_classes = {model.num_classes} does not match the "
            f"dataset's {dataset.num_classes} classes"
        )
    cfg = RunConfig(seed=seed, out_dir=out_dir, dataset=dataset, model=model,
                    **train)
    for phase in PHASES:
        cfg.make_phase_config(phase)  # fail fast on bad hyperparameters
    return cfg
