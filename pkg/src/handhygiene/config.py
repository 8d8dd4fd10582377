"""Pipeline configuration: one YAML file, presets for the two published experiments."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .labels import SET_1, GestureLabel, parse_labels
from .model import BackboneSpec, HeadSpec
from .prep import PreprocessConfig, SplitSpec
from .trainer import TrainConfig

PRESETS = ("set1", "set2")

DEFAULTS: dict = {
    "experiment": "run",
    "seed": 0,
    "out_dir": "runs",
    "classes": [label.value for label in SET_1],
    "ingest": {
        "videos_dir": None,
        "images_dir": None,
        "sample_every": 1,
        "activity_threshold": 0.02,
        "min_pause_frames": None,  # half the video frame rate
    },
    "split": {"val_fraction": 0.25, "balance_tolerance": 0.2},
    "preprocess": {"target_size": [224, 224], "channel_means": [123.675, 116.28, 103.53], "scale": 1.0},
    "backbone": {"weights_path": None, "weights_sha256": None},
    "head": {"hidden_units": 512, "dropout_rate": 0.5},
    "train": {"epochs": 25, "batch_size": 32, "learning_rate": 1e-4, "momentum": 0.9, "optimizer": "sgd"},
    "predict": {"window": 30, "batch_size": 16},
}

_PATH_KEYS = [("ingest", "videos_dir"), ("ingest", "images_dir"), ("backbone", "weights_path")]


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class PipelineConfig:
    raw: dict
    source: str | None = None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def classes(self) -> list[GestureLabel]:
        return parse_labels(self.raw["classes"])

    @property
    def ingest(self) -> dict:
        return self.raw["ingest"]

    @property
    def split_spec(self) -> SplitSpec:
        return SplitSpec(val_fraction=float(self.raw["split"]["val_fraction"]), seed=self.seed)

    @property
    def balance_tolerance(self) -> float:
        return float(self.raw["split"]["balance_tolerance"])

    @property
    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig.from_json(self.raw["preprocess"])

    @property
    def backbone(self) -> BackboneSpec:
        return BackboneSpec(**self.raw["backbone"])

    @property
    def head(self) -> HeadSpec:
        return HeadSpec(num_classes=len(self.classes), seed=self.seed, **self.raw["head"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, class_order=self.classes, **self.raw["train"])

    @property
    def window(self) -> int:
        return int(self.raw["predict"]["window"])

    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.raw["out_dir"]) / f"{self.raw['experiment']}-{self.digest()[:12]}"

    def validate(self) -> None:
        try:
            classes = self.classes
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(set(classes)) != len(classes) or len(classes) < 2:
            raise ConfigError("classes must list at least two distinct gesture labels")
        # construct every typed section once so bad values fail at load time
        self.split_spec, self.preprocess, self.head, self.train, self.backbone
        if self.window < 1:
            raise ConfigError("predict.window must be >= 1")

    def dump(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.raw, sort_keys=True))
        return path


def preset_path(name: str):
    return resources.files("handhygiene") / "presets" / f"{name}.yaml"


def load_config(
    source: str | os.PathLike | None = None,
    seed: int | None = None,
    out_dir: str | os.PathLike | None = None,
    overrides: dict | None = None,
) -> PipelineConfig:
    """Read a config file (or a preset name), apply flag overrides, resolve paths.

    Relative paths in a config file resolve against the file's directory;
    preset paths resolve against the working directory.
    """
    data: dict = {}
    base_dir = Path.cwd()
    if source is not None:
        text = None
        if str(source) in PRESETS and not Path(source).exists():
            text = preset_path(str(source)).read_text()
        else:
            p = Path(source)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            text = p.read_text()
            base_dir = p.resolve().parent
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {source}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {source} must be a mapping")
    raw = _merge(DEFAULTS, data)
    if overrides:
        raw = _merge(raw, overrides)
    if seed is not None:
        raw["seed"] = int(seed)
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)
    for section, key in _PATH_KEYS:
        value = raw[section][key]
        if value:
            raw[section][key] = str((base_dir / Path(value).expanduser()).resolve())
    raw["out_dir"] = str((base_dir / Path(raw["out_dir"]).expanduser()).resolve()) if out_dir is None else str(
        Path(raw["out_dir"]).resolve()
    )
    raw["classes"] = [label.value for label in parse_labels(raw["classes"])]
    cfg = PipelineConfig(raw, str(source) if source is not None else None)
    cfg.validate()
    return cfg
