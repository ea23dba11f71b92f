"""Run configuration: one flat JSON object merging corpus, model and training keys.

Every key can be overridden on the command line with a kebab-case flag
(``tcn_stacks`` -> ``--tcn-stacks``). Values given on the command line are
parsed as JSON when possible, so ``--filter-lengths [20,80,160]`` and
``--use-frame false`` work; list-valued keys also accept ``a,b,c``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .dataset import CONDITIONS, split_speakers
from .network import ModelConfig
from .training import TrainConfig

# The classifier size is derived from the corpus (number of training speakers).
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "num_speakers")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    run_dir: str = "run"
    corpus_seed: int = 0
    num_speakers: int = 36
    test_speakers: Optional[int] = 4
    utterances_per_speaker: int = 12
    num_train: int = 200
    num_dev: int = 40
    num_test: int = 40
    utterance_seconds: float = 4.0
    reference_seconds: float = 2.0
    conditions: List[str] = field(default_factory=lambda: ["clean"])
    # conditions used for training and dev selection; None means all generated ones
    train_conditions: Optional[List[str]] = None
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_speakers=32))
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.validate()

    @property
    def num_train_speakers(self) -> int:
        return len(split_speakers(self.num_speakers, self.test_speakers)[0])

    def validate(self) -> None:
        for cond in list(self.conditions) + list(self.train_conditions or []):
            if cond not in CONDITIONS:
                raise ConfigError(f"unknown condition {cond!r}; choose from {list(CONDITIONS)}")
        if self.train_conditions and not set(self.train_conditions) <= set(self.conditions):
            raise ConfigError("train_conditions must be a subset of conditions")
        try:
            n_train = self.num_train_speakers
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.num_speakers != n_train:
            raise ConfigError(f"model has {self.model.num_speakers} speaker classes but the "
                              f"corpus has {n_train} training speakers")
        if self.model.num_stages == 1 and self.model.use_frame:
            raise ConfigError("use_frame requires num_stages >= 2 (the frame-level reference "
                              "comes from a previous stage's estimate)")
        if self.model.multitask_gamma != self.train.multitask_gamma:
            raise ConfigError("model and training multitask_gamma disagree")

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name not in ("model", "train"):
                value = getattr(self, f.name)
                out[f.name] = list(value) if isinstance(value, tuple) else value
        model = self.model.to_dict()
        for key in MODEL_KEYS:
            out[key] = model[key]
        for key in TRAIN_KEYS:
            out[key] = getattr(self.train, key)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"model", "train"}
        unknown = set(data) - run_keys - set(MODEL_KEYS) - set(TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = {k: v for k, v in data.items() if k in run_keys}
        model_kw = {k: data[k] for k in MODEL_KEYS if k in data}
        train_kw = {k: data[k] for k in TRAIN_KEYS if k in data}
        if "multitask_gamma" in data:
            model_kw["multitask_gamma"] = train_kw["multitask_gamma"] = data["multitask_gamma"]
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        try:
            n_train = len(split_speakers(base.get("num_speakers", defaults["num_speakers"]),
                                         base.get("test_speakers", defaults["test_speakers"]))[0])
            model = ModelConfig(num_speakers=n_train, **model_kw)
            train = TrainConfig(**train_kw)
            return cls(**base, model=model, train=train)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        data.update(overrides or {})
        return cls.from_dict(data)


def all_keys() -> List[str]:
    run_keys = [f.name for f in dataclasses.fields(RunConfig) if f.name not in ("model", "train")]
    return run_keys + list(MODEL_KEYS) + [k for k in TRAIN_KEYS if k not in MODEL_KEYS]


def parse_override(key: str, text: str):
    """Parse one command-line value for ``key``."""
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    list_keys = {"conditions", "train_conditions", "filter_lengths", "resnet_blocks",
                 "fusion_init"}
    if key in list_keys and isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        value = [json.loads(p) if p.lstrip("-").replace(".", "", 1).isdigit() else p
                 for p in parts]
    elif key in list_keys and not isinstance(value, list) and value is not None:
        value = [value]
    return value
