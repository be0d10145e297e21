"""One JSON document configuring every stage.

Sections: ``pipeline``, ``postproc``, ``augment``, ``loss`` and ``synthetic``.
Each mirrors the matching dataclass; omitted keys keep their defaults and
unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from kernelpan.augment import AugConfig
from kernelpan.kernel_update import ConfigError, PipelineConfig
from kernelpan.losses import LossWeights
from kernelpan.postprocess import PostprocConfig
from kernelpan.synthetic import SyntheticSceneSpec

_SECTIONS = {
    "pipeline": PipelineConfig,
    "postproc": PostprocConfig,
    "augment": AugConfig,
    "loss": LossWeights,
    "synthetic": SyntheticSceneSpec,
}


@dataclass(frozen=True)
class Config:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    augment: AugConfig = field(default_factory=AugConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synthetic: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)

    def to_json(self) -> dict:
        out = {}
        for name in _SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def _build(name: str, cls, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"section {name!r}: unknown keys {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(doc) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return Config(**{k: _build(k, _SECTIONS[k], v) for k, v in doc.items()})


def load_config(path: str | None) -> Config:
    """Reads a config file; None gives all defaults."""
    if path is None:
        return Config()
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return config_from_dict(doc)
