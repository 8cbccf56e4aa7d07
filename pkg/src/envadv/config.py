"""Run configuration: one YAML file, sectioned by component.

Every field can be overridden from the command line as ``--section.field
VALUE``; values are parsed as YAML scalars, so ``--train.env_lr null`` and
``--trunk.env_normalize true`` work as expected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .dsp import DspConfig
from .losses import LossConfig
from .nets import TrunkConfig
from .trainer import TrainConfig, VerifConfig

# Fields owned by another section (alpha and the triplet margin live in
# ``loss``) or filled in at run time (the number of training speakers).
_DERIVED = {"train": {"alpha", "margin"}, "trunk": {"n_speakers"}}


@dataclass
class Paths:
    corpus_root: str | None = None
    manifest: str | None = None
    out_dir: str | None = None
    cache_dir: str | None = None


_SECTIONS = {
    "trunk": TrunkConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "dsp": DspConfig,
    "verif": VerifConfig,
    "paths": Paths,
}


def _defaults(cls, section):
    skip = _DERIVED.get(section, set())
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {k: _defaults(c, k) for k, c in _SECTIONS.items()})

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls()
        if path:
            data = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(data, dict):
                raise ValueError(f"{path}: expected a mapping of sections")
            for section, values in data.items():
                for key, value in (values or {}).items():
                    cfg.set(f"{section}.{key}", value)
        for key, value in overrides:
            cfg.set(key, value)
        cfg.build()  # validate eagerly
        return cfg

    def set(self, dotted, value):
        section, _, key = dotted.partition(".")
        if section not in self.sections or key not in self.sections[section]:
            raise ValueError(f"unknown config field {dotted!r}")
        if isinstance(value, str):
            value = yaml.safe_load(value) if value != "" else value
        if isinstance(value, str):
            try:  # YAML 1.1 reads exponents without a dot (1e-8) as strings
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, list):
            value = tuple(value)
        self.sections[section][key] = value

    def get(self, dotted):
        section, _, key = dotted.partition(".")
        return self.sections[section][key]

    def build(self):
        """Instantiate the component configs."""
        s = self.sections
        loss = LossConfig(**s["loss"])
        return {
            "trunk": TrunkConfig(**s["trunk"]),
            "train": TrainConfig(**s["train"], alpha=loss.alpha, margin=loss.margin_m),
            "loss": loss,
            "dsp": DspConfig(**s["dsp"]),
            "verif": VerifConfig(**s["verif"]),
            "paths": Paths(**s["paths"]),
        }

    def to_dict(self):
        return json.loads(json.dumps(self.sections))

    def hash(self) -> str:
        """Stable hash of everything except paths."""
        body = {k: v for k, v in self.to_dict().items() if k != "paths"}
        return hashlib.sha1(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @staticmethod
    def field_names():
        return [f"{sec}.{name}" for sec, cls in _SECTIONS.items() for name in _defaults(cls, sec)]
