"""Experiment configuration: one YAML file per experiment.

Example::

    modalities: [AP, VP]
    output_dir: runs/toy
    backbone: {levels: 3, base_channels: 8, feature_channels: 32}
    fusion: {dual_kernel: 1}
    train: {epochs: 200, lr: 0.0003, lam: 0.5, batch_size: 2,
            patch: {size: [32, 32, 32], foreground_bias: 0.5}}
    synth: {num_cases: 8, shape: [32, 32, 32], seed: 0}
    # or, for existing data:
    # manifest: data/manifest.tsv
    # eval_manifest: data/test_manifest.tsv

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig, ConfigError
from .data import SynthSpec
from .engine import TrainConfig
from .fusion import FusionConfig


@dataclass
class ExperimentConfig:
    modalities: list
    output_dir: Path
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec | None = None
    manifest: Path | None = None
    eval_manifest: Path | None = None
    data_format: str = ".nii.gz"

    @property
    def data_dir(self):
        return self.output_dir / "data"

    @property
    def train_manifest(self) -> Path:
        if self.manifest is not None:
            return self.manifest
        return self.data_dir / "manifest.tsv"

    @property
    def test_manifest(self) -> Path:
        return self.eval_manifest or self.train_manifest

    def validate(self):
        mods = list(self.modalities)
        if len(mods) < 2 or len(set(mods)) != len(mods):
            raise ConfigError(f"need at least two distinct modalities, got {mods}")
        if (self.synth is None) == (self.manifest is None):
            raise ConfigError("give exactly one of 'synth' or 'manifest'")
        self.backbone.check_shape(self.train.patch.size)
        if self.synth is not None:
            synth_mods = {self.synth.body_contrast_modality, self.synth.rim_contrast_modality}
            if synth_mods != set(mods):
                raise ConfigError(f"synth modalities {sorted(synth_mods)} != configured {sorted(mods)}")
            if any(p > s for p, s in zip(self.train.patch.size, self.synth.shape)):
                raise ConfigError(f"patch {self.train.patch.size} larger than volumes {self.synth.shape}")
            self.backbone.check_shape(self.synth.shape)
        if self.data_format not in (".nii.gz", ".nii", ".raw"):
            raise ConfigError(f"unknown data_format {self.data_format!r}")
        return self

    def to_dict(self):
        out = {
            "modalities": list(self.modalities),
            "output_dir": str(self.output_dir),
            "backbone": self.backbone.to_dict(),
            "fusion": self.fusion.to_dict(),
            "train": _plain(self.train.to_dict()),
            "data_format": self.data_format,
        }
        if self.synth is not None:
            out["synth"] = _plain(self.synth.to_dict())
        if self.manifest is not None:
            out["manifest"] = str(self.manifest)
        if self.eval_manifest is not None:
            out["eval_manifest"] = str(self.eval_manifest)
        return out

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values, what):
    try:
        return cls(**(values or {}))
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def from_dict(raw: dict, base_dir=Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {"modalities", "output_dir", "backbone", "fusion", "train", "synth",
             "manifest", "eval_manifest", "data_format"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "modalities" not in raw or "output_dir" not in raw:
        raise ConfigError("config needs 'modalities' and 'output_dir'")
    base_dir = Path(base_dir)

    def resolve(p):
        return None if p is None else (base_dir / p if not Path(p).is_absolute() else Path(p))

    cfg = ExperimentConfig(
        modalities=list(raw["modalities"]),
        output_dir=resolve(raw["output_dir"]),
        backbone=_build(BackboneConfig, raw.get("backbone"), "backbone"),
        fusion=_build(FusionConfig, raw.get("fusion"), "fusion"),
        train=_build(TrainConfig, raw.get("train"), "train"),
        synth=_build(SynthSpec, raw["synth"], "synth") if raw.get("synth") is not None else None,
        manifest=resolve(raw.get("manifest")),
        eval_manifest=resolve(raw.get("eval_manifest")),
        data_format=raw.get("data_format", ".nii.gz"),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, path.parent)
