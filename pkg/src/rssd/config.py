"""Experiment configuration: one INI-style document drives a whole run.

Parsing is strict. Unknown sections or keys are rejected rather than ignored;
a tool that evaluates attacks must not silently drop a mistyped option. Every
key has a documented default (the desk-scale attack setup), values round-trip
parse -> serialize -> parse losslessly, and the serialized form is canonical,
so two runs from the same config compare byte-identical.

Environment variables are limited by design: RSSD_DATA_DIR overrides the
dataset directory and RSSD_THREADS the evaluation thread cap.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attack import ALIGNMENT_MODES, ATTACK_VARIANTS, TRIGGER_KINDS, PoisonSpec, TriggerSpec, default_target_image
from .codec import PatchLayout
from .data import SyntheticSpec
from .denoiser import LATENT_MAPPERS, DenoiserConfig
from .diffusion import SCHEDULE_VARIANTS, NoiseSchedule
from .errors import ConfigError
from .losses import LossWeights


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # synthetic | cifar10
    side: int = 16
    channels: int = 3
    classes: int = 4
    train_size: int = 128
    eval_size: int = 64
    seed: int = 7
    data_dir: str = ""


@dataclass
class LayoutSection:
    patch: int = 4


@dataclass
class PcaSection:
    retained: int = 8


@dataclass
class ScheduleSection:
    horizon: int = 100
    alpha: float = 0.1
    variant: str = "scaled"


@dataclass
class DenoiserSection:
    token_dim: int = 48
    blocks: int = 2
    feature_block: int = 1
    latent_mapper: str = "identity"
    init_seed: int = 3


@dataclass
class WeightsSection:
    lambda_disp: float = 0.5
    alpha1: float = 2.0
    alpha2: float = 1.5
    alpha3: float = 0.5
    beta: float = 0.5
    tau: float = 1.0


@dataclass
class TriggerSection:
    side: int = 4
    kind: str = "noise"
    amplitude: float = 0.5
    seed: int = 5


@dataclass
class PoisonSection:
    rate: float = 0.1
    alignment: str = "train-only"
    variant: str = "badrssd"


@dataclass
class TargetSection:
    kind: str = "disc"  # disc | file
    path: str = ""


@dataclass
class TrainingSection:
    epochs: int = 30
    batch: int = 16
    lr: float = 0.004
    warmup_epochs: int = 3
    seed: int = 11


@dataclass
class EvaluationSection:
    tau_asr: float = 0.6
    sampler_steps: int = 8
    heldout: int = 64
    seed: int = 13
    threads: int = 1


_CHOICES = {
    ("dataset", "kind"): ("synthetic", "cifar10"),
    ("schedule", "variant"): SCHEDULE_VARIANTS,
    ("denoiser", "latent_mapper"): LATENT_MAPPERS,
    ("trigger", "kind"): TRIGGER_KINDS,
    ("poison", "alignment"): ALIGNMENT_MODES,
    ("poison", "variant"): ATTACK_VARIANTS,
    ("target", "kind"): ("disc", "file"),
}

_SECTIONS = {
    "dataset": DatasetSection,
    "layout": LayoutSection,
    "pca": PcaSection,
    "schedule": ScheduleSection,
    "denoiser": DenoiserSection,
    "weights": WeightsSection,
    "trigger": TriggerSection,
    "poison": PoisonSection,
    "target": TargetSection,
    "training": TrainingSection,
    "evaluation": EvaluationSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    pca: PcaSection = field(default_factory=PcaSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    target: TargetSection = field(default_factory=TargetSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # ---- text round trip ----

    def to_text(self) -> str:
        out = io.StringIO()
        for sec_name, section_cls in _SECTIONS.items():
            section = getattr(self, sec_name)
            out.write(f"[{sec_name}]\n")
            for f in fields(section_cls):
                value = getattr(section, f.name)
                out.write(f"{f.name} = {_format_value(value)}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"config parse failure: {e}") from e
        cfg = cls()
        for sec_name in parser.sections():
            if sec_name not in _SECTIONS:
                raise ConfigError(f"unknown config section [{sec_name}]")
            section_cls = _SECTIONS[sec_name]
            known = {f.name: f for f in fields(section_cls)}
            section = getattr(cfg, sec_name)
            for key, raw in parser.items(sec_name):
                if key not in known:
                    raise ConfigError(f"unknown key '{key}' in section [{sec_name}]")
                setattr(section, key, _parse_value(sec_name, key, raw, known[key].type))
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    # ---- validation ----

    def validate(self) -> None:
        side, patch = self.dataset.side, self.layout.patch
        if side % patch != 0:
            raise ConfigError(f"image side {side} not divisible by patch {patch}")
        d, dim = self.pca.retained, patch * patch * self.dataset.channels
        if not 1 <= d <= dim:
            raise ConfigError(f"pca.retained must be in [1, {dim}], got {d}")
        if self.training.batch < 2:
            raise ConfigError(f"training.batch must be >= 2 (dispersion needs pairs), got {self.training.batch}")
        if self.training.epochs < 0:
            raise ConfigError(f"training.epochs must be >= 0, got {self.training.epochs}")
        if self.training.lr <= 0:
            raise ConfigError(f"training.lr must be positive, got {self.training.lr}")
        if self.trigger.side > side:
            raise ConfigError(f"trigger.side {self.trigger.side} exceeds image side {side}")
        if not 0.0 <= self.poison.rate <= 1.0:
            raise ConfigError(f"poison.rate must be in [0, 1], got {self.poison.rate}")
        if self.target.kind == "file" and not self.target.path:
            raise ConfigError("target.kind = file requires target.path")
        for (sec, key), choices in _CHOICES.items():
            value = getattr(getattr(self, sec), key)
            if value not in choices:
                raise ConfigError(f"{sec}.{key} must be one of {choices}, got {value!r}")

    # ---- builders for the typed module objects ----

    def patch_layout(self) -> PatchLayout:
        return PatchLayout(
            height=self.dataset.side,
            width=self.dataset.side,
            channels=self.dataset.channels,
            patch=self.layout.patch,
        )

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            horizon=self.schedule.horizon,
            alpha=self.schedule.alpha,
            variant=self.schedule.variant,
        )

    def loss_weights(self) -> LossWeights:
        layout = self.patch_layout()
        return LossWeights.defaults(
            retained=self.pca.retained,
            full_dim=layout.patch_dim,
            lambda_disp=self.weights.lambda_disp,
            alpha1=self.weights.alpha1,
            alpha2=self.weights.alpha2,
            alpha3=self.weights.alpha3,
            beta=self.weights.beta,
            tau=self.weights.tau,
        )

    def trigger_spec(self) -> TriggerSpec:
        return TriggerSpec.make(
            side=self.trigger.side,
            channels=self.dataset.channels,
            kind=self.trigger.kind,
            seed=self.trigger.seed,
            amplitude=self.trigger.amplitude,
        )

    def poison_spec(self) -> PoisonSpec:
        return PoisonSpec(
            rate=self.poison.rate,
            alignment=self.poison.alignment,
            variant=self.poison.variant,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            layout=self.patch_layout(),
            token_dim=self.denoiser.token_dim,
            blocks=self.denoiser.blocks,
            feature_block=self.denoiser.feature_block,
            latent_mapper=self.denoiser.latent_mapper,
            init_seed=self.denoiser.init_seed,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            side=self.dataset.side,
            channels=self.dataset.channels,
            classes=self.dataset.classes,
            seed=self.dataset.seed,
        )

    def target_image(self) -> np.ndarray:
        if self.target.kind == "disc":
            return default_target_image(self.dataset.side, self.dataset.channels)
        from .ppm import read_image

        img = read_image(self.target.path)
        want = (self.dataset.side, self.dataset.side, self.dataset.channels)
        if img.shape != want:
            raise ConfigError(f"target image shape {img.shape} does not match dataset {want}")
        return img

    def data_dir(self) -> str:
        return os.environ.get("RSSD_DATA_DIR", self.dataset.data_dir)

    def thread_cap(self) -> int:
        return int(os.environ.get("RSSD_THREADS", self.evaluation.threads))


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(section: str, key: str, raw: str, type_name: str):
    raw = raw.strip()
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type_name}") from e


def default_config() -> ExperimentConfig:
    """The documented desk-scale attack defaults."""
    return ExperimentConfig()
