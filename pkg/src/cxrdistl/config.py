"""Flat ``section.key = value`` run configuration with ``paper`` and ``toy`` profiles."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .augment import CropKind, CropSpec, MultiCrop
from .losses import DinoState, LossWeights, PosWeightPolicy
from .model import BackboneConfig, HeadsConfig


class ConfigError(ValueError):
    pass


# Defaults of the ``paper`` profile. train.ssl_epoch = -1 means "half of train.epochs_per_fold".
PAPER: dict[str, object] = {
    "seed": 0,
    # preprocessing / QC
    "qc.provider_size": 225,
    "qc.threshold": 60.0,
    "qc.fraction_lo": 0.08,
    "qc.fraction_hi": 0.90,
    "qc.min_contours": 2,
    # split
    "split.test_frac": 0.1,
    "split.labeled_frac": 0.3,
    "split.n_folds": 3,
    "split.stratify": False,
    # multi-crop
    "global1.size": 256,
    "global2.size": 256,
    "global2.scale_lo": 0.75,
    "global2.scale_hi": 1.0,
    "global2.flip_p": 0.5,
    "global2.rot_degrees": 15.0,
    "global2.autocontrast_p": 0.3,
    "global2.equalize_p": 0.3,
    "global2.blur_p": 0.3,
    "local.n_crops": 8,
    "local.size": 128,
    "local.scale_lo": 0.2,
    "local.scale_hi": 0.6,
    "local.flip_p": 0.5,
    "local.rot_degrees": 15.0,
    "local.autocontrast_p": 0.5,
    "local.equalize_p": 0.5,
    "local.blur_p": 0.5,
    "aug.blur_sigma_lo": 0.1,
    "aug.blur_sigma_hi": 2.0,
    # model
    "model.patch_size": 8,
    "model.embed_dim": 384,
    "model.depth": 12,
    "model.heads": 6,
    "model.layernorm_eps": 1e-6,
    "model.drop_path": 0.1,
    "model.in_chans": 3,
    "model.pos_grid": 28,
    "model.dino_hidden": 2048,
    "model.dino_bottleneck": 256,
    "model.dino_out": 65536,
    "model.head_hidden": 256,
    "model.pretrained": "",
    "model.allow_random_init": True,
    # losses
    "loss.phase1_disease": 0.25,
    "loss.phase1_symptom": 0.75,
    "loss.lambda": 0.5,
    "loss.kl_temp": 2.0,
    "loss.focal_gamma": 2.0,
    "dino.center_momentum": 0.9,
    "dino.student_temp": 0.1,
    "dino.teacher_temp_start": 0.04,
    "dino.teacher_temp_end": 0.07,
    "dino.teacher_temp_warmup_frac": 0.1,
    "posw.phase1_clip": 50.0,
    "posw.rare_boost": 1.5,
    "posw.boost_cap": 75.0,
    "posw.rare_labels": "pneumothorax,consolidation",
    "posw.correction_clip": 20.0,
    # schedules / optimiser
    "ema.m_start": 0.9995,
    "ema.m_end": 1.0,
    "optim.lr_start": 5e-5,
    "optim.lr_end": 1e-6,
    "optim.weight_decay": 0.01,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    # training
    "train.epochs_phase1": 30,
    "train.epochs_per_fold": 10,
    "train.ssl_epoch": -1,
    "train.batch_size": 32,
    "train.correction_interval": 500,
    "train.correction_steps": 10,
    "train.correction_batch_size": 32,
    "train.sampler_positive_factor": 3.0,
    # evaluation / explainability
    "eval.threshold": 0.5,
    "eval.network": "teacher",
    "explain.alpha": 0.4,
    "explain.quantile": 0.9,
    # synthetic corpus
    "synth.n_images": 900,
    "synth.size": 96,
    "synth.finding_p": 0.3,
}

# Desk-scale overrides: small ViT, small views, short budget, faster schedules.
TOY: dict[str, object] = {
    "global1.size": 64,
    "global2.size": 64,
    "local.size": 32,
    "local.n_crops": 8,
    "aug.blur_sigma_lo": 0.1,
    "aug.blur_sigma_hi": 1.0,
    "model.embed_dim": 96,
    "model.depth": 4,
    "model.heads": 4,
    "model.pos_grid": 8,
    "model.dino_hidden": 256,
    "model.dino_bottleneck": 64,
    "model.dino_out": 1024,
    "model.head_hidden": 128,
    # from random init the joint disease term collapses shared features early; symptom
    # learning recovers only after ~1000 phase-1 steps, hence the long phase 1
    "optim.lr_start": 5e-4,
    "optim.lr_end": 1e-4,
    "ema.m_start": 0.99,
    "train.epochs_phase1": 100,
    "train.epochs_per_fold": 2,
    "train.batch_size": 32,
    "train.correction_interval": 10,
    "train.correction_steps": 3,
    "train.correction_batch_size": 32,
    "synth.n_images": 1500,
}

PROFILES = {"paper": {}, "toy": TOY}

_PROB_KEYS = {k for k in PAPER if k.endswith("_p")} | {
    "loss.lambda", "qc.fraction_lo", "qc.fraction_hi", "split.test_frac", "split.labeled_frac",
    "eval.threshold", "explain.alpha", "dino.center_momentum", "ema.m_start", "ema.m_end",
    "dino.teacher_temp_warmup_frac", "optim.beta1", "optim.beta2",
}
_POSITIVE_KEYS = {
    "loss.kl_temp", "dino.student_temp", "dino.teacher_temp_start", "dino.teacher_temp_end",
    "train.correction_interval", "train.batch_size", "train.correction_batch_size",
    "model.patch_size", "model.embed_dim", "model.depth", "model.heads", "global1.size",
    "global2.size", "local.size", "optim.lr_start", "optim.lr_end", "posw.phase1_clip",
    "posw.correction_clip", "posw.boost_cap", "train.sampler_positive_factor",
}
_CHOICES = {"eval.network": ("teacher", "student")}


def _coerce(key: str, raw, default):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("true", "1", "yes", "on"):
                return True
            if s in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, object]
    profile: str = "paper"

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def to_json(self) -> dict:
        return {"profile": self.profile, **dict(sorted(self.values.items()))}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def with_overrides(self, overrides: Mapping[str, object]) -> "RunConfig":
        return resolve(self.profile, {**self.values, **overrides})

    # typed views -----------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self["seed"])

    @property
    def ssl_epoch(self) -> int:
        v = int(self["train.ssl_epoch"])
        return int(self["train.epochs_per_fold"]) // 2 if v < 0 else v

    def backbone(self, teacher: bool = False) -> BackboneConfig:
        return BackboneConfig(
            patch_size=self["model.patch_size"], embed_dim=self["model.embed_dim"],
            depth=self["model.depth"], heads=self["model.heads"], layernorm_eps=self["model.layernorm_eps"],
            drop_path=0.0 if teacher else self["model.drop_path"], in_chans=self["model.in_chans"],
            pos_grid=self["model.pos_grid"],
        )

    def heads(self) -> HeadsConfig:
        return HeadsConfig(self["model.dino_hidden"], self["model.dino_bottleneck"], self["model.dino_out"],
                           self["model.head_hidden"])

    def multicrop(self) -> MultiCrop:
        sigma = (self["aug.blur_sigma_lo"], self["aug.blur_sigma_hi"])
        g1 = CropSpec(CropKind.GLOBAL_CLEAN, self["global1.size"])

        def spec(prefix, kind, size):
            return CropSpec(kind, size, (self[f"{prefix}.scale_lo"], self[f"{prefix}.scale_hi"]),
                            self[f"{prefix}.flip_p"], self[f"{prefix}.rot_degrees"],
                            self[f"{prefix}.autocontrast_p"], self[f"{prefix}.equalize_p"],
                            self[f"{prefix}.blur_p"], sigma)

        return MultiCrop(g1, spec("global2", CropKind.GLOBAL_AUG, self["global2.size"]),
                         spec("local", CropKind.LOCAL, self["local.size"]), self["local.n_crops"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(self["loss.phase1_disease"], self["loss.phase1_symptom"], self["loss.lambda"],
                           (0.5, 0.5), self["loss.kl_temp"], self["loss.focal_gamma"])

    def phase1_pos_policy(self) -> PosWeightPolicy:
        rare = tuple(s.strip() for s in str(self["posw.rare_labels"]).split(",") if s.strip())
        return PosWeightPolicy.phase1(clip=self["posw.phase1_clip"], rare_boost=self["posw.rare_boost"],
                                      boost_cap=self["posw.boost_cap"], rare_labels=rare)

    def correction_pos_policy(self) -> PosWeightPolicy:
        return PosWeightPolicy.correction(self["posw.correction_clip"])

    def dino_state(self) -> DinoState:
        return DinoState.zeros(self["model.dino_out"], center_momentum=self["dino.center_momentum"],
                               student_temp=self["dino.student_temp"],
                               teacher_temp_start=self["dino.teacher_temp_start"],
                               teacher_temp_end=self["dino.teacher_temp_end"],
                               warmup_frac=self["dino.teacher_temp_warmup_frac"])


def _validate(values: dict) -> None:
    for k in _PROB_KEYS:
        if not 0 <= values[k] <= 1:
            raise ConfigError(f"{k} = {values[k]} out of [0,1]")
    for k in _POSITIVE_KEYS:
        if values[k] <= 0:
            raise ConfigError(f"{k} = {values[k]} must be positive")
    for k, choices in _CHOICES.items():
        if values[k] not in choices:
            raise ConfigError(f"{k} must be one of {', '.join(choices)}")
    if not values["qc.fraction_lo"] <= values["qc.fraction_hi"]:
        raise ConfigError("qc.fraction_lo must not exceed qc.fraction_hi")
    for prefix in ("global2", "local"):
        lo, hi = values[f"{prefix}.scale_lo"], values[f"{prefix}.scale_hi"]
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"{prefix}.scale_lo/hi must satisfy 0 < lo <= hi <= 1")
    if values["global1.size"] != values["global2.size"]:
        raise ConfigError("global1.size and global2.size must match")
    if values["model.embed_dim"] % values["model.heads"]:
        raise ConfigError("model.embed_dim must be divisible by model.heads")
    if not 0 <= values["model.drop_path"] < 1:
        raise ConfigError("model.drop_path out of [0,1)")
    if abs(values["loss.phase1_disease"] + values["loss.phase1_symptom"] - 1) > 1e-9:
        raise ConfigError("loss.phase1_disease + loss.phase1_symptom must equal 1")
    if values["loss.focal_gamma"] < 0:
        raise ConfigError("loss.focal_gamma must be non-negative")
    ssl = values["train.ssl_epoch"]
    if ssl > values["train.epochs_per_fold"]:
        raise ConfigError("train.ssl_epoch must not exceed train.epochs_per_fold")
    for size_key in ("global1.size", "local.size"):
        if values[size_key] % values["model.patch_size"]:
            raise ConfigError(f"{size_key} must be divisible by model.patch_size")


def resolve(profile: str, settings: Mapping[str, object] = {}) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    values = {**PAPER, **PROFILES[profile]}
    for k, raw in settings.items():
        if k not in PAPER:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(k, raw, PAPER[k])
    _validate(values)
    return RunConfig(values, profile)


def parse_lines(lines: Iterable[str]) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_override(s: str) -> tuple[str, str]:
    if "=" not in s:
        raise ConfigError(f"override {s!r} must look like key=value")
    k, v = s.split("=", 1)
    return k.strip(), v.strip()


def load_config(path=None, overrides: Iterable[str] | Mapping[str, object] = (), profile: str | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve file settings, then ``key=value`` overrides; ``DISTL_SEED`` beats the file seed.

    The profile comes from the ``profile`` argument, else a ``profile`` key in
    the file, else ``paper``.
    """
    settings = parse_lines(Path(path).read_text(encoding="utf-8").splitlines()) if path else {}
    file_profile = settings.pop("profile", None)
    env = os.environ if env is None else env
    if env.get("DISTL_SEED"):
        settings["seed"] = env["DISTL_SEED"]
    if isinstance(overrides, Mapping):
        settings.update(overrides)
    else:
        settings.update(parse_override(o) for o in overrides)
    return resolve(profile or file_profile or "paper", settings)
