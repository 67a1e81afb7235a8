"""Flat key-value configuration shared by all subcommands.

Keys are namespaced by module prefix (``train.lr``, ``generator.base_channels``).
Precedence is built-in defaults < config file < command-line overrides.
Unknown keys are rejected by name. Every run writes its fully resolved
config as a JSON snapshot beside its outputs; the snapshot is free of
timestamps so identical invocations produce identical bytes.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from . import frontend, losses, models, training
from .errors import UnknownConfigKey

ENV_CONFIG_PATH = "PATCHVC_CONFIG"


@dataclass(frozen=True)
class ConfigKey:
    key: str
    kind: str  # int | float | bool | str | int_list
    default: Any
    help: str


_KEYS = [
    # audio frontend
    ConfigKey("frontend.sample_rate_hz", "int", 24000, "working sample rate"),
    ConfigKey("frontend.n_mels", "int", 80, "mel bins"),
    ConfigKey("frontend.frame_length_ms", "int", 25, "analysis window"),
    ConfigKey("frontend.frame_shift_ms", "int", 10, "hop size"),
    ConfigKey("frontend.n_fft", "int", 1024, "FFT size"),
    ConfigKey("frontend.fmin_hz", "float", 0.0, "mel range lower edge"),
    ConfigKey("frontend.fmax_hz", "float", 12000.0, "mel range upper edge"),
    ConfigKey("frontend.amplitude_floor", "float", 1e-5, "power floor before log"),
    ConfigKey("frontend.vad_threshold_db", "float", -40.0, "energy gate vs utterance mean"),
    ConfigKey("frontend.vad_min_run_frames", "int", 1, "shortest kept speech run"),
    # generator
    ConfigKey("generator.base_channels", "int", 64, "width of the first conv"),
    ConfigKey("generator.n_resnet_blocks", "int", 9, "residual bottleneck count"),
    ConfigKey("generator.n_downsample", "int", 2, "stride-2 stages"),
    # discriminator
    ConfigKey("discriminator.n_layers", "int", 3, "stride-2 layers"),
    ConfigKey("discriminator.base_channels", "int", 64, "width of the first conv"),
    # projection heads / patch sampling
    ConfigKey("projection.layers", "int_list", list(models.DEFAULT_SELECTED_LAYERS),
              "encoder stages feeding the contrastive loss"),
    ConfigKey("projection.patches_per_layer", "int", 256, "positions sampled per stage"),
    ConfigKey("projection.embed_dim", "int", 256, "projected vector size"),
    ConfigKey("projection.temperature", "float", 0.07, "similarity logit divisor"),
    # losses
    ConfigKey("loss.lambda_nce", "float", 1.0, "contrastive weight"),
    ConfigKey("loss.mu_identity", "float", 1.0, "identity-mapping weight"),
    ConfigKey("loss.gan_variant", "str", "least_squares",
              "least_squares or log_saturating"),
    ConfigKey("loss.nce_mean_reduce", "bool", False,
              "divide the contrastive sum by layer*patch count"),
    # training engine
    ConfigKey("train.epochs", "int", 1000, "passes over the source domain"),
    ConfigKey("train.batch_size", "int", 1, "items per step"),
    ConfigKey("train.lr", "float", 2e-4, "Adam learning rate"),
    ConfigKey("train.adam_beta1", "float", 0.5, "Adam beta1"),
    ConfigKey("train.adam_beta2", "float", 0.999, "Adam beta2"),
    ConfigKey("train.seed", "int", 0, "master seed"),
    ConfigKey("train.checkpoint_every_epochs", "int", 100, "checkpoint cadence"),
    ConfigKey("train.lr_linear_decay_after_half", "bool", False,
              "linear decay over the second half"),
    ConfigKey("train.crop_duration_s", "float", 2.0, "training crop length"),
    ConfigKey("train.crop_policy", "str", "random_crop",
              "random_crop or reject_short"),
    # conversion
    ConfigKey("convert.vocoder", "str", "griffin_lim", "griffin_lim or external"),
    ConfigKey("convert.griffin_lim_iters", "int", 32, "phase iterations"),
    ConfigKey("convert.vocoder_endpoint", "str", "", "external vocoder command"),
    # evaluation
    ConfigKey("eval.embedder", "str", "fallback", "fallback or external"),
    ConfigKey("eval.embedder_cmd", "str", "", "external embedder command"),
    ConfigKey("eval.embedder_version", "str", "unversioned", "recorded adapter version"),
    # toy corpus
    ConfigKey("toy.clips_per_speaker", "int", 50, "clips per synthetic voice"),
    ConfigKey("toy.clip_duration_s", "float", 2.0, "clip length"),
]

REGISTRY = {k.key: k for k in _KEYS}


def _coerce(spec: ConfigKey, value: Any) -> Any:
    try:
        if spec.kind == "int":
            if isinstance(value, bool):
                raise ValueError
            return int(value)
        if spec.kind == "float":
            return float(value)
        if spec.kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("true", "1", "yes"):
                    return True
                if low in ("false", "0", "no"):
                    return False
            raise ValueError
        if spec.kind == "str":
            return str(value)
        if spec.kind == "int_list":
            if isinstance(value, str):
                parts = [p for p in value.split(",") if p.strip()]
                return [int(p) for p in parts]
            return [int(v) for v in value]
    except (TypeError, ValueError):
        pass
    raise UnknownConfigKey(
        f"value {value!r} for key {spec.key!r} is not a valid {spec.kind}"
    )


def _validate(mapping: dict) -> dict:
    out = {}
    for key, value in mapping.items():
        if key not in REGISTRY:
            raise UnknownConfigKey(f"unknown config key: {key!r}")
        out[key] = _coerce(REGISTRY[key], value)
    return out


def load_config_file(path: Optional[str | Path]) -> dict:
    """Read a flat JSON object; None falls back to $PATCHVC_CONFIG if set."""
    if path is None:
        env = os.environ.get(ENV_CONFIG_PATH)
        if not env:
            return {}
        path = env
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise UnknownConfigKey("config file must be a flat JSON object")
    return _validate(doc)


def parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UnknownConfigKey(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return _validate(out)


def resolve(
    config_path: Optional[str | Path] = None,
    overrides: Sequence[str] = (),
    extra: Optional[dict] = None,
) -> dict:
    """Defaults, then config file, then overrides, then programmatic extras."""
    resolved = {k.key: k.default for k in _KEYS}
    resolved.update(load_config_file(config_path))
    resolved.update(parse_overrides(overrides))
    if extra:
        resolved.update(_validate(extra))
    return resolved


def write_snapshot(resolved: dict, command: str, args: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(
        json.dumps(
            {"command": command, "args": args, "config": resolved},
            indent=2,
            sort_keys=True,
        )
    )
    return path


# dataclass builders

def mel_config(cfg: dict) -> frontend.MelConfig:
    return frontend.MelConfig(
        sample_rate_hz=cfg["frontend.sample_rate_hz"],
        n_mels=cfg["frontend.n_mels"],
        frame_length_ms=cfg["frontend.frame_length_ms"],
        frame_shift_ms=cfg["frontend.frame_shift_ms"],
        n_fft=cfg["frontend.n_fft"],
        fmin_hz=cfg["frontend.fmin_hz"],
        fmax_hz=cfg["frontend.fmax_hz"],
        amplitude_floor=cfg["frontend.amplitude_floor"],
    )


def vad_config(cfg: dict) -> frontend.VadConfig:
    return frontend.VadConfig(
        energy_threshold_db=cfg["frontend.vad_threshold_db"],
        min_speech_run_frames=cfg["frontend.vad_min_run_frames"],
    )


def generator_config(cfg: dict) -> models.GeneratorConfig:
    return models.GeneratorConfig(
        base_channels=cfg["generator.base_channels"],
        n_resnet_blocks=cfg["generator.n_resnet_blocks"],
        n_downsample=cfg["generator.n_downsample"],
    )


def discriminator_config(cfg: dict) -> models.DiscriminatorConfig:
    return models.DiscriminatorConfig(
        n_layers=cfg["discriminator.n_layers"],
        base_channels=cfg["discriminator.base_channels"],
    )


def projection_config(cfg: dict) -> models.ProjectionConfig:
    return models.ProjectionConfig(
        selected_layers=tuple(cfg["projection.layers"]),
        patches_per_layer=cfg["projection.patches_per_layer"],
        embed_dim=cfg["projection.embed_dim"],
        temperature=cfg["projection.temperature"],
    )


def train_config(cfg: dict) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        adam_beta1=cfg["train.adam_beta1"],
        adam_beta2=cfg["train.adam_beta2"],
        seed=cfg["train.seed"],
        weights=losses.LossWeights(cfg["loss.lambda_nce"], cfg["loss.mu_identity"]),
        gan_variant=losses.GanLossVariant(cfg["loss.gan_variant"]),
        checkpoint_every_epochs=cfg["train.checkpoint_every_epochs"],
        lr_linear_decay_after_half=cfg["train.lr_linear_decay_after_half"],
        nce_mean_reduce=cfg["loss.nce_mean_reduce"],
        crop_duration_s=cfg["train.crop_duration_s"],
        crop_policy=cfg["train.crop_policy"],
    )
