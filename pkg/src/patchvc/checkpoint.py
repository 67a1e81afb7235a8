"""Checkpoint archive: named parameter tensors plus a JSON metadata block.

One file holds the generator, discriminator and projection-head state
dicts, both optimizer states, the epoch counter, RNG state and a JSON
string with every config needed to rebuild the models and run inference
(mel parameters and normalization stats included, so conversion needs no
access to the training corpora).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from . import models
from .errors import UnreadableFile

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    generator: models.Generator,
    discriminator: models.Discriminator,
    heads: models.ProjectionHeads,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    epoch: int,
    metadata: dict,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "generator": generator.state_dict(),
            "discriminator": discriminator.state_dict(),
            "projection_heads": heads.state_dict(),
            "opt_g": opt_g.state_dict(),
            "opt_d": opt_d.state_dict(),
            "epoch": epoch,
            "torch_rng": torch.get_rng_state(),
            "metadata_json": json.dumps(metadata, sort_keys=True),
        },
        str(path),
    )
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UnreadableFile(f"no such checkpoint: {path}")
    try:
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if blob.get("format_version") != FORMAT_VERSION:
        raise UnreadableFile(f"{path}: unsupported checkpoint format")
    blob["metadata"] = json.loads(blob["metadata_json"])
    return blob


@dataclass
class InferenceModel:
    """Generator plus the metadata needed to run conversion.

    Projection heads are deliberately absent: they exist only for training.
    """

    generator: models.Generator
    metadata: dict


def build_models_from_metadata(meta: dict):
    gen_cfg = models.GeneratorConfig(**meta["generator_config"])
    disc_cfg = models.DiscriminatorConfig(**meta["discriminator_config"])
    proj_cfg = models.ProjectionConfig(**meta["projection_config"])
    g = models.Generator(gen_cfg)
    d = models.Discriminator(disc_cfg)
    p = models.heads_for(g, proj_cfg)
    return g, d, p


def load_for_inference(path: str | Path) -> InferenceModel:
    """Load only the generator; projection heads are never constructed."""
    blob = load_checkpoint(path)
    meta = blob["metadata"]
    g = models.Generator(models.GeneratorConfig(**meta["generator_config"]))
    g.load_state_dict(blob["generator"])
    g.eval()
    for p in g.parameters():
        p.requires_grad_(False)
    return InferenceModel(generator=g, metadata=meta)
