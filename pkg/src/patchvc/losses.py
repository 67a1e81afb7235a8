"""Training objectives: adversarial, multi-scale patch contrastive, identity.

The patch contrastive term treats each sampled position as one class in an
(N+1)-way softmax: the query at a position must match the key from the same
position, against the other N keys of the same utterance as negatives. All
similarity logits are computed via log-sum-exp; the naive exponential form
is reserved for test oracles.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import models
from .errors import (
    DimensionMismatch,
    LayerSetMismatch,
    NonPositiveTemperature,
)

GAN_VARIANTS = ("log_saturating", "least_squares")


@dataclass(frozen=True)
class GanLossVariant:
    kind: str = "least_squares"

    def __post_init__(self):
        if self.kind not in GAN_VARIANTS:
            raise ValueError(f"unknown GAN variant {self.kind!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_nce: float = 1.0
    mu_identity: float = 1.0

    def __post_init__(self):
        for name, v in (("lambda_nce", self.lambda_nce), ("mu_identity", self.mu_identity)):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class PatchBundle:
    """Aligned query/key unit vectors for one layer.

    Row n of ``keys`` is the positive for row n of ``queries``; the other
    rows of ``keys`` act as its negatives.
    """

    layer_index: int
    queries: torch.Tensor  # (N+1, M)
    keys: torch.Tensor  # (N+1, M)
    temperature: float

    def __post_init__(self):
        if self.queries.shape != self.keys.shape:
            raise DimensionMismatch(
                f"queries {tuple(self.queries.shape)} vs keys {tuple(self.keys.shape)}"
            )
        if self.queries.dim() != 2 or self.queries.shape[0] < 2:
            raise DimensionMismatch("need a (N+1, M) matrix with N >= 1")
        if self.temperature <= 0:
            raise NonPositiveTemperature(f"temperature {self.temperature}")


def _nce_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """-log softmax of entry 0 of a 1-D logit vector, stabilized."""
    return torch.logsumexp(logits, dim=0) - logits[0]


def nce_single(
    q: torch.Tensor, v_pos: torch.Tensor, v_negs: torch.Tensor, tau: float
) -> torch.Tensor:
    """Contrastive loss of one query against its positive and N negatives."""
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature {tau}")
    q = torch.as_tensor(q)
    v_pos = torch.as_tensor(v_pos)
    v_negs = torch.as_tensor(v_negs)
    if q.dim() != 1 or v_pos.shape != q.shape:
        raise DimensionMismatch(
            f"query {tuple(q.shape)} and positive {tuple(v_pos.shape)} must be equal 1-D"
        )
    if v_negs.dim() != 2 or v_negs.shape[1] != q.shape[0]:
        raise DimensionMismatch(
            f"negatives {tuple(v_negs.shape)} must be (N, {q.shape[0]})"
        )
    logits = torch.cat([(q @ v_pos).reshape(1), v_negs @ q]) / tau
    return _nce_from_logits(logits)


def nce_bundle(bundle: PatchBundle) -> torch.Tensor:
    """Sum of per-patch losses for one layer (diagonal entries are positives)."""
    logits = bundle.queries @ bundle.keys.T / bundle.temperature  # (n, n)
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).sum()


def nce_multilayer(bundles: Sequence[PatchBundle], mean_reduce: bool = False) -> torch.Tensor:
    """Patch contrastive loss summed over layers and patches.

    The literal objective sums over layers and patch indices; with
    ``mean_reduce`` the sum is divided by the total number of terms, which
    keeps the term commensurate with the adversarial loss at default weights.
    """
    if not bundles:
        raise LayerSetMismatch("no bundles given")
    seen = [b.layer_index for b in bundles]
    if len(set(seen)) != len(seen):
        raise LayerSetMismatch(f"duplicate layer indices {seen}")
    total = bundles[0].queries.new_zeros(())
    count = 0
    for b in bundles:
        total = total + nce_bundle(b)
        count += b.queries.shape[0]
    if mean_reduce:
        total = total / count
    return total


def gan_loss(
    d_real_logits: Optional[torch.Tensor],
    d_fake_logits: torch.Tensor,
    variant: GanLossVariant,
    side: str,
) -> torch.Tensor:
    """Adversarial objective over a patch logit map, averaged over the map.

    log_saturating:
      discriminator: -mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake)))
      generator:     -mean(log sigmoid(fake))      (non-saturating)
    least_squares:
      discriminator: 0.5 * (mean((real - 1)^2) + mean(fake^2))
      generator:     mean((fake - 1)^2)
    """
    if side not in ("generator", "discriminator"):
        raise ValueError(f"unknown side {side!r}")
    if side == "discriminator" and d_real_logits is None:
        raise DimensionMismatch("discriminator side needs real logits")

    if variant.kind == "log_saturating":
        if side == "discriminator":
            return (
                -F.logsigmoid(d_real_logits).mean()
                - F.logsigmoid(-d_fake_logits).mean()
            )
        return -F.logsigmoid(d_fake_logits).mean()

    if side == "discriminator":
        return 0.5 * (
            ((d_real_logits - 1.0) ** 2).mean() + (d_fake_logits**2).mean()
        )
    return ((d_fake_logits - 1.0) ** 2).mean()


def gan_loss_generator_minimax(d_fake_logits: torch.Tensor) -> torch.Tensor:
    """Literal minimax generator term mean(log(1 - sigmoid(fake))).

    Kept for loss-value checks only; training uses the non-saturating form.
    """
    return F.logsigmoid(-d_fake_logits).mean()


def contrastive_bundles(
    key_stacks: Sequence[models.FeatureStack],
    query_stacks: Sequence[models.FeatureStack],
    heads: models.ProjectionHeads,
    proj_cfg: models.ProjectionConfig,
    rng: np.random.Generator,
) -> list[PatchBundle]:
    """Sample positions once, project both sides at identical positions."""
    keys = models.project_patches(key_stacks, heads, proj_cfg, rng=rng)
    ids = [k.indices for k in keys]
    queries = models.project_patches(query_stacks, heads, proj_cfg, patch_ids=ids)
    out = []
    for k, q in zip(keys, queries):
        if k.layer_index != q.layer_index or not np.array_equal(k.indices, q.indices):
            raise LayerSetMismatch("query/key stacks disagree on layers or positions")
        out.append(PatchBundle(k.layer_index, q.vectors, k.vectors, proj_cfg.temperature))
    return out


def patch_nce_loss(
    x: torch.Tensor,
    y_hat: torch.Tensor,
    generator: models.Generator,
    heads: models.ProjectionHeads,
    proj_cfg: models.ProjectionConfig,
    rng: np.random.Generator,
    mean_reduce: bool = False,
    key_stacks: Optional[Sequence[models.FeatureStack]] = None,
) -> torch.Tensor:
    """Contrastive correspondence between an input and its generated output.

    Keys come from encoding ``x`` (reused from a prior forward pass when
    ``key_stacks`` is given), queries from re-encoding ``y_hat`` with
    gradients flowing through both sides.
    """
    layers = proj_cfg.selected_layers
    if key_stacks is None:
        key_stacks = generator.encode(x, layers)
    query_stacks = generator.encode(y_hat, layers)
    bundles = contrastive_bundles(key_stacks, query_stacks, heads, proj_cfg, rng)
    return nce_multilayer(bundles, mean_reduce)


def identity_nce(
    y: torch.Tensor,
    generator: models.Generator,
    heads: models.ProjectionHeads,
    proj_cfg: models.ProjectionConfig,
    rng: np.random.Generator,
    mean_reduce: bool = False,
) -> torch.Tensor:
    """Contrastive loss on the identity path: encode y and G(y) at shared positions."""
    y_idt, key_stacks = generator.forward_with_features(y, proj_cfg.selected_layers)
    return patch_nce_loss(
        y, y_idt, generator, heads, proj_cfg, rng,
        mean_reduce=mean_reduce, key_stacks=key_stacks,
    )


def total_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    generator: models.Generator,
    discriminator: torch.nn.Module,
    heads: models.ProjectionHeads,
    proj_cfg: models.ProjectionConfig,
    weights: LossWeights,
    variant: GanLossVariant,
    rng: np.random.Generator,
    mean_reduce: bool = False,
) -> dict[str, torch.Tensor]:
    """Full objective breakdown for one (x, y) pair.

    Returns {gan, nce, identity?, total, d_loss}: the generator objective
    total = gan + lambda * nce (+ mu * identity), plus the discriminator
    objective d_loss computed against the detached generated sample. With
    mu = 0 the identity path is skipped entirely and the key is absent.
    """
    layers = proj_cfg.selected_layers
    y_hat, key_stacks = generator.forward_with_features(x, layers)

    gan = gan_loss(None, discriminator(y_hat), variant, "generator")
    nce = patch_nce_loss(
        x, y_hat, generator, heads, proj_cfg, rng,
        mean_reduce=mean_reduce, key_stacks=key_stacks,
    )
    out = {"gan": gan, "nce": nce}
    total = gan + weights.lambda_nce * nce
    if weights.mu_identity != 0.0:
        idt = identity_nce(y, generator, heads, proj_cfg, rng, mean_reduce)
        out["identity"] = idt
        total = total + weights.mu_identity * idt
    out["total"] = total
    out["d_loss"] = gan_loss(
        discriminator(y), discriminator(y_hat.detach()), variant, "discriminator"
    )
    return out
