"""Generator, patch discriminator and projection heads.

Spectrograms are treated as 1-channel 2D maps (freq x time). The generator
is an encoder/decoder with strided 3x3 convolutions and residual
bottlenecks; every convolution uses replication padding so constant inputs
stay constant through each layer. The encoder exposes intermediate feature
stacks (including the raw input as stage 0) for the patch contrastive loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    InvalidLayerIndex,
    NotEnoughSpatialPositions,
    ShapeMismatch,
    TooShort,
)

DEFAULT_SELECTED_LAYERS = (0, 1, 2, 3, 8)


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    n_resnet_blocks: int = 9
    n_downsample: int = 2
    kernel_size: int = 3
    padding_mode: str = "replication"
    norm: str = "instance"  # "none" disables normalization (test probes)

    def __post_init__(self):
        if self.kernel_size != 3:
            raise ValueError("kernel_size is fixed at 3")
        if self.padding_mode != "replication":
            raise ValueError("padding_mode is fixed at replication")
        if self.n_resnet_blocks < 1:
            raise ValueError("need at least one residual block")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def stride_product(self) -> int:
        return 2**self.n_downsample

    @property
    def n_encoder_blocks(self) -> int:
        # encoder takes the first ceil-half of the bottleneck stack
        return (self.n_resnet_blocks + 1) // 2

    @property
    def n_decoder_blocks(self) -> int:
        return self.n_resnet_blocks - self.n_encoder_blocks


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 64
    norm: str = "instance"  # "none" disables normalization (test probes)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one strided layer")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass(frozen=True)
class ProjectionConfig:
    selected_layers: tuple = DEFAULT_SELECTED_LAYERS
    patches_per_layer: int = 256
    embed_dim: int = 256
    temperature: float = 0.07

    def __post_init__(self):
        layers = tuple(int(l) for l in self.selected_layers)
        object.__setattr__(self, "selected_layers", layers)
        if not layers:
            raise ValueError("selected_layers must be nonempty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError("selected_layers must be strictly increasing")
        if self.patches_per_layer < 2:
            raise ValueError("need at least 2 patches per layer")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class FeatureStack:
    """Encoder activation map at one stage, shape (channels, freq', time')."""

    layer_index: int
    values: torch.Tensor


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    return nn.Identity()


def _conv(in_ch, out_ch, stride=1):
    return nn.Conv2d(in_ch, out_ch, 3, stride, padding=1, padding_mode="replicate")


class ResnetBlock(nn.Module):
    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            _conv(channels, channels),
            _norm_layer(norm, channels),
            nn.ReLU(inplace=True),
            _conv(channels, channels),
            _norm_layer(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Generator(nn.Module):
    """Encoder/decoder spectrogram mapper preserving (freq, time) shape.

    Encoder stages (feature-extraction points):
      0            raw input (1 channel)
      1            input conv
      2..1+n_down  each downsampling conv
      then         one stage per encoder residual block
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels

        stages: list[nn.Module] = [
            nn.Sequential(_conv(1, ch), _norm_layer(cfg.norm, ch), nn.ReLU(inplace=True))
        ]
        for _ in range(cfg.n_downsample):
            stages.append(
                nn.Sequential(
                    _conv(ch, ch * 2, stride=2),
                    _norm_layer(cfg.norm, ch * 2),
                    nn.ReLU(inplace=True),
                )
            )
            ch *= 2
        for _ in range(cfg.n_encoder_blocks):
            stages.append(ResnetBlock(ch, cfg.norm))
        self.encoder_stages = nn.ModuleList(stages)

        dec: list[nn.Module] = [
            ResnetBlock(ch, cfg.norm) for _ in range(cfg.n_decoder_blocks)
        ]
        for _ in range(cfg.n_downsample):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                _conv(ch, ch // 2),
                _norm_layer(cfg.norm, ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        dec.append(_conv(ch, 1))
        self.decoder = nn.Sequential(*dec)
        _init_weights(self)

    @property
    def n_feature_stages(self) -> int:
        # stage 0 is the raw input
        return len(self.encoder_stages) + 1

    def feature_channels(self) -> list[int]:
        chans = [1, self.cfg.base_channels]
        for i in range(self.cfg.n_downsample):
            chans.append(self.cfg.base_channels * 2 ** (i + 1))
        chans += [chans[-1]] * self.cfg.n_encoder_blocks
        return chans

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected (B, 1, F, T), got {tuple(x.shape)}")
        s = self.cfg.stride_product
        if x.shape[2] % s or x.shape[3] % s:
            raise ShapeMismatch(
                f"spatial dims {tuple(x.shape[2:])} must be multiples of {s}"
            )

    def _validate_layers(self, layers: Sequence[int]) -> None:
        for l in layers:
            if not 0 <= l < self.n_feature_stages:
                raise InvalidLayerIndex(
                    f"layer {l} outside [0, {self.n_feature_stages - 1}]"
                )

    def _run_encoder(self, x, capture: Sequence[int]):
        feats = []
        if 0 in capture:
            feats.append(FeatureStack(0, x))
        h = x
        for i, stage in enumerate(self.encoder_stages, start=1):
            h = stage(h)
            if i in capture:
                feats.append(FeatureStack(i, h))
        return h, feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _ = self.forward_with_features(x, ())
        return y

    def forward_with_features(self, x: torch.Tensor, layers: Sequence[int]):
        """Run the full generator, capturing the requested encoder stages."""
        self._check_input(x)
        self._validate_layers(layers)
        h, feats = self._run_encoder(x, tuple(layers))
        return self.decoder(h), feats

    def encode(self, x: torch.Tensor, layers: Sequence[int]) -> list[FeatureStack]:
        """Encoder-only pass over exactly the same modules as ``forward``."""
        self._check_input(x)
        self._validate_layers(layers)
        want = tuple(layers)
        upto = max(want) if want else 0
        feats = []
        if 0 in want:
            feats.append(FeatureStack(0, x))
        h = x
        for i, stage in enumerate(self.encoder_stages, start=1):
            if i > upto:
                break
            h = stage(h)
            if i in want:
                feats.append(FeatureStack(i, h))
        return feats


class Discriminator(nn.Module):
    """Patch critic: strided 4x4 convolutions emitting a map of logits.

    ``n_layers`` stride-2 convolutions, then two stride-1 convolutions
    (the last produces the 1-channel logit map). No normalization on the
    first layer, instance norm afterwards.
    """

    KERNEL = 4

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        k = self.KERNEL
        ch = cfg.base_channels
        layers: list[nn.Module] = [
            nn.Conv2d(1, ch, k, 2, 1, padding_mode="replicate"),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for i in range(1, cfg.n_layers):
            layers += [
                nn.Conv2d(ch, ch * 2, k, 2, 1, padding_mode="replicate"),
                _norm_layer(cfg.norm, ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers += [
            nn.Conv2d(ch, ch * 2, k, 1, 1, padding_mode="replicate"),
            _norm_layer(cfg.norm, ch * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch * 2, 1, k, 1, 1, padding_mode="replicate"),
        ]
        self.net = nn.Sequential(*layers)
        _init_weights(self)

    def output_extent(self, n: int) -> int:
        """Spatial shape recurrence along one axis."""
        for _ in range(self.cfg.n_layers):
            n = (n + 2 - self.KERNEL) // 2 + 1
        for _ in range(2):
            n = n + 2 - self.KERNEL + 1
        return n

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.dim() != 4 or m.shape[1] != 1:
            raise ShapeMismatch(f"expected (B, 1, F, T), got {tuple(m.shape)}")
        for n in m.shape[2:]:
            if self.output_extent(int(n)) < 1:
                raise TooShort(
                    f"input extent {int(n)} smaller than the critic's receptive field"
                )
        return self.net(m)


class ProjectionHeads(nn.Module):
    """One two-layer MLP per selected encoder stage, L2-normalized output."""

    def __init__(self, layer_channels: dict[int, int], cfg: ProjectionConfig):
        super().__init__()
        self.cfg = cfg
        missing = [l for l in cfg.selected_layers if l not in layer_channels]
        if missing:
            raise InvalidLayerIndex(f"no channel count for layers {missing}")
        self.heads = nn.ModuleDict(
            {
                str(l): nn.Sequential(
                    nn.Linear(layer_channels[l], cfg.embed_dim),
                    nn.ReLU(inplace=True),
                    nn.Linear(cfg.embed_dim, cfg.embed_dim),
                )
                for l in cfg.selected_layers
            }
        )
        _init_weights(self)

    def forward(self, layer_index: int, columns: torch.Tensor) -> torch.Tensor:
        key = str(layer_index)
        if key not in self.heads:
            raise InvalidLayerIndex(f"no projection head for layer {layer_index}")
        return F.normalize(self.heads[key](columns), dim=1)


def heads_for(generator: Generator, cfg: ProjectionConfig) -> ProjectionHeads:
    chans = generator.feature_channels()
    generator._validate_layers(cfg.selected_layers)
    return ProjectionHeads({l: chans[l] for l in cfg.selected_layers}, cfg)


@dataclass
class ProjectedPatches:
    """Projected unit vectors for one layer plus the spatial indices used."""

    layer_index: int
    vectors: torch.Tensor  # (n, embed_dim), rows unit-norm
    indices: np.ndarray  # (n,) flat indices into freq' * time'


def sample_patch_indices(
    stacks: Sequence[FeatureStack],
    patches_per_layer: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Uniform draw without replacement over each stack's spatial grid."""
    out = []
    for st in stacks:
        n_pos = st.values.shape[-1] * st.values.shape[-2]
        if n_pos < patches_per_layer:
            raise NotEnoughSpatialPositions(
                f"layer {st.layer_index}: {n_pos} positions < {patches_per_layer}"
            )
        out.append(rng.choice(n_pos, size=patches_per_layer, replace=False))
    return out


def project_patches(
    stacks: Sequence[FeatureStack],
    heads: ProjectionHeads,
    cfg: ProjectionConfig,
    patch_ids: Optional[Sequence[np.ndarray]] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[ProjectedPatches]:
    """Gather feature columns at sampled positions and project to unit vectors.

    When ``patch_ids`` is None, positions are drawn from ``rng`` and returned
    inside each result so a second pass (the query side) can reuse the exact
    same positions.
    """
    if patch_ids is None:
        if rng is None:
            raise ValueError("need rng when sampling patch positions")
        patch_ids = sample_patch_indices(stacks, cfg.patches_per_layer, rng)
    if len(patch_ids) != len(stacks):
        raise InvalidLayerIndex("one index array per stack required")

    out = []
    for st, idx in zip(stacks, patch_ids):
        v = st.values
        if v.dim() == 4:
            if v.shape[0] != 1:
                raise ShapeMismatch("patch projection expects batch size 1")
            v = v[0]
        c = v.shape[0]
        flat = v.reshape(c, -1)  # (C, F'*T')
        n_pos = flat.shape[1]
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n_pos):
            raise NotEnoughSpatialPositions(
                f"layer {st.layer_index}: index out of range for {n_pos} positions"
            )
        cols = flat[:, torch.as_tensor(idx, dtype=torch.long, device=v.device)].T
        out.append(ProjectedPatches(st.layer_index, heads(st.layer_index, cols), idx))
    return out
