"""Alternating generator/discriminator optimization over two feature corpora.

Every stochastic choice (epoch shuffle, target draw, crop offsets, patch
positions) is derived from (master seed, epoch, step, purpose) through a
hash, never from shared mutable RNG state. Two consequences the tests rely
on: resuming from a checkpoint reproduces the uninterrupted run exactly,
and runs differing only in loss weights share identical data and patch
draws until the weights actually change a parameter update.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint, corpus, frontend, losses, models
from .errors import DivergedLoss, EmptyCorpus

GENDER_PAIR_ROWS = ("Male-Male", "Male-Female", "Female-Female", "Female-Male")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    gan_variant: losses.GanLossVariant = field(default_factory=losses.GanLossVariant)
    checkpoint_every_epochs: int = 100
    lr_linear_decay_after_half: bool = False
    nce_mean_reduce: bool = False
    crop_duration_s: float = 2.0
    crop_policy: str = "random_crop"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class DomainPair:
    """Source corpus (one or many speakers) and single-speaker target corpus."""

    source_dir: Path
    target_dir: Path

    def __post_init__(self):
        self.source_dir = Path(self.source_dir)
        self.target_dir = Path(self.target_dir)


@dataclass
class TrainResult:
    final_checkpoint: Path
    loss_log: Path
    out_dir: Path


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit seed from the master seed and a purpose tag tuple."""
    text = f"{master}|" + "|".join(str(t) for t in tags)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


class _Domain:
    """In-memory view of a corpus: normalized features of usable utterances."""

    def __init__(self, corpus_dir: Path, min_frames: int):
        entries, mel_cfg = corpus.load_index(corpus_dir)
        self.mel_cfg = mel_cfg
        self.stats = corpus.load_stats(corpus_dir)
        self.features: list[np.ndarray] = []
        self.ids: list[str] = []
        for e in entries:
            if e.T < min_frames:
                continue
            raw = corpus.load_entry_features(corpus_dir, e)
            self.features.append(corpus.normalize(raw, self.stats))
            self.ids.append(e.utterance_id)
        if not self.features:
            raise EmptyCorpus(
                f"{corpus_dir}: no utterance has >= {min_frames} frames after crop rejection"
            )

    def __len__(self):
        return len(self.features)


def _crop_tensor(
    values: np.ndarray,
    crop_spec: frontend.CropSpec,
    mel_cfg: frontend.MelConfig,
    t_use: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    m = frontend.MelSpectrogram(values, mel_cfg.frame_length_ms, mel_cfg.frame_shift_ms)
    window = frontend.crop_or_reject(m, crop_spec, rng=rng, mel_cfg=mel_cfg)
    # corpus loading already dropped utterances below the crop length; trim
    # the window tail to the generator's stride multiple
    assert window is not None
    return torch.from_numpy(window.values[:, :t_use]).reshape(
        1, 1, values.shape[0], t_use
    )


def _param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _json_scalar(t: torch.Tensor) -> float:
    return float(t.detach().item())


def train(
    pair: DomainPair,
    cfg: TrainConfig,
    gen_cfg: models.GeneratorConfig,
    disc_cfg: models.DiscriminatorConfig,
    proj_cfg: models.ProjectionConfig,
    out_dir: str | Path,
    resume: Optional[str | Path] = None,
    check_param_isolation: bool = False,
) -> TrainResult:
    """Run the two-objective optimization loop; see module docstring.

    Per step: (a) the discriminator is updated against the detached
    generated sample with the generator frozen, then (b) the generator and
    all projection heads are updated jointly on the combined objective.
    Checkpoints land in ``out_dir`` as ckpt_epoch{N}; losses stream to
    losses.jsonl, one JSON object per step.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    _, mel_cfg = corpus.load_index(pair.source_dir)
    crop_spec = frontend.CropSpec(cfg.crop_duration_s, cfg.crop_policy)
    target_frames = frontend.frames_in_duration(cfg.crop_duration_s, mel_cfg)
    t_use = (target_frames // gen_cfg.stride_product) * gen_cfg.stride_product

    src = _Domain(pair.source_dir, target_frames)
    tgt = _Domain(pair.target_dir, target_frames)
    if src.mel_cfg != tgt.mel_cfg:
        raise EmptyCorpus("source and target corpora use different mel parameters")
    shared = set(src.ids) & set(tgt.ids)
    if shared:
        raise ValueError(f"domains share utterance ids: {sorted(shared)[:5]} ...")

    meta = {
        "generator_config": asdict(gen_cfg),
        "discriminator_config": asdict(disc_cfg),
        "projection_config": asdict(proj_cfg),
        "train_config": {
            **{k: v for k, v in asdict(cfg).items() if k not in ("weights", "gan_variant")},
            "lambda_nce": cfg.weights.lambda_nce,
            "mu_identity": cfg.weights.mu_identity,
            "gan_variant": cfg.gan_variant.kind,
        },
        "mel_config": mel_cfg.to_dict(),
        "source_stats": src.stats.to_dict(),
        "target_stats": tgt.stats.to_dict(),
        "seed": cfg.seed,
    }

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    g = models.Generator(gen_cfg)
    d = models.Discriminator(disc_cfg)
    p = models.heads_for(g, proj_cfg)
    opt_g = torch.optim.Adam(
        list(g.parameters()) + list(p.parameters()),
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )
    opt_d = torch.optim.Adam(
        d.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )

    start_epoch = 0
    if resume is not None:
        blob = checkpoint.load_checkpoint(resume)
        g.load_state_dict(blob["generator"])
        d.load_state_dict(blob["discriminator"])
        p.load_state_dict(blob["projection_heads"])
        opt_g.load_state_dict(blob["opt_g"])
        opt_d.load_state_dict(blob["opt_d"])
        start_epoch = int(blob["epoch"])

    log_path = out_dir / "losses.jsonl"
    log_file = open(log_path, "a" if resume else "w")
    last_ckpt = checkpoint.save_checkpoint(
        out_dir / f"ckpt_epoch{start_epoch}", g, d, p, opt_g, opt_d, start_epoch, meta
    )

    mu = cfg.weights.mu_identity
    lam = cfg.weights.lambda_nce
    steps_per_epoch = -(-len(src) // cfg.batch_size)
    step = start_epoch * steps_per_epoch
    layers = proj_cfg.selected_layers

    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            lr = cfg.lr
            if cfg.lr_linear_decay_after_half and epoch > cfg.epochs // 2:
                span = cfg.epochs - cfg.epochs // 2
                lr = cfg.lr * (cfg.epochs - epoch + 1) / span
            for group in (*opt_g.param_groups, *opt_d.param_groups):
                group["lr"] = lr

            order = _rng(cfg.seed, "shuffle", epoch).permutation(len(src))
            batches = [
                order[b : b + cfg.batch_size]
                for b in range(0, len(order), cfg.batch_size)
            ]
            for i, batch in enumerate(batches):
                step += 1
                pairs = []
                for j, xi in enumerate(batch):
                    yi = int(_rng(cfg.seed, "pick_y", epoch, i, j).integers(len(tgt)))
                    x = _crop_tensor(
                        src.features[xi], crop_spec, mel_cfg, t_use,
                        _rng(cfg.seed, "crop_x", epoch, i, j),
                    )
                    y = _crop_tensor(
                        tgt.features[yi], crop_spec, mel_cfg, t_use,
                        _rng(cfg.seed, "crop_y", epoch, i, j),
                    )
                    pairs.append((j, x, y))

                if check_param_isolation:
                    g_before, p_before = _param_digest(g), _param_digest(p)

                # one generator forward per item, shared by both updates
                forwards = [
                    (j, x, y, *g.forward_with_features(x, layers)) for j, x, y in pairs
                ]

                d_loss = sum(
                    losses.gan_loss(
                        d(y), d(y_hat.detach()), cfg.gan_variant, "discriminator"
                    )
                    for _, _, y, y_hat, _ in forwards
                ) / len(forwards)
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

                if check_param_isolation:
                    assert _param_digest(g) == g_before, "D update touched G"
                    assert _param_digest(p) == p_before, "D update touched P"
                    d_before = _param_digest(d)

                gan_sum, nce_sum, idt_sum = None, None, None
                for j, x, y, y_hat, key_stacks in forwards:
                    gan_j = losses.gan_loss(None, d(y_hat), cfg.gan_variant, "generator")
                    # negatives never cross batch items
                    nce_j = losses.patch_nce_loss(
                        x, y_hat, g, p, proj_cfg,
                        _rng(cfg.seed, "patches", epoch, i, j),
                        mean_reduce=cfg.nce_mean_reduce, key_stacks=key_stacks,
                    )
                    gan_sum = gan_j if gan_sum is None else gan_sum + gan_j
                    nce_sum = nce_j if nce_sum is None else nce_sum + nce_j
                    if mu != 0.0:
                        idt_j = losses.identity_nce(
                            y, g, p, proj_cfg,
                            _rng(cfg.seed, "idt_patches", epoch, i, j),
                            mean_reduce=cfg.nce_mean_reduce,
                        )
                        idt_sum = idt_j if idt_sum is None else idt_sum + idt_j

                gan = gan_sum / len(forwards)
                nce = nce_sum / len(forwards)
                total = gan + lam * nce
                record = {
                    "step": step,
                    "epoch": epoch,
                    "gan": _json_scalar(gan),
                    "nce": _json_scalar(nce),
                }
                if mu != 0.0:
                    idt = idt_sum / len(forwards)
                    total = total + mu * idt
                    record["identity"] = _json_scalar(idt)
                opt_g.zero_grad(set_to_none=True)
                total.backward()
                opt_g.step()

                if check_param_isolation:
                    assert _param_digest(d) == d_before, "G update touched D"

                record["d_loss"] = _json_scalar(d_loss)
                record["total"] = _json_scalar(total)
                log_file.write(json.dumps(record) + "\n")

                if not all(np.isfinite(v) for v in record.values()):
                    log_file.flush()
                    raise DivergedLoss(
                        f"non-finite loss at step {step}; last good checkpoint: {last_ckpt}"
                    )
            log_file.flush()

            if epoch % cfg.checkpoint_every_epochs == 0 or epoch == cfg.epochs:
                last_ckpt = checkpoint.save_checkpoint(
                    out_dir / f"ckpt_epoch{epoch}", g, d, p, opt_g, opt_d, epoch, meta
                )
    finally:
        log_file.close()

    return TrainResult(final_checkpoint=last_ckpt, loss_log=log_path, out_dir=out_dir)


def ablate_identity(
    pair: DomainPair,
    cfg: TrainConfig,
    gen_cfg: models.GeneratorConfig,
    disc_cfg: models.DiscriminatorConfig,
    proj_cfg: models.ProjectionConfig,
    out_dir: str | Path,
) -> dict:
    """Train twice with identical seeds, once with the identity term disabled.

    Emits paired run directories plus a comparison report scaffold with the
    four gender-pair rows and a relative-improvement column; similarity
    cells are filled in later from evaluation runs over each checkpoint.
    """
    out_dir = Path(out_dir)
    runs = {}
    for name, mu in (("with_identity", cfg.weights.mu_identity), ("no_identity", 0.0)):
        arm_cfg = TrainConfig(
            **{
                **asdict(cfg),
                "weights": losses.LossWeights(cfg.weights.lambda_nce, mu),
                "gan_variant": cfg.gan_variant,
            }
        )
        runs[name] = train(
            pair, arm_cfg, gen_cfg, disc_cfg, proj_cfg, out_dir / name
        )

    report = {
        "rows": list(GENDER_PAIR_ROWS),
        "columns": ["with_identity", "without_identity", "delta_improvement_pct"],
        "cells": {
            row: {"with_identity": None, "without_identity": None, "delta_improvement_pct": None}
            for row in GENDER_PAIR_ROWS
        },
        "checkpoints": {k: str(v.final_checkpoint) for k, v in runs.items()},
        "loss_logs": {k: str(v.loss_log) for k, v in runs.items()},
        "note": "similarity cells are filled from evaluation reports over the paired checkpoints",
    }
    report_path = out_dir / "ablation_report.json"
    report_path.write_text(json.dumps(report, indent=2))

    lines = [f"{'Gender':<16}{'with idt':>12}{'w/o idt':>12}{'ΔImp.':>10}"]
    for row in GENDER_PAIR_ROWS:
        lines.append(f"{row:<16}{'-':>12}{'-':>12}{'-':>10}")
    (out_dir / "ablation_report.txt").write_text("\n".join(lines) + "\n")

    return {
        "runs": runs,
        "report_json": report_path,
        "report_txt": out_dir / "ablation_report.txt",
    }


def fill_ablation_report(
    report_path: str | Path,
    with_identity_cells: dict[str, float],
    without_identity_cells: dict[str, float],
) -> dict:
    """Populate the scaffold with per-gender-pair similarity means."""
    report_path = Path(report_path)
    report = json.loads(report_path.read_text())
    for row in report["rows"]:
        a = with_identity_cells.get(row)
        b = without_identity_cells.get(row)
        cell = report["cells"][row]
        cell["with_identity"] = a
        cell["without_identity"] = b
        if a is not None and b is not None and b != 0:
            cell["delta_improvement_pct"] = 100.0 * (a - b) / b
    report_path.write_text(json.dumps(report, indent=2))

    lines = [f"{'Gender':<16}{'with idt':>12}{'w/o idt':>12}{'ΔImp.':>10}"]
    for row in report["rows"]:
        cell = report["cells"][row]
        fmt = lambda v, suf="": ("-" if v is None else f"{v:.3f}{suf}")
        delta = cell["delta_improvement_pct"]
        lines.append(
            f"{row:<16}{fmt(cell['with_identity']):>12}{fmt(cell['without_identity']):>12}"
            f"{('-' if delta is None else f'{delta:+.2f}%'):>10}"
        )
    report_path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return report
