"""Inference: source audio -> log-mel -> generator -> waveform.

Projection heads play no part here; only the generator is loaded from the
checkpoint. Inputs are normalized with the source-corpus stats stored in
the checkpoint, right-padded by edge replication to the generator's stride
multiple, mapped, cropped back and de-normalized with the target-corpus
stats before vocoding.

Two vocoders are supported: a Griffin-Lim fallback (pseudo-inverse mel to
linear magnitude, then iterative phase re-estimation against the same
framing as the analysis frontend) and an external neural vocoder invoked
as a subprocess that consumes a CVCF feature file and writes a WAV.
"""
from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import audio, checkpoint, corpus, frontend
from .errors import MelConfigMismatch, TooShort, VocoderUnavailable

GRIFFIN_LIM = "griffin_lim_fallback"
EXTERNAL = "external_neural"


@dataclass
class VocoderHandle:
    kind: str = GRIFFIN_LIM
    endpoint_or_path: Optional[str] = None
    expected_mel_config: Optional[dict] = None
    griffin_lim_iterations: int = 32

    def __post_init__(self):
        if self.kind not in (GRIFFIN_LIM, EXTERNAL):
            raise ValueError(f"unknown vocoder kind {self.kind!r}")
        if self.kind == EXTERNAL and not self.endpoint_or_path:
            raise VocoderUnavailable("external vocoder needs an endpoint or path")


def _stft(x: np.ndarray, cfg: frontend.MelConfig) -> np.ndarray:
    """Left-aligned STFT matching the analysis framing (no centering)."""
    from scipy.signal import get_window

    win, hop = cfg.frame_length, cfg.frame_shift
    T = 1 + (len(x) - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:T]
    window = get_window("hann", win, fftbins=True)
    return np.fft.rfft(frames * window, n=cfg.n_fft, axis=1).T  # (n_freqs, T)


def _istft(spec: np.ndarray, cfg: frontend.MelConfig) -> np.ndarray:
    """Windowed overlap-add inverse of ``_stft``."""
    from scipy.signal import get_window

    win, hop = cfg.frame_length, cfg.frame_shift
    T = spec.shape[1]
    window = get_window("hann", win, fftbins=True)
    n_out = win + (T - 1) * hop
    x = np.zeros(n_out)
    norm = np.zeros(n_out)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1)[:, :win]
    for t in range(T):
        x[t * hop : t * hop + win] += frames[t] * window
        norm[t * hop : t * hop + win] += window**2
    # floor the overlap weight at 1% of its peak: the few edge samples with
    # almost no window coverage must be attenuated, not amplified, or
    # phase-inconsistent spectra blow up there during Griffin-Lim
    return x / np.maximum(norm, 1e-2 * norm.max() + 1e-10)


def mel_to_linear_power(logmel: np.ndarray, cfg: frontend.MelConfig) -> np.ndarray:
    """Invert the mel projection by pseudo-inverse, clipped to non-negative."""
    fb = frontend.mel_filterbank(cfg)
    mel_power = np.exp(np.asarray(logmel, dtype=np.float64))
    return np.clip(np.linalg.pinv(fb) @ mel_power, 0.0, None)


def griffin_lim(
    m: Union[frontend.MelSpectrogram, np.ndarray],
    cfg: frontend.MelConfig = frontend.MelConfig(),
    iterations: int = 32,
) -> audio.Waveform:
    """Reconstruct a waveform from de-normalized log-mel by phase iteration.

    Quality is not the goal; the reconstruction keeps spectral content well
    enough to exercise the full conversion path without external weights.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    values = m.values if isinstance(m, frontend.MelSpectrogram) else np.asarray(m)
    mag = np.sqrt(mel_to_linear_power(values, cfg))

    # fixed-seed random phase: deterministic, and far better conditioned
    # than zero phase (which starts every frame as the same cosine pulse)
    phase = np.random.default_rng(0).uniform(0.0, 2.0 * np.pi, mag.shape)
    x = _istft(mag * np.exp(1j * phase), cfg)
    for _ in range(iterations - 1):
        rebuilt = _stft(x, cfg)
        if rebuilt.shape[1] < mag.shape[1]:
            pad = mag.shape[1] - rebuilt.shape[1]
            rebuilt = np.pad(rebuilt, ((0, 0), (0, pad)))
        phase = np.angle(rebuilt[:, : mag.shape[1]])
        x = _istft(mag * np.exp(1j * phase), cfg)

    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return audio.Waveform(x.astype(np.float32), cfg.sample_rate_hz)


def _pad_to_stride(values: torch.Tensor, stride: int) -> tuple[torch.Tensor, int]:
    t = values.shape[-1]
    pad = (-t) % stride
    if pad:
        values = torch.nn.functional.pad(values, (0, pad, 0, 0), mode="replicate")
    return values, t


def convert_mel(
    model: checkpoint.InferenceModel, logmel: np.ndarray
) -> np.ndarray:
    """Normalized source mel in, de-normalized converted mel out."""
    meta = model.metadata
    src_stats = corpus.NormStats.from_dict(meta["source_stats"])
    tgt_stats = corpus.NormStats.from_dict(meta["target_stats"])
    stride = 2 ** meta["generator_config"]["n_downsample"]

    x = torch.from_numpy(corpus.normalize(logmel, src_stats))
    x = x.reshape(1, 1, *x.shape)
    x, t_orig = _pad_to_stride(x, stride)
    with torch.no_grad():
        y = model.generator(x)
    converted = y[0, 0, :, :t_orig].numpy()
    return corpus.denormalize(converted, tgt_stats)


def _check_mel_config(vocoder: VocoderHandle, mel_cfg: frontend.MelConfig) -> None:
    if vocoder.expected_mel_config is None:
        return
    if frontend.MelConfig.from_dict(vocoder.expected_mel_config) != mel_cfg:
        raise MelConfigMismatch(
            "vocoder expects different mel parameters than the checkpoint frontend: "
            f"{vocoder.expected_mel_config} vs {mel_cfg.to_dict()}"
        )


def _run_external_vocoder(
    logmel: np.ndarray, vocoder: VocoderHandle, sample_rate: int
) -> audio.Waveform:
    with tempfile.TemporaryDirectory() as tmp:
        feat_path = Path(tmp) / "features.cvcf"
        wav_path = Path(tmp) / "out.wav"
        corpus.write_features(feat_path, logmel)
        cmd = [vocoder.endpoint_or_path, str(feat_path), str(wav_path)]
        try:
            proc = subprocess.run(cmd, capture_output=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise VocoderUnavailable(f"vocoder invocation failed: {exc}") from exc
        if proc.returncode != 0 or not wav_path.exists():
            raise VocoderUnavailable(
                f"vocoder exited with {proc.returncode}: {proc.stderr.decode(errors='replace')}"
            )
        w = audio.load_and_resample(wav_path, sample_rate)
    return w


def convert(
    utterance: audio.Waveform,
    ckpt: Union[str, Path, checkpoint.InferenceModel],
    vocoder: VocoderHandle,
) -> audio.Waveform:
    """Convert one utterance through the trained generator and a vocoder."""
    model = (
        ckpt
        if isinstance(ckpt, checkpoint.InferenceModel)
        else checkpoint.load_for_inference(ckpt)
    )
    mel_cfg = frontend.MelConfig.from_dict(model.metadata["mel_config"])
    _check_mel_config(vocoder, mel_cfg)
    if utterance.sample_rate_hz != mel_cfg.sample_rate_hz:
        raise MelConfigMismatch(
            f"utterance rate {utterance.sample_rate_hz} != {mel_cfg.sample_rate_hz}"
        )

    m = frontend.extract_logmel(utterance, mel_cfg)
    converted = convert_mel(model, m.values)

    if vocoder.kind == GRIFFIN_LIM:
        return griffin_lim(converted, mel_cfg, vocoder.griffin_lim_iterations)
    return _run_external_vocoder(converted, vocoder, mel_cfg.sample_rate_hz)


def batch_convert(
    index_dir: str | Path,
    ckpt: Union[str, Path, checkpoint.InferenceModel],
    vocoder: VocoderHandle,
    out_dir: str | Path,
) -> Path:
    """Convert every indexed utterance; per-item failures never abort the batch.

    Writes one WAV per successful item plus manifest.json listing outputs
    and recorded failures. Conversion reads the original WAVs referenced by
    the corpus index.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = (
        ckpt
        if isinstance(ckpt, checkpoint.InferenceModel)
        else checkpoint.load_for_inference(ckpt)
    )
    entries, _ = corpus.load_index(index_dir)

    items = []
    failures = []
    for e in entries:
        try:
            if e.wav_path is None:
                raise TooShort(f"{e.utterance_id}: no source WAV recorded in index")
            mel_cfg = frontend.MelConfig.from_dict(model.metadata["mel_config"])
            w = audio.load_and_resample(e.wav_path, mel_cfg.sample_rate_hz)
            converted = convert(w, model, vocoder)
            wav_out = out_dir / f"{e.utterance_id}.wav"
            audio.save_wav(wav_out, converted)
            items.append(
                {
                    "utterance_id": e.utterance_id,
                    "speaker_id": e.speaker_id,
                    "source_path": e.wav_path,
                    "output_path": str(wav_out),
                    "duration_s": converted.duration_s,
                }
            )
        except Exception as exc:  # collected per item by contract
            failures.append(
                {
                    "utterance_id": e.utterance_id,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )

    manifest = {"items": items, "failures": failures}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
