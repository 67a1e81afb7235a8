"""Log-mel feature extraction, energy VAD and fixed-duration cropping.

Framing is left-aligned with no centering or padding: frame t covers
samples [t*hop, t*hop + win), so a signal of S samples yields exactly
T = 1 + floor((S - win) / hop) frames. Feature values are natural-log
mel power, floored at ``amplitude_floor`` before the log so every entry
is finite and bounded below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.signal import get_window
from scipy.special import logsumexp

from .errors import AllFramesRemoved, TooShort

# conversion between power-dB offsets and natural-log (nat) offsets
DB_TO_NATS = math.log(10.0) / 10.0


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 24000
    n_mels: int = 80
    frame_length_ms: int = 25
    frame_shift_ms: int = 10
    n_fft: int = 1024
    fmin_hz: float = 0.0
    fmax_hz: float = 12000.0
    amplitude_floor: float = 1e-5

    @property
    def frame_length(self) -> int:
        return self.sample_rate_hz * self.frame_length_ms // 1000

    @property
    def frame_shift(self) -> int:
        return self.sample_rate_hz * self.frame_shift_ms // 1000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        return cls(**d)


@dataclass
class MelSpectrogram:
    """Natural-log mel power matrix of shape (n_mels, T)."""

    values: np.ndarray
    frame_length_ms: int = 25
    frame_shift_ms: int = 10

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"expected (n_mels, T), got shape {self.values.shape}")
        if self.values.shape[1] < 1:
            raise ValueError("spectrogram must have at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, (n_mels, n_fft//2 + 1), peak amplitude 1."""
    n_freqs = cfg.n_fft // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate_hz / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((cfg.n_mels, n_freqs), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-10)
        down = (hi - freqs) / max(hi - ctr, 1e-10)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def num_frames(n_samples: int, cfg: MelConfig) -> int:
    """T = 1 + floor((S - win) / hop); requires S >= win."""
    if n_samples < cfg.frame_length:
        raise TooShort(
            f"need at least {cfg.frame_length} samples for one frame, got {n_samples}"
        )
    return 1 + (n_samples - cfg.frame_length) // cfg.frame_shift


def frames_in_duration(duration_s: float, cfg: MelConfig) -> int:
    """Frame count of a waveform lasting exactly ``duration_s`` seconds."""
    n_samples = int(round(duration_s * cfg.sample_rate_hz))
    return num_frames(n_samples, cfg)


def extract_logmel(w, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """Waveform -> natural-log mel power, shape (n_mels, T)."""
    x = np.asarray(w.samples, dtype=np.float64)
    T = num_frames(len(x), cfg)
    win, hop = cfg.frame_length, cfg.frame_shift

    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:T]
    window = get_window("hann", win, fftbins=True)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2  # (T, n_freqs)

    mel_power = power @ mel_filterbank(cfg).T  # (T, n_mels)
    logmel = np.log(np.maximum(mel_power, cfg.amplitude_floor)).T
    return MelSpectrogram(
        logmel.astype(np.float32), cfg.frame_length_ms, cfg.frame_shift_ms
    )


@dataclass(frozen=True)
class VadConfig:
    energy_threshold_db: float = -40.0
    min_speech_run_frames: int = 1

    def __post_init__(self):
        if self.min_speech_run_frames < 1:
            raise ValueError("min_speech_run_frames must be >= 1")


def frame_energies(m: MelSpectrogram) -> np.ndarray:
    """Per-frame log total power: logsumexp over mel bins, in nats."""
    return logsumexp(np.asarray(m.values, dtype=np.float64), axis=0)


def apply_vad(m: MelSpectrogram, cfg: VadConfig = VadConfig()) -> MelSpectrogram:
    """Keep frames whose energy exceeds (mean energy + threshold), order preserved.

    The threshold is relative to the utterance mean so absolute level does
    not matter. Kept runs shorter than ``min_speech_run_frames`` are dropped.
    Raises AllFramesRemoved when nothing survives.
    """
    e = frame_energies(m)
    threshold = e.mean() + cfg.energy_threshold_db * DB_TO_NATS
    keep = e > threshold

    if cfg.min_speech_run_frames > 1 and keep.any():
        keep = _drop_short_runs(keep, cfg.min_speech_run_frames)

    if not keep.any():
        raise AllFramesRemoved(
            f"no frame exceeds mean energy {cfg.energy_threshold_db:+.1f} dB"
        )
    return MelSpectrogram(m.values[:, keep], m.frame_length_ms, m.frame_shift_ms)


def _drop_short_runs(keep: np.ndarray, min_run: int) -> np.ndarray:
    out = keep.copy()
    t = 0
    n = len(keep)
    while t < n:
        if keep[t]:
            start = t
            while t < n and keep[t]:
                t += 1
            if t - start < min_run:
                out[start:t] = False
        else:
            t += 1
    return out


@dataclass(frozen=True)
class CropSpec:
    duration_s: float = 2.0
    policy: str = "random_crop"  # or "reject_short"

    def __post_init__(self):
        if self.policy not in ("random_crop", "reject_short"):
            raise ValueError(f"unknown crop policy {self.policy!r}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


def crop_or_reject(
    m: MelSpectrogram,
    spec: CropSpec,
    rng: Optional[np.random.Generator] = None,
    mel_cfg: MelConfig = MelConfig(),
) -> Optional[MelSpectrogram]:
    """Return a contiguous window of exactly frames(duration_s) frames, or None.

    None signals rejection (utterance shorter than the training duration);
    it is a contract outcome, not an error. Under ``random_crop`` the start
    offset is drawn from ``rng``; ``reject_short`` takes the head window.
    """
    target = frames_in_duration(spec.duration_s, mel_cfg)
    if m.n_frames < target:
        return None
    if m.n_frames == target:
        start = 0
    elif spec.policy == "random_crop":
        if rng is None:
            raise ValueError("random_crop requires a seeded generator")
        start = int(rng.integers(0, m.n_frames - target + 1))
    else:
        start = 0
    return MelSpectrogram(
        m.values[:, start : start + target], m.frame_length_ms, m.frame_shift_ms
    )
