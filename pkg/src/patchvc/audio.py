"""WAV ingestion and emission.

Decodes PCM WAV files (8/16/24/32-bit int or 32-bit float, mono or
multi-channel), downmixes to mono, resamples to the working rate and
peak-normalizes into [-1, 1]. 32-bit float is the canonical in-memory
form; all downstream processing assumes 24 kHz mono float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import EmptyAudio, UnreadableFile

TARGET_RATE = 24000


@dataclass
class Waveform:
    """Mono audio in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def _to_float(data: np.ndarray) -> np.ndarray:
    """Map integer PCM onto [-1, 1]; float PCM passes through."""
    if data.dtype == np.int16:
        return data.astype(np.float64) / 2.0**15
    if data.dtype == np.int32:
        # 24-bit PCM arrives as int32 with the low byte zeroed, so the
        # same full-scale divisor applies.
        return data.astype(np.float64) / 2.0**31
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise UnreadableFile(f"unsupported sample format {data.dtype}")


def load_and_resample(path: str | Path, target_rate: int = TARGET_RATE) -> Waveform:
    """Decode ``path``, downmix to mono, resample and peak-normalize.

    The output length is round(S * target_rate / source_rate) for an
    S-sample input. Raises UnreadableFile for undecodable containers and
    EmptyAudio for zero-length payloads.
    """
    path = Path(path)
    if not path.exists():
        raise UnreadableFile(f"no such file: {path}")
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises bare ValueError on bad RIFF
        raise UnreadableFile(f"{path}: {exc}") from exc
    if data.size == 0:
        raise EmptyAudio(f"{path}: zero samples")

    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)

    if rate != target_rate:
        g = math.gcd(int(rate), int(target_rate))
        up, down = target_rate // g, rate // g
        n_out = int(math.floor(len(x) * target_rate / rate + 0.5))
        x = resample_poly(x, up, down)
        # polyphase output is ceil(S*up/down); trim to the rounded length
        x = x[:n_out]

    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32), target_rate)


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write 32-bit float PCM."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate_hz, np.asarray(w.samples, dtype=np.float32))
