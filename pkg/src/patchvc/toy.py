"""Synthetic two-speaker corpus for desk-scale end-to-end runs.

Each clip is a fully voiced formant-like harmonic stack articulated in
syllable-like segments: every 0.12-0.30 s the pitch and resonance targets
jump to new values (joined by short glides), over a speaker-specific
fundamental range and spectral tilt. The two voices differ in register,
tilt and resonance placement, which makes them easy to tell apart with the
mel-statistics fallback embedder, while the segment structure gives the
patch contrastive loss localizable content to preserve. No pauses or
fades, so the energy VAD keeps every frame and each clip survives the
training crop at full length.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, corpus, frontend


@dataclass(frozen=True)
class ToyVoice:
    speaker_id: str
    gender: str  # "M" | "F", used by evaluation pairing
    f0_range_hz: tuple
    tilt_db_per_octave: float
    formants_hz: tuple
    formant_jitter: float = 0.12


DEFAULT_VOICES = (
    ToyVoice("toy_m", "M", (95.0, 135.0), -9.0, (500.0, 1150.0, 2500.0)),
    ToyVoice("toy_f", "F", (215.0, 295.0), -3.0, (850.0, 1900.0, 3300.0)),
)

MAX_HARMONIC_HZ = 9000.0


def _segment_targets(n, sample_rate, rng, low, high, glide_s=0.04):
    """Piecewise targets changing every 0.12-0.30 s, joined by short glides."""
    values = np.empty(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.12, 0.30) * sample_rate)
        values[pos : pos + seg] = rng.uniform(low, high)
        pos += seg
    width = max(int(glide_s * sample_rate), 1)
    kernel = np.ones(width) / width
    return np.convolve(np.pad(values, width, mode="edge"), kernel, mode="same")[
        width : width + n
    ]


def synth_clip(
    voice: ToyVoice,
    duration_s: float,
    sample_rate: int,
    rng: np.random.Generator,
) -> audio.Waveform:
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # syllable-like articulation: every segment holds its own pitch and
    # resonance targets, so patches at different times carry distinct,
    # localizable content instead of one sustained vowel
    lo, hi = voice.f0_range_hz
    f0 = _segment_targets(n, sample_rate, rng, lo, hi)
    vibrato_rate = rng.uniform(4.5, 6.0)
    f0 = f0 * (
        1.0
        + 0.015 * np.sin(2 * np.pi * vibrato_rate * t + rng.uniform(0, 2 * np.pi))
    )

    centers = [
        fc * _segment_targets(n, sample_rate, rng, 1.0 - voice.formant_jitter,
                              1.0 + voice.formant_jitter)
        for fc in voice.formants_hz
    ]
    bandwidths = [90.0, 140.0, 220.0]

    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    x = np.zeros(n)
    h = 1
    while h * lo < MAX_HARMONIC_HZ:
        freq = h * f0
        if freq.min() >= MAX_HARMONIC_HZ:
            break
        tilt_gain = 10.0 ** (voice.tilt_db_per_octave * np.log2(h) / 20.0)
        res_gain = 0.08  # floor keeps every harmonic weakly present
        for fc, bw in zip(centers, bandwidths):
            res_gain = res_gain + 1.0 / (1.0 + ((freq - fc) / bw) ** 2)
        x += tilt_gain * res_gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        h += 1

    amp_rate = rng.uniform(1.5, 3.0)
    envelope = 0.85 + 0.15 * np.sin(2 * np.pi * amp_rate * t + rng.uniform(0, 2 * np.pi))
    x *= envelope
    x *= 0.7 / np.max(np.abs(x))
    return audio.Waveform(x.astype(np.float32), sample_rate)


def make_toy_corpus(
    out_dir: str | Path,
    seed: int,
    clips_per_speaker: int = 50,
    clip_duration_s: float = 2.0,
    mel_cfg: frontend.MelConfig = frontend.MelConfig(),
    vad_cfg: frontend.VadConfig = frontend.VadConfig(),
    voices: tuple = DEFAULT_VOICES,
) -> dict:
    """Generate WAVs for each synthetic voice and build per-speaker corpora.

    Layout under ``out_dir``: wav/<speaker>/clip_NNN.wav, corpus_<speaker>/
    (features, index, stats) and pairing.json wiring the low voice as the
    conversion source and the high voice as the target.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    corpora = {}
    for voice in voices:
        wav_dir = out_dir / "wav" / voice.speaker_id
        wav_dir.mkdir(parents=True, exist_ok=True)
        items = []
        for i in range(clips_per_speaker):
            w = synth_clip(voice, clip_duration_s, mel_cfg.sample_rate_hz, rng)
            wav_path = wav_dir / f"clip_{i:03d}.wav"
            audio.save_wav(wav_path, w)
            items.append((f"{voice.speaker_id}_{i:03d}", voice.speaker_id, wav_path))
        corpora[voice.speaker_id] = corpus.build_corpus(
            items, out_dir / f"corpus_{voice.speaker_id}", mel_cfg, vad_cfg
        )

    source, target = voices[0], voices[1]
    pairing = {
        "speaker_genders": {v.speaker_id: v.gender for v in voices},
        "pairs": [
            {
                "source": source.speaker_id,
                "target": target.speaker_id,
                "setting": "one-to-one",
            }
        ],
    }
    (out_dir / "pairing.json").write_text(json.dumps(pairing, indent=2, sort_keys=True))

    return {
        "corpora": {k: str(v) for k, v in corpora.items()},
        "pairing": str(out_dir / "pairing.json"),
        "source_speaker": source.speaker_id,
        "target_speaker": target.speaker_id,
    }
