"""Feature corpus on disk: CVCF feature files, JSON index, normalization stats.

A corpus directory contains:

    features/<utterance_id>.cvcf   raw little-endian float32, row-major (n_mels, T),
                                   16-byte header: magic "CVCF", version u32,
                                   n_mels u32, T u32
    index.json                     {"mel_config": {...}, "entries": [
                                     {utterance_id, speaker_id, path, T, wav_path}, ...]}
    norm_stats.json                per-bin mel mean/std over all indexed frames

Features are stored un-normalized; normalization is applied on load and
inverted before vocoding.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import audio, frontend
from .errors import AllFramesRemoved, EmptyCorpus, UnreadableFile

CVCF_MAGIC = b"CVCF"
CVCF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_features(path: str | Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    n_mels, T = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CVCF_MAGIC, CVCF_VERSION, n_mels, T))
        f.write(values.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise UnreadableFile(f"{path}: truncated header")
        magic, version, n_mels, T = _HEADER.unpack(header)
        if magic != CVCF_MAGIC:
            raise UnreadableFile(f"{path}: bad magic {magic!r}")
        if version != CVCF_VERSION:
            raise UnreadableFile(f"{path}: unsupported version {version}")
        payload = f.read(4 * n_mels * T)
    if len(payload) != 4 * n_mels * T:
        raise UnreadableFile(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n_mels, T).copy()


@dataclass
class CorpusEntry:
    utterance_id: str
    speaker_id: str
    path: str
    T: int
    wav_path: Optional[str] = None


@dataclass
class NormStats:
    mel_mean: np.ndarray  # (n_mels,)
    mel_std: np.ndarray  # (n_mels,)
    n_frames: int

    def to_dict(self) -> dict:
        return {
            "mel_mean": self.mel_mean.tolist(),
            "mel_std": self.mel_std.tolist(),
            "n_frames": int(self.n_frames),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            np.asarray(d["mel_mean"], dtype=np.float64),
            np.asarray(d["mel_std"], dtype=np.float64),
            int(d["n_frames"]),
        )


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((values - stats.mel_mean[:, None]) / stats.mel_std[:, None]).astype(
        np.float32
    )


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (
        np.asarray(values, dtype=np.float64) * stats.mel_std[:, None]
        + stats.mel_mean[:, None]
    ).astype(np.float32)


def build_corpus(
    items: Iterable[tuple[str, str, str | Path]],
    out_dir: str | Path,
    mel_cfg: frontend.MelConfig = frontend.MelConfig(),
    vad_cfg: Optional[frontend.VadConfig] = frontend.VadConfig(),
) -> Path:
    """Featurize (utterance_id, speaker_id, wav_path) items into ``out_dir``.

    Per file: decode and resample, extract log-mel, apply VAD. Utterances
    whose frames are all removed by VAD are skipped and listed in the index
    under "skipped". Per-file work is independent; callers may parallelize
    it as long as the index is written by a single writer.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    entries: list[CorpusEntry] = []
    skipped: list[dict] = []
    acc_sum = None
    acc_sq = None
    n_frames = 0

    for utterance_id, speaker_id, wav_path in items:
        w = audio.load_and_resample(wav_path, mel_cfg.sample_rate_hz)
        m = frontend.extract_logmel(w, mel_cfg)
        if vad_cfg is not None:
            try:
                m = frontend.apply_vad(m, vad_cfg)
            except AllFramesRemoved:
                skipped.append({"utterance_id": utterance_id, "reason": "silence_only"})
                continue
        feat_path = feat_dir / f"{utterance_id}.cvcf"
        write_features(feat_path, m.values)
        entries.append(
            CorpusEntry(
                utterance_id=utterance_id,
                speaker_id=speaker_id,
                path=str(feat_path.relative_to(out_dir)),
                T=m.n_frames,
                wav_path=str(wav_path),
            )
        )
        v = m.values.astype(np.float64)
        acc_sum = v.sum(axis=1) if acc_sum is None else acc_sum + v.sum(axis=1)
        acc_sq = (v**2).sum(axis=1) if acc_sq is None else acc_sq + (v**2).sum(axis=1)
        n_frames += m.n_frames

    if not entries:
        raise EmptyCorpus(f"no usable utterances for {out_dir}")

    mean = acc_sum / n_frames
    var = np.maximum(acc_sq / n_frames - mean**2, 0.0)
    stats = NormStats(mean, np.sqrt(var) + 1e-8, n_frames)

    index = {
        "mel_config": mel_cfg.to_dict(),
        "entries": [vars(e) for e in entries],
        "skipped": skipped,
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    (out_dir / "norm_stats.json").write_text(
        json.dumps(stats.to_dict(), sort_keys=True)
    )
    return out_dir


def load_index(corpus_dir: str | Path) -> tuple[list[CorpusEntry], frontend.MelConfig]:
    corpus_dir = Path(corpus_dir)
    index = json.loads((corpus_dir / "index.json").read_text())
    entries = [
        CorpusEntry(
            utterance_id=e["utterance_id"],
            speaker_id=e["speaker_id"],
            path=e["path"],
            T=int(e["T"]),
            wav_path=e.get("wav_path"),
        )
        for e in index["entries"]
    ]
    return entries, frontend.MelConfig.from_dict(index["mel_config"])


def load_stats(corpus_dir: str | Path) -> NormStats:
    return NormStats.from_dict(
        json.loads((Path(corpus_dir) / "norm_stats.json").read_text())
    )


def load_entry_features(corpus_dir: str | Path, entry: CorpusEntry) -> np.ndarray:
    return read_features(Path(corpus_dir) / entry.path)


def speakers_in(entries: Sequence[CorpusEntry]) -> list[str]:
    seen: dict[str, None] = {}
    for e in entries:
        seen.setdefault(e.speaker_id, None)
    return list(seen)
