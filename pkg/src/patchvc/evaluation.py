"""Objective voice similarity: speaker embeddings and report aggregation.

Each converted utterance is embedded and scored by cosine similarity
against the mean embedding of the target speaker's reference utterances.
Scores are aggregated into gender-pair rows (Male-Male, Male-Female,
Female-Female, Female-Male) per conversion setting, with raw similarities
kept as-is and only the summary table clamped onto [0, 1].
"""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import audio, corpus, frontend
from .errors import (
    DimensionMismatch,
    EmbedderUnavailable,
    MissingReference,
    TooShort,
)

GENDER_PAIR_ROWS = ("Male-Male", "Male-Female", "Female-Female", "Female-Male")
SETTINGS = ("one-to-one", "many-to-one", "many-unseen-to-one")
SETTING_TITLES = {
    "one-to-one": "One to One",
    "many-to-one": "Many to One",
    "many-unseen-to-one": "Many (unseen) to One",
}


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    source_utterance_id: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise DimensionMismatch(f"embedding must be 1-D, got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise EmbedderUnavailable("embedder produced non-finite values")


class FallbackEmbedder:
    """Mel-statistics proxy embedder for environments without an SV model.

    64 dims: 32 mel-band time means plus 32 mean absolute frame deltas,
    z-scored across dims and unit-normalized. A coarse spectral-envelope
    signature, clearly labeled a proxy; never a substitute for a real
    speaker-verification system when reporting similarity numbers.
    """

    name = "fallback-melstat"
    version = "1"
    dim = 64
    min_duration_s = 0.2

    def __init__(self, mel_cfg: frontend.MelConfig = frontend.MelConfig()):
        self.mel_cfg = mel_cfg

    def embed_waveform(self, w: audio.Waveform) -> np.ndarray:
        if w.duration_s < self.min_duration_s:
            raise TooShort(
                f"need >= {self.min_duration_s}s of audio, got {w.duration_s:.3f}s"
            )
        m = frontend.extract_logmel(w, self.mel_cfg).values.astype(np.float64)
        bands = np.stack(
            [part.mean(axis=0) for part in np.array_split(m, 32, axis=0)]
        )  # (32, T)
        means = bands.mean(axis=1)
        if bands.shape[1] > 1:
            deltas = np.abs(np.diff(bands, axis=1)).mean(axis=1)
        else:
            deltas = np.zeros(32)
        v = np.concatenate([means, deltas])
        v = (v - v.mean()) / (v.std() + 1e-10)
        return v / np.linalg.norm(v)

    def __call__(self, wav_path: str | Path) -> np.ndarray:
        return self.embed_waveform(
            audio.load_and_resample(wav_path, self.mel_cfg.sample_rate_hz)
        )


class ExternalEmbedder:
    """Adapter for an external speaker-verification system.

    Runs ``cmd <wav_path>`` and reads the embedding as little-endian
    float32 from stdout. The adapter identity and declared version are
    recorded in every report that uses it.
    """

    def __init__(self, cmd: str, version: str = "unversioned"):
        if not cmd:
            raise EmbedderUnavailable("empty embedder command")
        self.cmd = cmd
        self.name = f"external:{Path(cmd).name}"
        self.version = version

    def __call__(self, wav_path: str | Path) -> np.ndarray:
        try:
            proc = subprocess.run(
                [self.cmd, str(wav_path)], capture_output=True, timeout=600
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise EmbedderUnavailable(f"embedder invocation failed: {exc}") from exc
        if proc.returncode != 0:
            raise EmbedderUnavailable(
                f"embedder exited with {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace')}"
            )
        v = np.frombuffer(proc.stdout, dtype="<f4").astype(np.float64)
        if v.size == 0:
            raise EmbedderUnavailable("embedder returned no data")
        return v


def embed(
    utterance: Union[str, Path, audio.Waveform], embedder
) -> SpeakerEmbedding:
    """Embed a WAV path or in-memory waveform; output is unit-normalized."""
    if isinstance(utterance, audio.Waveform):
        if not hasattr(embedder, "embed_waveform"):
            raise EmbedderUnavailable("this adapter only accepts WAV paths")
        v = embedder.embed_waveform(utterance)
        uid = "<waveform>"
    else:
        v = embedder(utterance)
        uid = Path(utterance).stem
    norm = np.linalg.norm(v)
    if norm == 0:
        raise EmbedderUnavailable("zero embedding")
    return SpeakerEmbedding(v / norm, uid)


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    if a.vector.shape != b.vector.shape:
        raise DimensionMismatch(
            f"embedding dims differ: {a.vector.shape} vs {b.vector.shape}"
        )
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


def mean_reference(embeddings: Sequence[SpeakerEmbedding]) -> SpeakerEmbedding:
    """Renormalized mean embedding; the per-speaker reference point."""
    if not embeddings:
        raise MissingReference("no reference embeddings")
    m = np.mean([e.vector for e in embeddings], axis=0)
    norm = np.linalg.norm(m)
    if norm == 0:
        raise MissingReference("reference embeddings cancel out")
    return SpeakerEmbedding(m / norm, "<reference-mean>")


@dataclass
class PairingSpec:
    """Which conversions count toward which report cell.

    speaker_genders maps speaker id -> "M" | "F"; each pair names a source
    speaker (whose converted utterances are scored), a target speaker and
    the conversion setting column it belongs to.
    """

    speaker_genders: dict[str, str]
    pairs: list[dict]

    @classmethod
    def from_file(cls, path: str | Path) -> "PairingSpec":
        d = json.loads(Path(path).read_text())
        return cls(d["speaker_genders"], d["pairs"])

    def gender_row(self, source: str, target: str) -> str:
        names = {"M": "Male", "F": "Female"}
        try:
            return f"{names[self.speaker_genders[source]]}-{names[self.speaker_genders[target]]}"
        except KeyError as exc:
            raise MissingReference(f"no gender recorded for speaker {exc}") from exc


@dataclass
class SimilarityReport:
    settings: list[str]
    cells: dict  # row -> setting -> {"mean", "summary_mean", "count", "raw"}
    embedder_name: str
    embedder_version: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": list(GENDER_PAIR_ROWS),
                "settings": self.settings,
                "cells": self.cells,
                "embedder": {
                    "name": self.embedder_name,
                    "version": self.embedder_version,
                },
            },
            indent=2,
            sort_keys=True,
        )

    def to_text(self) -> str:
        """Fixed-width similarity table, one gender pair per row."""
        titles = [SETTING_TITLES[s] for s in self.settings]
        width = max(22, *(len(t) + 4 for t in titles)) if titles else 22
        header = f"{'Gender':<16}" + "".join(f"{t:>{width}}" for t in titles)
        lines = [header]
        for row in GENDER_PAIR_ROWS:
            parts = [f"{row:<16}"]
            for s in self.settings:
                cell = self.cells[row][s]
                if cell["count"] == 0:
                    parts.append(f"{'-':>{width}}")
                else:
                    parts.append(f"{cell['summary_mean']:>{width}.3f}")
            lines.append("".join(parts))
        return "\n".join(lines) + "\n"


def load_manifest(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text())["items"]


def build_report(
    converted_manifest: str | Path,
    target_corpus_dir: str | Path,
    pairing: PairingSpec,
    embedder=None,
    settings: Optional[Sequence[str]] = None,
) -> SimilarityReport:
    """Score converted utterances against target references, cell by cell.

    Every converted utterance of a pair's source speaker is compared to the
    mean embedding over the target speaker's corpus utterances. Cell means
    are plain means of the raw similarities; the summary value is clamped
    to [0, 1] for presentation.
    """
    embedder = embedder or FallbackEmbedder()
    items = load_manifest(converted_manifest)
    entries, _ = corpus.load_index(target_corpus_dir)

    used = sorted({p["setting"] for p in pairing.pairs})
    for s in used:
        if s not in SETTINGS:
            raise ValueError(f"unknown setting {s!r}")
    settings = list(settings) if settings is not None else used

    refs: dict[str, SpeakerEmbedding] = {}

    def reference_for(speaker: str) -> SpeakerEmbedding:
        if speaker not in refs:
            wavs = [e.wav_path for e in entries if e.speaker_id == speaker and e.wav_path]
            if not wavs:
                raise MissingReference(
                    f"target corpus has no WAV-backed utterances for speaker {speaker!r}"
                )
            refs[speaker] = mean_reference([embed(w, embedder) for w in wavs])
        return refs[speaker]

    cells = {
        row: {
            s: {"mean": None, "summary_mean": None, "count": 0, "raw": []}
            for s in settings
        }
        for row in GENDER_PAIR_ROWS
    }

    for p in pairing.pairs:
        row = pairing.gender_row(p["source"], p["target"])
        ref = reference_for(p["target"])
        converted = [it for it in items if it["speaker_id"] == p["source"]]
        if not converted:
            raise MissingReference(
                f"manifest holds no conversions for source speaker {p['source']!r}"
            )
        cell = cells[row][p["setting"]]
        for it in converted:
            sim = cosine_similarity(embed(it["output_path"], embedder), ref)
            cell["raw"].append(sim)

    for row in GENDER_PAIR_ROWS:
        for s in settings:
            cell = cells[row][s]
            if cell["raw"]:
                cell["count"] = len(cell["raw"])
                cell["mean"] = float(np.mean(cell["raw"]))
                cell["summary_mean"] = float(np.clip(cell["mean"], 0.0, 1.0))

    return SimilarityReport(
        settings=settings,
        cells=cells,
        embedder_name=embedder.name,
        embedder_version=embedder.version,
    )


def write_report(report: SimilarityReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "similarity_report.json"
    text_path = out_dir / "similarity_report.txt"
    json_path.write_text(report.to_json())
    text_path.write_text(report.to_text())
    return json_path, text_path
