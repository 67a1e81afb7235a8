import hashlib
import json
import math
import os
import stat
from dataclasses import asdict

import numpy as np
import pytest
import torch

from patchvc import audio, checkpoint, convert, corpus, frontend, models
from patchvc.errors import MelConfigMismatch, VocoderUnavailable

CFG = frontend.MelConfig()
GL = convert.VocoderHandle()


class _IdentityNet(torch.nn.Module):
    def forward(self, x):
        return x


def identity_model(mel_cfg=CFG):
    """Inference bundle whose generator passes spectrograms through unchanged."""
    flat_stats = corpus.NormStats(
        np.zeros(mel_cfg.n_mels), np.ones(mel_cfg.n_mels), 1
    ).to_dict()
    meta = {
        "generator_config": asdict(models.GeneratorConfig()),
        "mel_config": mel_cfg.to_dict(),
        "source_stats": flat_stats,
        "target_stats": flat_stats,
    }
    return checkpoint.InferenceModel(_IdentityNet(), meta)


def sine(freq, duration_s=1.0, rate=24000, amp=0.6):
    t = np.arange(int(duration_s * rate)) / rate
    return audio.Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), rate)


def dominant_frequency(w: audio.Waveform) -> float:
    spec = np.abs(np.fft.rfft(w.samples, 8 * len(w.samples)))
    return float(np.fft.rfftfreq(8 * len(w.samples), 1 / w.sample_rate_hz)[np.argmax(spec)])


class TestConvert:
    def test_identity_generator_keeps_tone_frequency(self):
        out = convert.convert(sine(500.0), identity_model(), GL)
        assert abs(dominant_frequency(out) - 500.0) / 500.0 < 0.02

    def test_mel_frame_count_preserved(self):
        model = identity_model()
        mel = frontend.extract_logmel(sine(300.0, 2.0), CFG)
        assert mel.n_frames == 198
        out = convert.convert_mel(model, mel.values)
        assert out.shape == (80, 198)

    def test_duration_within_one_frame_shift(self):
        w = sine(250.0, 2.0)
        out = convert.convert(w, identity_model(), GL)
        assert out.sample_rate_hz == 24000
        assert abs(len(out.samples) - len(w.samples)) <= CFG.frame_shift

    def test_trained_checkpoint_inference_deterministic(self, mini_ckpt):
        model = checkpoint.load_for_inference(mini_ckpt.final_checkpoint)
        mel = frontend.extract_logmel(sine(200.0), CFG).values
        a = convert.convert_mel(model, mel)
        b = convert.convert_mel(model, mel)
        np.testing.assert_array_equal(a, b)

    def test_stride_padding_restored_for_odd_lengths(self, mini_ckpt):
        model = checkpoint.load_for_inference(mini_ckpt.final_checkpoint)
        mel = frontend.extract_logmel(sine(200.0, 2.0), CFG).values[:, :99]
        assert mel.shape == (80, 99)
        assert convert.convert_mel(model, mel).shape == (80, 99)

    def test_projection_heads_untouched(self, mini_ckpt, tmp_path):
        path = mini_ckpt.final_checkpoint
        before = checkpoint.load_checkpoint(path)["projection_heads"]
        digest_before = hashlib.sha256(path.read_bytes()).hexdigest()

        model = checkpoint.load_for_inference(path)
        assert not any("head" in attr for attr in vars(model))
        convert.convert(sine(220.0), model, GL)

        after = checkpoint.load_checkpoint(path)["projection_heads"]
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest_before
        for name in before:
            assert torch.equal(before[name], after[name])

    def test_mel_config_mismatch_refused(self):
        other = frontend.MelConfig(n_fft=2048).to_dict()
        vocoder = convert.VocoderHandle(expected_mel_config=other)
        with pytest.raises(MelConfigMismatch):
            convert.convert(sine(220.0), identity_model(), vocoder)

    def test_matching_expected_config_accepted(self):
        vocoder = convert.VocoderHandle(expected_mel_config=CFG.to_dict())
        convert.convert(sine(220.0), identity_model(), vocoder)

    def test_wrong_input_rate_refused(self):
        w = audio.Waveform(np.zeros(16000, dtype=np.float32), 16000)
        with pytest.raises(MelConfigMismatch):
            convert.convert(w, identity_model(), GL)


class TestGriffinLim:
    def test_more_iterations_reduce_mel_error(self, mini_toy):
        cdir = mini_toy["corpora"]["toy_m"]
        entries, _ = corpus.load_index(cdir)
        wins = 0
        for e in entries:
            m = corpus.load_entry_features(cdir, e)
            errs = []
            for iters in (1, 32):
                rec = convert.griffin_lim(m, CFG, iterations=iters)
                back = frontend.extract_logmel(rec, CFG).values[:, : m.shape[1]]
                errs.append(np.linalg.norm(back - m[:, : back.shape[1]]))
            wins += errs[1] < errs[0]
        assert wins >= math.ceil(0.9 * len(entries))

    def test_floor_spectrogram_is_near_silence(self):
        m = np.full((80, 50), math.log(CFG.amplitude_floor), dtype=np.float32)
        w = convert.griffin_lim(m, CFG, iterations=4)
        assert float(np.sqrt(np.mean(w.samples**2))) < 1e-3

    def test_pure_band_tone_lands_in_band(self):
        m = np.full((80, 60), math.log(CFG.amplitude_floor), dtype=np.float32)
        band = 30
        m[band, :] = math.log(10.0)
        w = convert.griffin_lim(m, CFG, iterations=16)
        mel_pts = frontend.mel_to_hz(
            np.linspace(frontend.hz_to_mel(CFG.fmin_hz), frontend.hz_to_mel(CFG.fmax_hz), 82)
        )
        lo, hi = mel_pts[band], mel_pts[band + 2]  # triangle support of that band
        assert lo <= dominant_frequency(w) <= hi

    def test_iterations_validated(self):
        with pytest.raises(ValueError):
            convert.griffin_lim(np.zeros((80, 10)), CFG, iterations=0)


def write_index(dir_path, entries, mel_cfg=CFG):
    dir_path.mkdir(parents=True, exist_ok=True)
    (dir_path / "index.json").write_text(
        json.dumps({"mel_config": mel_cfg.to_dict(), "entries": entries, "skipped": []})
    )
    return dir_path


class TestBatchConvert:
    def test_empty_index_gives_empty_manifest(self, tmp_path):
        idx = write_index(tmp_path / "empty_corpus", [])
        manifest = convert.batch_convert(idx, identity_model(), GL, tmp_path / "out")
        data = json.loads(manifest.read_text())
        assert data == {"items": [], "failures": []}

    def test_partial_failure_recorded(self, tmp_path):
        wavs = tmp_path / "wavs"
        wavs.mkdir()
        entries = []
        for name, n in (("ok1", 24000), ("short", 300), ("ok2", 24000)):
            w = audio.Waveform(
                0.4 * np.sin(2 * np.pi * 200 * np.arange(n) / 24000).astype(np.float32),
                24000,
            )
            audio.save_wav(wavs / f"{name}.wav", w)
            entries.append(
                {
                    "utterance_id": name,
                    "speaker_id": "spk",
                    "path": "unused.cvcf",
                    "T": 1,
                    "wav_path": str(wavs / f"{name}.wav"),
                }
            )
        idx = write_index(tmp_path / "corpus", entries)
        manifest = convert.batch_convert(idx, identity_model(), GL, tmp_path / "out")
        data = json.loads(manifest.read_text())
        assert len(data["items"]) == 2
        assert len(data["failures"]) == 1
        assert data["failures"][0]["utterance_id"] == "short"

        # durations of successful conversions stay within 10 ms of the input
        for item in data["items"]:
            assert abs(item["duration_s"] - 1.0) < 0.010
            assert set(item) >= {
                "utterance_id", "speaker_id", "source_path", "output_path", "duration_s",
            }

    def test_idempotent_outputs(self, mini_toy, mini_ckpt, tmp_path):
        model = checkpoint.load_for_inference(mini_ckpt.final_checkpoint)
        cdir = mini_toy["corpora"]["toy_m"]
        hashes = []
        for run in ("one", "two"):
            out = tmp_path / run
            convert.batch_convert(cdir, model, GL, out)
            hashes.append(
                sorted(
                    hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in out.glob("*.wav")
                )
            )
        assert hashes[0] == hashes[1] and len(hashes[0]) == 4


STUB_VOCODER = """#!/usr/bin/env python3
import struct, sys
import numpy as np
from scipy.io import wavfile

feat, out = sys.argv[1], sys.argv[2]
blob = open(feat, 'rb').read()
magic, version, n_mels, T = struct.unpack('<4sIII', blob[:16])
assert magic == b'CVCF' and version == 1 and n_mels == 80, (magic, version, n_mels)
assert len(blob) == 16 + 4 * n_mels * T
t = np.arange(12000) / 24000.0
wavfile.write(out, 24000, (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
"""


class TestExternalVocoder:
    def make_stub(self, tmp_path, body=STUB_VOCODER):
        stub = tmp_path / "stub_vocoder.py"
        stub.write_text(body)
        stub.chmod(stub.stat().st_mode | stat.S_IEXEC)
        return stub

    def test_cvcf_handoff_and_wav_return(self, tmp_path):
        stub = self.make_stub(tmp_path)
        vocoder = convert.VocoderHandle(convert.EXTERNAL, str(stub))
        out = convert.convert(sine(220.0), identity_model(), vocoder)
        assert out.sample_rate_hz == 24000
        assert abs(dominant_frequency(out) - 440.0) < 5.0

    def test_failing_endpoint_raises(self, tmp_path):
        stub = self.make_stub(tmp_path, "#!/usr/bin/env python3\nraise SystemExit(3)\n")
        vocoder = convert.VocoderHandle(convert.EXTERNAL, str(stub))
        with pytest.raises(VocoderUnavailable):
            convert.convert(sine(220.0), identity_model(), vocoder)

    def test_missing_endpoint_rejected(self):
        with pytest.raises(VocoderUnavailable):
            convert.VocoderHandle(convert.EXTERNAL, None)
