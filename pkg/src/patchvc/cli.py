"""Command-line entry point.

Exit codes: 0 success, 1 domain error (module-qualified name printed),
2 usage error (bad arguments, unknown config keys or override values).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from . import convert as convertmod
from . import corpus, evaluation, frontend, toy, training
from .errors import PatchVCError, UnknownConfigKey


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file (or $PATCHVC_CONFIG)")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override, highest precedence; repeatable",
    )
    p.add_argument("--seed", type=int, help="overrides train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchvc",
        description="Non-parallel voice conversion via one-way adversarial "
        "training with multi-scale patch contrastive losses",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("build-corpus", help="featurize a directory of WAV files")
    p.add_argument("--in-dir", required=True, help="WAVs grouped in per-speaker subdirectories")
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("make-toy-corpus", help="generate the synthetic two-voice corpus")
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train a conversion model")
    p.add_argument("--source-corpus", required=True)
    p.add_argument("--target-corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_common(p)

    p = sub.add_parser("ablate", help="paired runs with and without the identity term")
    p.add_argument("--source-corpus", required=True)
    p.add_argument("--target-corpus", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("convert", help="convert a WAV file or a whole corpus index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True,
                   help="WAV file, or a corpus directory for batch conversion")
    p.add_argument("--out", required=True,
                   help="output WAV (single) or output directory (batch)")
    p.add_argument("--vocoder", choices=["griffin_lim", "external"], default="griffin_lim")
    p.add_argument("--vocoder-endpoint", help="external vocoder command")
    _add_common(p)

    p = sub.add_parser("evaluate", help="similarity report over converted utterances")
    p.add_argument("--manifest", required=True, help="batch conversion manifest.json")
    p.add_argument("--target-corpus", required=True)
    p.add_argument("--pairing", required=True, help="pairing spec JSON")
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    return parser


def _resolved(args) -> dict:
    extra = {}
    if getattr(args, "seed", None) is not None:
        extra["train.seed"] = args.seed
    return cfgmod.resolve(args.config, args.override, extra)


def _snapshot(resolved, args, out_dir: Path, exclude=("config", "override", "seed")) -> None:
    arg_dict = {
        k: v
        for k, v in vars(args).items()
        if k not in ("subcommand", "func", *exclude) and v is not None
    }
    cfgmod.write_snapshot(resolved, args.subcommand, arg_dict, out_dir)


def cmd_build_corpus(args) -> int:
    resolved = _resolved(args)
    in_dir = Path(args.in_dir)
    items = []
    speaker_dirs = sorted(d for d in in_dir.iterdir() if d.is_dir())
    if speaker_dirs:
        for spk in speaker_dirs:
            for wav in sorted(spk.glob("*.wav")):
                items.append((f"{spk.name}_{wav.stem}", spk.name, wav))
    else:
        for wav in sorted(in_dir.glob("*.wav")):
            items.append((f"{in_dir.name}_{wav.stem}", in_dir.name, wav))
    corpus.build_corpus(
        items, args.out_dir, cfgmod.mel_config(resolved), cfgmod.vad_config(resolved)
    )
    _snapshot(resolved, args, Path(args.out_dir))
    print(f"indexed {len(items)} utterances into {args.out_dir}")
    return 0


def cmd_make_toy_corpus(args) -> int:
    resolved = _resolved(args)
    result = toy.make_toy_corpus(
        args.out_dir,
        seed=resolved["train.seed"],
        clips_per_speaker=resolved["toy.clips_per_speaker"],
        clip_duration_s=resolved["toy.clip_duration_s"],
        mel_cfg=cfgmod.mel_config(resolved),
        vad_cfg=cfgmod.vad_config(resolved),
    )
    _snapshot(resolved, args, Path(args.out_dir))
    print(json.dumps(result, indent=2))
    return 0


def cmd_train(args) -> int:
    resolved = _resolved(args)
    _snapshot(resolved, args, Path(args.out_dir))
    result = training.train(
        training.DomainPair(args.source_corpus, args.target_corpus),
        cfgmod.train_config(resolved),
        cfgmod.generator_config(resolved),
        cfgmod.discriminator_config(resolved),
        cfgmod.projection_config(resolved),
        args.out_dir,
        resume=args.resume,
    )
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"loss log: {result.loss_log}")
    return 0


def cmd_ablate(args) -> int:
    resolved = _resolved(args)
    _snapshot(resolved, args, Path(args.out_dir))
    result = training.ablate_identity(
        training.DomainPair(args.source_corpus, args.target_corpus),
        cfgmod.train_config(resolved),
        cfgmod.generator_config(resolved),
        cfgmod.discriminator_config(resolved),
        cfgmod.projection_config(resolved),
        args.out_dir,
    )
    print(f"ablation report: {result['report_json']}")
    return 0


def _vocoder_handle(args, resolved) -> convertmod.VocoderHandle:
    if args.vocoder == "external":
        endpoint = args.vocoder_endpoint or resolved["convert.vocoder_endpoint"]
        return convertmod.VocoderHandle(convertmod.EXTERNAL, endpoint)
    return convertmod.VocoderHandle(
        convertmod.GRIFFIN_LIM,
        griffin_lim_iterations=resolved["convert.griffin_lim_iters"],
    )


def cmd_convert(args) -> int:
    resolved = _resolved(args)
    vocoder = _vocoder_handle(args, resolved)
    in_path = Path(args.input)
    if in_path.is_dir():
        out_dir = Path(args.out)
        manifest = convertmod.batch_convert(in_path, args.ckpt, vocoder, out_dir)
        _snapshot(resolved, args, out_dir)
        print(f"manifest: {manifest}")
        return 0
    from . import audio

    model = None
    w = audio.load_and_resample(in_path, cfgmod.mel_config(resolved).sample_rate_hz)
    out = convertmod.convert(w, model or args.ckpt, vocoder)
    audio.save_wav(args.out, out)
    _snapshot(resolved, args, Path(args.out).parent)
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    resolved = _resolved(args)
    if resolved["eval.embedder"] == "external":
        embedder = evaluation.ExternalEmbedder(
            resolved["eval.embedder_cmd"], resolved["eval.embedder_version"]
        )
    else:
        embedder = evaluation.FallbackEmbedder(cfgmod.mel_config(resolved))
    report = evaluation.build_report(
        args.manifest,
        args.target_corpus,
        evaluation.PairingSpec.from_file(args.pairing),
        embedder=embedder,
    )
    json_path, text_path = evaluation.write_report(report, args.out_dir)
    _snapshot(resolved, args, Path(args.out_dir))
    print(report.to_text())
    print(f"report: {json_path}")
    return 0


_COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "make-toy-corpus": cmd_make_toy_corpus,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "convert": cmd_convert,
    "evaluate": cmd_evaluate,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.subcommand](args)
    except UnknownConfigKey as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except PatchVCError as exc:
        print(f"error: {exc.subsystem}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
