"""Command-line entry point for the full experiment pipeline.

Subcommands cover corpus synthesis, source pretraining, three-way
fine-tuning, vocoding, evaluation, mode comparison, and the
finite-difference gradient audit.  Exit codes: 0 success, 1 runtime
failure (I/O, NaN abort, failed gradient check), 2 usage or validation
error.

Configuration comes from one JSON file with sections dsp / model / train /
finetune / cdc / data / eval (all keys optional, unknown keys rejected);
command-line flags override file values.  Every command writes the resolved
configuration snapshot next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CHILD_TARGET_SPEC, build_corpora
from .dsp import AudioClip, DspConfig, load_mel, load_wav, mel_spectrogram, save_wav
from .losses import CdcConfig
from .metrics import compare_modes, evaluate_checkpoint, vocoder_from_bundle
from .training import (FINETUNE_MODES, TrainConfig, TrainingNanError, finetune,
                       pretrain, write_step_log)

DEFAULT_CONFIG: dict = {
    "dsp": {
        "sample_rate": 16000,
        "n_fft": 1024,
        "win_length": 1024,
        "hop_length": 256,
        "n_mels": 80,
        "fmin": 0.0,
        "fmax": 8000.0,
        "log_floor": 1e-5,
    },
    "model": {
        "kind": "melgan",          # melgan | hifigan
    },
    "train": {
        "steps": 20000,
        "batch_size": 1,
        "crop_frames": 32,
        "lr_gen": 1e-4,
        "lr_disc": 1e-4,
        "beta1": 0.5,
        "beta2": 0.9,
        "seed": 0,
        "checkpoint_interval": 5000,
        "log_interval": 50,
    },
    "finetune": {
        "steps": 2000,
        "mode": "cdc",             # none | traditional | cdc
        "disc_from_checkpoint": True,
    },
    "cdc": {
        "batch": 4,                # N+1 mel crops per consistency term
        "layer_indices": None,     # null = all generator taps
        "pooling": "temporal_mean",
        "pool": "source",          # source | target | mixed
    },
    "data": {
        "source_speakers": 12,
        "utterances_per_speaker": 16,
        "utterance_seconds": 2.0,
        "target_utterances": 20,
        "seed": 0,
    },
    "eval": {
        "mcd_order": 13,
    },
}

_KIND_ALIASES = {"melgan": "melgan_like", "hifigan": "hifigan_like"}


class CliError(Exception):
    """Validation problem -> exit code 2."""


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config section {where!r} must be an object")
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from e
    return _merge_config(DEFAULT_CONFIG, user)


def _dsp_config(cfg: dict) -> DspConfig:
    return DspConfig(**cfg["dsp"])


def _train_config(cfg: dict, section: str = "train", mode: str | None = None) -> TrainConfig:
    kind = _KIND_ALIASES.get(cfg["model"]["kind"])
    if kind is None:
        raise CliError(f"unknown model kind {cfg['model']['kind']!r} (use melgan or hifigan)")
    t = cfg["train"]
    steps = cfg["finetune"]["steps"] if section == "finetune" else t["steps"]
    cdc_cfg = CdcConfig(batch=cfg["cdc"]["batch"],
                        layer_indices=tuple(cfg["cdc"]["layer_indices"]) if cfg["cdc"]["layer_indices"] else None,
                        pooling=cfg["cdc"]["pooling"])
    return TrainConfig(
        kind=kind,
        steps=steps,
        batch_size=t["batch_size"],
        crop_frames=t["crop_frames"],
        lr_gen=t["lr_gen"],
        lr_disc=t["lr_disc"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        cdc=cdc_cfg,
        cdc_pool=cfg["cdc"]["pool"],
        disc_from_checkpoint=cfg["finetune"]["disc_from_checkpoint"],
        seed=t["seed"],
        checkpoint_interval=t["checkpoint_interval"],
        log_interval=t["log_interval"],
        dsp=_dsp_config(cfg),
    )


def _run_root() -> Path:
    return Path(os.environ.get("VOCADAPT_RUN_ROOT", "runs"))


def _write_snapshot(cfg: dict, where: Path, name: str = "config.json") -> None:
    where.mkdir(parents=True, exist_ok=True)
    (where / name).write_text(json.dumps(cfg, indent=2) + "\n")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


# -- commands ---------------------------------------------------------------------


def cmd_synth_data(args, cfg) -> int:
    out = Path(args.out) if args.out else _run_root() / "corpus"
    if not out.parent.exists():
        raise OSError(f"parent directory does not exist: {out.parent}")
    d = cfg["data"]
    seed = args.seed if args.seed is not None else d["seed"]
    speakers = args.source_speakers if args.source_speakers is not None else d["source_speakers"]
    utterances = args.utterances if args.utterances is not None else d["utterances_per_speaker"]
    src, tgt = build_corpora(out, source_speakers=speakers, utterances_per_speaker=utterances,
                             target_spec=CHILD_TARGET_SPEC, seed=seed,
                             utterance_seconds=d["utterance_seconds"],
                             sample_rate=cfg["dsp"]["sample_rate"],
                             target_utterances=d["target_utterances"])
    _write_snapshot(cfg, out)
    print(src)
    print(tgt)
    return 0


def cmd_pretrain(args, cfg) -> int:
    if args.model:
        cfg["model"]["kind"] = args.model
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    manifest = _require_file(args.data, "manifest")
    out = Path(args.out) if args.out else _run_root() / "pretrain" / "pretrained.avck"
    tcfg = _train_config(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_snapshot(cfg, out.parent)
    try:
        bundle, _records = pretrain(manifest, tcfg, run_dir=out.parent, progress=not args.quiet)
    except TrainingNanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    save_checkpoint(bundle, out)
    log_path = out.parent / "pretrain_steps.jsonl"
    print(out)
    print(log_path)
    return 0


def cmd_finetune(args, cfg) -> int:
    if args.model:
        cfg["model"]["kind"] = args.model
    if args.steps is not None:
        cfg["finetune"]["steps"] = args.steps
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    cfg["finetune"]["mode"] = args.mode
    ckpt_path = _require_file(getattr(args, "from"), "checkpoint")
    manifest = _require_file(args.data, "target manifest")
    bundle = load_checkpoint(ckpt_path)
    if bundle.kind not in _KIND_ALIASES.values():
        raise CliError(f"checkpoint has unknown model kind {bundle.kind!r}")
    cfg["model"]["kind"] = {v: k for k, v in _KIND_ALIASES.items()}[bundle.kind] if args.model is None else cfg["model"]["kind"]
    tcfg = _train_config(cfg, section="finetune", mode=args.mode)
    if bundle.kind != tcfg.kind:
        raise CliError(f"checkpoint kind {bundle.kind!r} does not match configured kind {tcfg.kind!r}")
    source_manifest = None
    if args.mode == "cdc" and tcfg.cdc_pool in ("source", "mixed"):
        if not args.source_data:
            raise CliError("--mode cdc with a source mel pool requires --source-data MANIFEST")
        source_manifest = _require_file(args.source_data, "source manifest")
    out = Path(args.out) if args.out else _run_root() / "finetune" / f"finetuned_{args.mode}.avck"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_snapshot(cfg, out.parent)
    try:
        result, records = finetune(bundle, manifest, args.mode, tcfg,
                                   source_manifest=source_manifest, run_dir=out.parent,
                                   progress=not args.quiet)
    except TrainingNanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    save_checkpoint(result, out)
    print(out)
    return 0


def cmd_synthesize(args, cfg) -> int:
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    bundle = load_checkpoint(ckpt_path)
    dsp = _dsp_config(cfg)
    if args.mel:
        mel = load_mel(_require_file(args.mel, "mel file"), dsp)
    else:
        clip = load_wav(_require_file(args.wav, "wav file"))
        if clip.sample_rate != dsp.sample_rate:
            raise CliError(f"wav sample rate {clip.sample_rate} != configured {dsp.sample_rate}")
        mel = mel_spectrogram(clip, dsp)
    vocode = vocoder_from_bundle(bundle)
    wave = vocode(mel)
    out = Path(args.out)
    if not out.parent.exists():
        raise OSError(f"parent directory does not exist: {out.parent}")
    save_wav(wave, out)
    print(f"{out} ({wave.samples.size} samples, {wave.duration:.3f}s)")
    return 0


def cmd_evaluate(args, cfg) -> int:
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    manifest = _require_file(args.data, "manifest")
    out = Path(args.out) if args.out else _run_root() / "evaluate"
    dsp = _dsp_config(cfg)
    splits = ("train", "test") if args.split == "both" else (args.split,)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(cfg, out)
    for split in splits:
        report = evaluate_checkpoint(ckpt_path, manifest, split, dsp)
        path = out / f"report_{split}.json"
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"{split}: mr_stft={report.mr_stft_mean:.4f} mcd={report.mcd_mean:.3f}dB "
              f"({report.clip_count} clips) -> {path}")
    return 0


def cmd_compare(args, cfg) -> int:
    manifest = _require_file(args.data, "target manifest")
    ckpts = {}
    for spec in args.ckpt:
        if "=" not in spec:
            raise CliError(f"--ckpt expects MODE=PATH, got {spec!r}")
        mode, path = spec.split("=", 1)
        if mode not in FINETUNE_MODES:
            raise CliError(f"unknown mode {mode!r} in --ckpt (choose from {FINETUNE_MODES})")
        ckpts[mode] = _require_file(path, f"checkpoint for mode {mode}")
    if len(ckpts) < 2:
        raise CliError("compare needs at least two --ckpt MODE=PATH entries")
    out = Path(args.out) if args.out else _run_root() / "compare"
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(cfg, out)
    table = compare_modes(ckpts, manifest, _dsp_config(cfg), out_dir=out)
    print(table.render())
    return 0


def cmd_gradcheck(args, cfg) -> int:
    names = list(gradcheck_mod.CASES) if args.module == "all" else [args.module]
    unknown = [n for n in names if n not in gradcheck_mod.CASES]
    if unknown:
        raise CliError(f"unknown gradcheck module(s) {unknown}; choose from {sorted(gradcheck_mod.CASES)}")
    failures = []
    for name in names:
        result = gradcheck_mod.run_case(name, tolerance=args.tolerance)
        status = "PASS" if result.passed else "FAIL"
        print(f"{status}  {name:32s} max_rel_error={result.max_rel_error:.3e}")
        if not result.passed:
            failures.append(result)
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_error)
        print(f"{len(failures)} op(s) failed; worst: {worst.name} at {worst.max_rel_error:.3e} "
              f"(tolerance {args.tolerance:g})", file=sys.stderr)
        return 1
    print(f"all {len(names)} gradient checks passed at tolerance {args.tolerance:g}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vocadapt",
                                     description="Few-shot GAN vocoder adaptation toolkit")
    parser.add_argument("--config", help="JSON config file (flags override file values)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="synthesize source + target corpora")
    p.add_argument("--out", help="output directory (default $VOCADAPT_RUN_ROOT/corpus)")
    p.add_argument("--seed", type=int)
    p.add_argument("--source-speakers", type=int)
    p.add_argument("--utterances", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="train a source vocoder from scratch")
    p.add_argument("--data", required=True, help="source manifest")
    p.add_argument("--model", choices=("melgan", "hifigan"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pretrained checkpoint to a target corpus")
    p.add_argument("--from", required=True, help="source checkpoint")
    p.add_argument("--data", required=True, help="target manifest")
    p.add_argument("--mode", required=True, choices=FINETUNE_MODES)
    p.add_argument("--source-data", help="source manifest (cdc mel pool)")
    p.add_argument("--model", choices=("melgan", "hifigan"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("synthesize", help="vocode a stored mel or a reference wav")
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mel", help="AMEL mel container")
    src.add_argument("--wav", help="reference wav (mel is computed from it)")
    p.add_argument("--out", required=True, help="output wav path")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="objective metrics for one checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "both"), default="both")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="three-way fine-tune mode comparison table")
    p.add_argument("--ckpt", action="append", required=True, metavar="MODE=PATH")
    p.add_argument("--data", required=True, help="target manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all differentiable ops")
    p.add_argument("--module", default="all")
    p.add_argument("--tolerance", type=float, default=gradcheck_mod.DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingNanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
