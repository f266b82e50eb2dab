"""Objective spectral metrics and the fine-tune-mode comparison table.

Human listening scores are not reproducible at desk scale, so model ranking
uses two objective stand-ins:

  * multi-resolution STFT loss (primary): spectral convergence plus
    log-magnitude L1, summed over FFT sizes 512/1024/2048.
  * mel-cepstral distortion in dB (secondary).

Lower metric ~ better reconstruction is an assumption, not a theorem; both
metrics are stated per clip with per-split means and standard deviations so
the train/test generalization gap is explicit.  Both are time-alignment
sensitive by construction (no shift search), which is fine here because
vocoded audio is sample-aligned with its conditioning mel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointBundle, load_checkpoint
from .data import read_manifest, resolve_audio_path
from .dsp import AudioClip, DspConfig, MelSpectrogram, load_wav, mel_spectrogram, stft

MR_STFT_SIZES = (512, 1024, 2048)
MAG_FLOOR = 1e-7


def _aligned(reference: AudioClip, generated: AudioClip) -> np.ndarray:
    g = generated.samples
    L = reference.samples.size
    if g.size < L:
        g = np.concatenate([g, np.zeros(L - g.size)])
    return g[:L]


def mr_stft_loss(reference: AudioClip, generated: AudioClip,
                 fft_sizes=MR_STFT_SIZES, floor: float = MAG_FLOOR) -> float:
    """Sum over resolutions of ||R|-|G||_F / ||R||_F + mean |log|R| - log|G||.

    Magnitudes are floored before both terms.  Raises on a zero-energy
    reference (spectral convergence is undefined there).
    """
    if not np.any(reference.samples):
        raise ValueError("mr_stft_loss: zero-energy reference")
    gen = AudioClip(_aligned(reference, generated), reference.sample_rate)
    total = 0.0
    for n_fft in fft_sizes:
        cfg = DspConfig(sample_rate=reference.sample_rate, n_fft=n_fft, win_length=n_fft,
                        hop_length=n_fft // 4, n_mels=8, fmin=0.0,
                        fmax=reference.sample_rate / 2)
        R = np.maximum(np.abs(stft(reference, cfg)), floor)
        G = np.maximum(np.abs(stft(gen, cfg)), floor)
        sc = float(np.linalg.norm(R - G) / np.linalg.norm(R))
        logmag = float(np.mean(np.abs(np.log(R) - np.log(G))))
        total += sc + logmag
    return total


def mcd(reference: AudioClip, generated: AudioClip, order: int = 13,
        config: DspConfig | None = None) -> float:
    """Mel-cepstral distortion in dB over cepstra 1..order (DCT-II, ortho).

    The 0th coefficient is excluded, so a uniform gain difference does not
    register.
    """
    config = config or DspConfig(sample_rate=reference.sample_rate)
    gen = AudioClip(_aligned(reference, generated), reference.sample_rate)
    ref_mel = mel_spectrogram(reference, config).values
    gen_mel = mel_spectrogram(gen, config).values
    c_ref = dct(ref_mel, type=2, norm="ortho", axis=0)[1:order + 1]
    c_gen = dct(gen_mel, type=2, norm="ortho", axis=0)[1:order + 1]
    dist = np.sqrt(np.sum((c_ref - c_gen) ** 2, axis=0))
    return float((10.0 / np.log(10.0)) * np.sqrt(2.0) * np.mean(dist))


@dataclass
class MetricsReport:
    split: str
    clip_count: int
    mr_stft_per_clip: list[float]
    mcd_per_clip: list[float]

    @property
    def mr_stft_mean(self) -> float:
        return float(np.mean(self.mr_stft_per_clip))

    @property
    def mr_stft_std(self) -> float:
        return float(np.std(self.mr_stft_per_clip))

    @property
    def mcd_mean(self) -> float:
        return float(np.mean(self.mcd_per_clip))

    @property
    def mcd_std(self) -> float:
        return float(np.std(self.mcd_per_clip))

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "clip_count": self.clip_count,
            "mr_stft": {"mean": self.mr_stft_mean, "std": self.mr_stft_std,
                        "per_clip": self.mr_stft_per_clip},
            "mcd_db": {"mean": self.mcd_mean, "std": self.mcd_std,
                       "per_clip": self.mcd_per_clip},
            "note": "objective proxy metrics; lower = closer spectra (listening quality is an assumption)",
        }


def evaluate_clips(vocode_fn, manifest_path, split: str,
                   config: DspConfig | None = None) -> MetricsReport:
    """Vocode every clip in a split and compare against ground truth.

    ``vocode_fn(mel: MelSpectrogram) -> AudioClip`` is injectable so oracle
    doubles (e.g. a copy vocoder) can exercise the metric plumbing.
    """
    config = config or DspConfig()
    entries = [e for e in read_manifest(manifest_path) if e.split == split]
    if not entries:
        raise ValueError(f"{manifest_path}: no entries in split {split!r}")
    mr_vals, mcd_vals = [], []
    for e in entries:
        ref = load_wav(resolve_audio_path(manifest_path, e))
        mel = mel_spectrogram(ref, config)
        gen = vocode_fn(mel)
        mr_vals.append(mr_stft_loss(ref, gen))
        mcd_vals.append(mcd(ref, gen, config=config))
    return MetricsReport(split, len(entries), mr_vals, mcd_vals)


def vocoder_from_bundle(bundle: CheckpointBundle):
    """Inference-only vocode function for a checkpoint."""
    from .models import build_generator, generator_config_for  # local import avoids cycles

    gen = build_generator(generator_config_for(bundle.kind), seed=0)
    weights = bundle.tensors("gen.")
    if set(weights) != set(gen.params):
        raise ValueError("checkpoint generator parameters do not match the configured architecture")
    gen.params = weights

    def vocode(mel: MelSpectrogram) -> AudioClip:
        with ad.no_grad():
            wave = gen.forward(Tensor(mel.values.astype(np.float32)))
        return AudioClip(np.clip(wave.data.astype(np.float64), -1.0, 1.0), mel.config.sample_rate)

    return vocode


def evaluate_checkpoint(checkpoint, manifest_path, split: str,
                        config: DspConfig | None = None) -> MetricsReport:
    bundle = checkpoint if isinstance(checkpoint, CheckpointBundle) else load_checkpoint(checkpoint)
    return evaluate_clips(vocoder_from_bundle(bundle), manifest_path, split, config)


@dataclass
class ComparisonTable:
    """(model kind, mode) rows with train/test/gap columns per metric."""

    rows: list[dict] = field(default_factory=list)

    def add(self, kind: str, mode: str, train: MetricsReport, test: MetricsReport) -> None:
        self.rows.append({
            "kind": kind,
            "mode": mode,
            "mr_stft_train": train.mr_stft_mean,
            "mr_stft_test": test.mr_stft_mean,
            "mr_stft_gap": test.mr_stft_mean - train.mr_stft_mean,
            "mcd_train": train.mcd_mean,
            "mcd_test": test.mcd_mean,
            "mcd_gap": test.mcd_mean - train.mcd_mean,
        })

    def to_json(self) -> str:
        return json.dumps({"metric_note": "mr_stft is the primary ranking metric; gap = test - train",
                           "rows": self.rows}, indent=2)

    def render(self) -> str:
        header = (f"{'kind':<14} {'mode':<12} {'mrstft_train':>12} {'mrstft_test':>12} "
                  f"{'mrstft_gap':>11} {'mcd_train':>10} {'mcd_test':>10} {'mcd_gap':>9}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r['kind']:<14} {r['mode']:<12} {r['mr_stft_train']:>12.4f} "
                         f"{r['mr_stft_test']:>12.4f} {r['mr_stft_gap']:>11.4f} "
                         f"{r['mcd_train']:>10.3f} {r['mcd_test']:>10.3f} {r['mcd_gap']:>9.3f}")
        return "\n".join(lines)


def compare_modes(checkpoints_by_mode: dict, target_manifest, config: DspConfig | None = None,
                  out_dir=None, tag: str = "comparison") -> ComparisonTable:
    """Evaluate one checkpoint per fine-tune mode on the target train and
    test splits; optionally write the table as JSON + aligned text."""
    if len(checkpoints_by_mode) < 2:
        raise ValueError("compare_modes needs at least 2 modes")
    table = ComparisonTable()
    for mode, ckpt in checkpoints_by_mode.items():
        bundle = ckpt if isinstance(ckpt, CheckpointBundle) else load_checkpoint(ckpt)
        train = evaluate_checkpoint(bundle, target_manifest, "train", config)
        test = evaluate_checkpoint(bundle, target_manifest, "test", config)
        table.add(bundle.kind, mode, train, test)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{tag}.json").write_text(table.to_json())
        (out_dir / f"{tag}.txt").write_text(table.render() + "\n")
    return table
