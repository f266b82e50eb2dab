"""Dataset manifests, synthetic speakers, and training crop batches.

The synthetic corpus stands in for real speech so every experiment runs
with zero downloads: each speaker is a source-filter model (sawtooth
glottal source with a pitch contour, parallel formant resonators,
syllable-rate amplitude bursts).  Pitch ranges separate the "adult"
source speakers from the "child" target speaker, reproducing the
source/target distribution mismatch the adaptation experiments need.

Manifests are JSON-lines files; each record holds path, split, speaker,
duration.  Audio paths are stored relative to the manifest's directory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import AudioClip, DspConfig, MelSpectrogram, load_wav, mel_spectrogram, save_wav
from .rng import CounterRng


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    speaker: str
    duration: float

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train/test, got {self.split!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class SpeakerSpec:
    """Source-filter parameters for one synthetic voice."""

    f0_range: tuple = (100.0, 180.0)          # Hz
    formants: tuple = (700.0, 1200.0, 2600.0)  # center frequencies, Hz
    bandwidths: tuple = (90.0, 120.0, 180.0)   # Hz
    jitter: float = 0.01                       # fractional pitch wobble
    syllable_rate: float = 3.5                 # bursts per second

    def __post_init__(self):
        lo, hi = self.f0_range
        if not (50.0 < lo < hi < 600.0):
            raise ValueError(f"f0 range must lie within (50, 600) Hz, got {self.f0_range}")
        if list(self.formants) != sorted(self.formants):
            raise ValueError("formant frequencies must be increasing")
        if len(self.bandwidths) != len(self.formants):
            raise ValueError("one bandwidth per formant")
        if not (0 <= self.jitter < 0.2):
            raise ValueError("jitter must be a small fraction")
        if self.syllable_rate <= 0:
            raise ValueError("syllable_rate must be positive")


CHILD_TARGET_SPEC = SpeakerSpec(
    f0_range=(260.0, 380.0),
    formants=(950.0, 1750.0, 3400.0),
    bandwidths=(110.0, 150.0, 220.0),
    jitter=0.015,
    syllable_rate=4.0,
)


# -- manifest I/O -----------------------------------------------------------------


def write_manifest(entries: list[ManifestEntry], path) -> None:
    seen = set()
    with open(path, "w") as f:
        for e in entries:
            if e.path in seen:
                warnings.warn(f"duplicate manifest path {e.path!r}", stacklevel=2)
            seen.add(e.path)
            f.write(json.dumps({"path": e.path, "split": e.split,
                                "speaker": e.speaker, "duration": e.duration}) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entry = ManifestEntry(rec["path"], rec["split"], rec["speaker"], float(rec["duration"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed manifest line ({e})") from e
            if entry.path in seen:
                warnings.warn(f"{path}:{lineno}: duplicate manifest path {entry.path!r}", stacklevel=2)
            seen.add(entry.path)
            entries.append(entry)
    return entries


def resolve_audio_path(manifest_path, entry: ManifestEntry) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# -- synthetic speech ---------------------------------------------------------------


def _smooth_contour(rng: CounterRng, n_samples: int, n_knots: int) -> np.ndarray:
    knots = rng.uniform((max(n_knots, 2),))
    xk = np.linspace(0, n_samples - 1, len(knots))
    return np.interp(np.arange(n_samples), xk, knots)


def synth_speaker(spec: SpeakerSpec, seconds: float, seed: int,
                  sample_rate: int = 16000) -> AudioClip:
    """Deterministic pseudo-speech for one utterance.

    Sawtooth source at a wandering pitch inside the speaker's range,
    filtered by parallel two-pole resonators at the formant frequencies,
    gated into syllable-like bursts, peak-normalized to 0.95.
    """
    rng = CounterRng(seed).stream("synth")
    n = int(round(seconds * sample_rate))
    if n < 1:
        raise ValueError("utterance too short")

    lo, hi = spec.f0_range
    margin = 0.08 * (hi - lo)
    contour = _smooth_contour(rng, n, n_knots=6)
    f0 = (lo + margin) + (hi - lo - 2 * margin) * contour
    wobble = _smooth_contour(rng, n, n_knots=40) * 2.0 - 1.0
    f0 = np.clip(f0 * (1.0 + spec.jitter * wobble), lo, hi)

    phase = np.cumsum(f0) / sample_rate
    source = 2.0 * (phase % 1.0) - 1.0
    source += 0.02 * rng.normal((n,))   # aspiration noise

    voiced = np.zeros(n)
    for freq, bw, gain in zip(spec.formants, spec.bandwidths, (1.0, 0.6, 0.35, 0.2)):
        r = np.exp(-np.pi * bw / sample_rate)
        theta = 2.0 * np.pi * freq / sample_rate
        b = [(1.0 - r * r) / 2.0, 0.0, -(1.0 - r * r) / 2.0]
        a = [1.0, -2.0 * r * np.cos(theta), r * r]
        voiced += gain * lfilter(b, a, source)

    syllables = 0.5 - 0.5 * np.cos(2.0 * np.pi * spec.syllable_rate * np.arange(n) / sample_rate)
    gate = np.where(syllables > 0.15, syllables, 0.0)
    accents = 0.6 + 0.4 * _smooth_contour(rng, n, n_knots=max(2, int(seconds * spec.syllable_rate)))
    samples = voiced * gate * accents

    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = samples * (0.95 / peak)
    return AudioClip(samples, sample_rate)


def estimate_f0_autocorr(clip: AudioClip, fmin: float = 60.0, fmax: float = 450.0,
                         frame: float = 0.04) -> float:
    """Median autocorrelation pitch over the most energetic frames."""
    sr = clip.sample_rate
    n = int(frame * sr)
    lag_lo = max(2, int(sr / fmax))
    lag_hi = min(n - 1, int(sr / fmin))
    if lag_hi <= lag_lo:
        raise ValueError("frame too short for the requested pitch range")
    x = clip.samples
    frames = [x[i:i + n] for i in range(0, x.size - n, n // 2)]
    if not frames:
        frames = [x]
    energies = [float(np.sum(f * f)) for f in frames]
    keep = sorted(range(len(frames)), key=lambda i: -energies[i])[:max(1, len(frames) // 3)]
    pitches = []
    for i in keep:
        f = frames[i] - frames[i].mean()
        ac = np.correlate(f, f, mode="full")[f.size - 1:]
        if ac[0] <= 0:
            continue
        lag = lag_lo + int(np.argmax(ac[lag_lo:lag_hi + 1]))
        pitches.append(sr / lag)
    if not pitches:
        raise ValueError("no voiced frames found")
    return float(np.median(pitches))


# -- corpora --------------------------------------------------------------------------


def _adult_spec(rng: CounterRng) -> SpeakerSpec:
    lo = 95.0 + 45.0 * rng.uniform()
    span = 40.0 + 25.0 * rng.uniform()
    scale = 0.9 + 0.25 * rng.uniform()
    return SpeakerSpec(
        f0_range=(lo, lo + span),
        formants=(650.0 * scale, 1250.0 * scale, 2600.0 * scale),
        bandwidths=(80.0 + 30.0 * rng.uniform(), 110.0 + 40.0 * rng.uniform(), 170.0 + 50.0 * rng.uniform()),
        jitter=0.008 + 0.008 * rng.uniform(),
        syllable_rate=2.8 + 1.4 * rng.uniform(),
    )


def build_corpora(out_dir, source_speakers: int = 12, utterances_per_speaker: int = 16,
                  target_spec: SpeakerSpec = CHILD_TARGET_SPEC, seed: int = 0,
                  utterance_seconds: float = 2.0, sample_rate: int = 16000,
                  target_utterances: int = 20) -> tuple[Path, Path]:
    """Write a multi-speaker source corpus and a few-shot target corpus.

    Source: ``source_speakers`` adult-range voices x ``utterances_per_speaker``
    clips, split 90/10 train/test.  Target: ``target_utterances`` clips from
    one child-range voice, split half/half.  Returns the two manifest paths.
    """
    if source_speakers < 2:
        raise ValueError("need at least 2 source speakers")
    out_dir = Path(out_dir)
    rng = CounterRng(seed)
    spec_rng = rng.stream("speaker_specs")

    source_dir = out_dir / "source"
    target_dir = out_dir / "target"
    source_dir.mkdir(parents=True, exist_ok=True)
    target_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for s in range(source_speakers):
        spec = _adult_spec(spec_rng)
        for u in range(utterances_per_speaker):
            dur = utterance_seconds * (0.9 + 0.2 * rng.stream(f"dur.{s}.{u}").uniform())
            clip_seed = int(rng.stream(f"clip.{s}.{u}").randint(1 << 62))
            clip = synth_speaker(spec, dur, clip_seed, sample_rate)
            rel = f"source/spk{s:02d}_utt{u:02d}.wav"
            save_wav(clip, out_dir / rel)
            entries.append((rel, f"spk{s:02d}", clip.duration))
    order = rng.stream("source_split").shuffle(list(range(len(entries))))
    n_train = int(round(0.9 * len(entries)))
    source_entries = []
    for rank, idx in enumerate(order):
        rel, spk, dur = entries[idx]
        source_entries.append(ManifestEntry(rel, "train" if rank < n_train else "test", spk, dur))
    source_entries.sort(key=lambda e: e.path)
    source_manifest = out_dir / "source_manifest.jsonl"
    write_manifest(source_entries, source_manifest)

    target_entries = []
    t_order = rng.stream("target_split").shuffle(list(range(target_utterances)))
    split_of = {idx: ("train" if rank < target_utterances // 2 else "test")
                for rank, idx in enumerate(t_order)}
    for u in range(target_utterances):
        dur = utterance_seconds * (0.9 + 0.2 * rng.stream(f"tdur.{u}").uniform())
        clip_seed = int(rng.stream(f"tclip.{u}").randint(1 << 62))
        clip = synth_speaker(target_spec, dur, clip_seed, sample_rate)
        rel = f"target/utt{u:02d}.wav"
        save_wav(clip, out_dir / rel)
        target_entries.append(ManifestEntry(rel, split_of[u], "target", clip.duration))
    target_manifest = out_dir / "target_manifest.jsonl"
    write_manifest(target_entries, target_manifest)
    return source_manifest, target_manifest


# -- crop batches ------------------------------------------------------------------------


@dataclass
class CropBatch:
    """Aligned (mel, waveform) crops; waveform length is hop * crop_frames."""

    mels: np.ndarray        # [B, n_mels, T_c]
    waveforms: np.ndarray   # [B, hop * T_c]
    crop_frames: int
    padded: list[bool] = field(default_factory=list)


class ClipPool:
    """Split view over a manifest with an in-memory audio cache."""

    def __init__(self, manifest_path, split: str, config: DspConfig):
        self.manifest_path = Path(manifest_path)
        self.config = config
        self.entries = [e for e in read_manifest(manifest_path) if e.split == split]
        if not self.entries:
            raise ValueError(f"{manifest_path}: no entries in split {split!r}")
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.entries)

    def samples(self, idx: int) -> np.ndarray:
        e = self.entries[idx]
        cached = self._cache.get(e.path)
        if cached is None:
            clip = load_wav(resolve_audio_path(self.manifest_path, e))
            if clip.sample_rate != self.config.sample_rate:
                raise ValueError(f"{e.path}: sample rate {clip.sample_rate} != config {self.config.sample_rate}")
            cached = clip.samples
            self._cache[e.path] = cached
        return cached


def sample_crop_batch(pool: ClipPool, batch_size: int, crop_frames: int,
                      rng: CounterRng) -> CropBatch:
    """Uniform clip choice and hop-aligned crop offset; short clips are
    right-padded with zeros and flagged."""
    hop = pool.config.hop_length
    crop_len = hop * crop_frames
    mels, waves, padded = [], [], []
    for _ in range(batch_size):
        x = pool.samples(rng.randint(len(pool)))
        if x.size < crop_len:
            x = np.concatenate([x, np.zeros(crop_len - x.size)])
            offset = 0
            padded.append(True)
        else:
            max_hop = (x.size - crop_len) // hop
            offset = hop * rng.randint(max_hop + 1)
            padded.append(False)
        crop = x[offset:offset + crop_len]
        mel = mel_spectrogram(AudioClip(crop, pool.config.sample_rate), pool.config)
        mels.append(mel.values)
        waves.append(crop)
    return CropBatch(np.stack(mels), np.stack(waves), crop_frames, padded)


def mel_crops_from_pool(pool: ClipPool, count: int, crop_frames: int,
                        rng: CounterRng) -> list[MelSpectrogram]:
    """Mel-only crops (for the consistency batch); sampling with replacement."""
    batch = sample_crop_batch(pool, count, crop_frames, rng)
    return [MelSpectrogram(batch.mels[i], pool.config) for i in range(count)]
