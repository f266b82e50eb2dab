"""Waveform I/O and spectral features (STFT, mel filterbank, log-mel).

Frame convention, pinned once for the whole toolkit: a clip is first
right-padded with zeros up to a multiple of ``hop_length`` and then
reflect-padded by ``(n_fft - hop_length) / 2`` on each side, so the frame
count is exactly ``ceil(len(samples) / hop_length)``.  That makes the
generator's fixed 256x upsampling factor an exact length contract instead of
an off-by-one convention.

``log_mel_tensor`` is the differentiable twin of ``mel_spectrogram``: the
forward pass runs the exact same numeric path (bit-identical values), the
backward pass chains analytically through log, the mel projection, the
magnitude, the real FFT and the framing/padding.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor

_WAV_SCALE = 32768.0


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_fft < 2 or (self.n_fft & (self.n_fft - 1)) != 0:
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.win_length > self.n_fft or self.win_length < 1:
            raise ValueError(f"win_length must be in [1, n_fft], got {self.win_length}")
        if self.hop_length < 1:
            raise ValueError("hop_length must be positive")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin} fmax={self.fmax}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be > 0")

    def frame_count(self, n_samples: int) -> int:
        return -(-n_samples // self.hop_length)


@dataclass
class AudioClip:
    """Mono waveform; samples are float64 amplitudes, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-d sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    """Log-magnitude mel frames, shape [n_mels, T]."""

    values: np.ndarray
    config: DspConfig = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != self.config.n_mels:
            raise ValueError(f"mel values must be [n_mels={self.config.n_mels}, T], got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[1]


# -- WAV I/O --------------------------------------------------------------------


def load_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM RIFF/WAVE file; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, got sample width {wf.getsampwidth()}")
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as e:
        raise ValueError(f"{path}: not a supported WAV file ({e})") from e
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise ValueError(f"{path}: empty audio stream")
    return AudioClip(pcm.astype(np.float64) / _WAV_SCALE, sr)


def save_wav(clip: AudioClip, path) -> None:
    """Write mono 16-bit PCM; values are clamped to [-1, 1] before quantizing."""
    x = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.clip(np.round(x * _WAV_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# -- framing / windows -------------------------------------------------------------


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Gather indices implementing edge-excluding reflection, any pad width."""
    if n == 1:
        return np.zeros(2 * pad + 1, dtype=np.intp)
    idx = np.abs(np.arange(-pad, n + pad))
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx >= n, period - idx, idx).astype(np.intp)


def hann_window(win_length: int, n_fft: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann of win_length, zero-padded centered to n_fft."""
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    if win_length < n_fft:
        lpad = (n_fft - win_length) // 2
        w = np.concatenate([np.zeros(lpad), w, np.zeros(n_fft - win_length - lpad)])
    return w.astype(dtype)


def _pad_and_frame(samples: np.ndarray, cfg: DspConfig):
    """Returns (frames [T, n_fft], zero_tail, reflect_index_array)."""
    L = samples.size
    T = cfg.frame_count(L)
    tail = T * cfg.hop_length - L
    x = np.concatenate([samples, np.zeros(tail, dtype=samples.dtype)]) if tail else samples
    side = (cfg.n_fft - cfg.hop_length) // 2
    ridx = _reflect_indices(x.size, side)
    padded = x[ridx]
    sL, = padded.strides
    frames = np.lib.stride_tricks.as_strided(
        padded, (T, cfg.n_fft), (sL * cfg.hop_length, sL), writeable=False)
    return frames, tail, ridx


def stft(clip: AudioClip, config: DspConfig) -> np.ndarray:
    """Hann-windowed STFT, complex matrix [n_fft/2+1, T]."""
    if clip.sample_rate != config.sample_rate:
        raise ValueError(f"clip sample rate {clip.sample_rate} != config {config.sample_rate}; resampling is not supported")
    frames, _, _ = _pad_and_frame(clip.samples, config)
    w = hann_window(config.win_length, config.n_fft)
    return np.fft.rfft(frames * w, axis=1).T


# -- mel ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: DspConfig) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape [n_mels, n_fft/2+1]."""
    n_bins = config.n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * config.sample_rate / config.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    fb = np.zeros((config.n_mels, n_bins))
    for i in range(config.n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError(f"degenerate mel filterbank: {config.n_mels} filters over [{config.fmin}, {config.fmax}] Hz "
                         f"leave at least one filter with no FFT bin")
    return fb


_fb_cache: dict = {}


def _cached_filterbank(cfg: DspConfig) -> np.ndarray:
    fb = _fb_cache.get(cfg)
    if fb is None:
        fb = mel_filterbank(cfg)
        _fb_cache[cfg] = fb
    return fb


def mel_spectrogram(clip: AudioClip, config: DspConfig) -> MelSpectrogram:
    """log(max(filterbank @ |stft|, log_floor)); T = ceil(len/hop)."""
    if clip.sample_rate != config.sample_rate:
        raise ValueError(f"clip sample rate {clip.sample_rate} != config {config.sample_rate}; resampling is not supported")
    values = _log_mel_forward(clip.samples.astype(np.float64), config)[0]
    return MelSpectrogram(values, config)


def _log_mel_forward(samples: np.ndarray, cfg: DspConfig):
    frames, tail, ridx = _pad_and_frame(samples, cfg)
    w = hann_window(cfg.win_length, cfg.n_fft, dtype=samples.dtype)
    windowed = frames * w
    spec = np.fft.rfft(windowed, axis=1)
    mag = np.abs(spec)
    fb = _cached_filterbank(cfg).astype(samples.dtype, copy=False)
    mel = fb @ mag.T
    values = np.log(np.maximum(mel, cfg.log_floor))
    cache = (tail, ridx, w, spec, mag, fb, mel)
    return values, cache


_dft_cache: dict = {}


def _dft_matrices(n_fft: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (n_fft, np.dtype(dtype).name)
    mats = _dft_cache.get(key)
    if mats is None:
        k = np.arange(n_fft // 2 + 1)[:, None]
        n = np.arange(n_fft)[None, :]
        ang = 2.0 * np.pi * k * n / n_fft
        mats = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
        _dft_cache[key] = mats
    return mats


def log_mel_tensor(waveform: Tensor, config: DspConfig) -> Tensor:
    """Differentiable log-mel of a waveform tensor [L] or [B, L].

    Forward values are bit-identical to ``mel_spectrogram`` on the same
    samples; gradients flow back through the whole spectral chain.
    """
    data = waveform.data
    squeeze = data.ndim == 1
    if squeeze:
        data = data[None]
    if data.ndim != 2:
        raise ValueError(f"log_mel_tensor expects [L] or [B, L], got {waveform.data.shape}")
    B, L = data.shape
    outs, caches = [], []
    for b in range(B):
        values, cache = _log_mel_forward(data[b], config)
        outs.append(values)
        caches.append(cache)
    y = np.stack(outs)
    out_data = y[0] if squeeze else y
    out = autodiff.make_op(out_data, (waveform,), None, "log_mel")
    if out._tracked:
        hop = config.hop_length
        floor = config.log_floor

        def _bwd(g):
            gb = g[None] if squeeze else g
            gx = np.zeros_like(data)
            for b in range(B):
                tail, ridx, w, spec, mag, fb, mel = caches[b]
                gm = np.where(mel > floor, gb[b] / mel, 0.0)
                dmag = (fb.T @ gm).T  # [T, bins]
                safe = np.where(mag > 0, mag, 1.0)
                re_g = dmag * (spec.real / safe)
                im_g = dmag * (spec.imag / safe)
                C, S = _dft_matrices(config.n_fft, data.dtype)
                dwin = re_g @ C - im_g @ S
                dframes = dwin * w
                T = dframes.shape[0]
                gp = np.zeros(ridx.size, dtype=data.dtype)
                pos = np.arange(config.n_fft)[None, :] + hop * np.arange(T)[:, None]
                np.add.at(gp, pos.ravel(), dframes.ravel())
                gxt = np.zeros(L + tail, dtype=data.dtype)
                np.add.at(gxt, ridx, gp)
                gx[b] = gxt[:L]
            autodiff.accumulate(waveform, gx[0] if squeeze else gx)
        out._backward = _bwd
    return out


# -- mel container on disk -----------------------------------------------------------

_AMEL_MAGIC = b"AMEL"
_AMEL_VERSION = 1


def save_mel(mel: MelSpectrogram, path) -> None:
    """Binary container: magic 'AMEL', version u32, n_mels u32, T u32, then row-major float32."""
    with open(path, "wb") as f:
        f.write(_AMEL_MAGIC)
        f.write(struct.pack("<III", _AMEL_VERSION, mel.values.shape[0], mel.values.shape[1]))
        f.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())


def load_mel(path, config: DspConfig | None = None) -> MelSpectrogram:
    config = config or DspConfig()
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:4] != _AMEL_MAGIC:
            raise ValueError(f"{path}: not an AMEL mel container")
        version, n_mels, frames = struct.unpack("<III", head[4:])
        if version != _AMEL_VERSION:
            raise ValueError(f"{path}: unsupported AMEL version {version}")
        payload = f.read(4 * n_mels * frames)
        if len(payload) != 4 * n_mels * frames:
            raise ValueError(f"{path}: truncated AMEL payload")
    if n_mels != config.n_mels:
        raise ValueError(f"{path}: container has {n_mels} mel bands, config expects {config.n_mels}")
    values = np.frombuffer(payload, dtype="<f4").reshape(n_mels, frames).astype(np.float64)
    return MelSpectrogram(values, config)
