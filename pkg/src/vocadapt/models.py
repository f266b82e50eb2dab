"""Toy-scale mel-to-waveform generators and waveform discriminators.

Two generator families share one skeleton (input conv, a stack of
transposed-conv upsampling blocks whose stride product equals the 256x
mel hop, output conv + tanh):

  * ``melgan_like``   - each upsample is followed by one stack of dilated
    residual blocks (kernel 3, dilations 1/3/9).
  * ``hifigan_like``  - each upsample is followed by multi-receptive-field
    fusion: parallel residual stacks with distinct kernel sizes whose
    outputs are summed and averaged.

Each upsampling block's output (post residual stack) is a "tap": the
activation the consistency loss compares between a frozen source generator
and the adapting one.

Discriminators:

  * ``msd``      - 3 identical sub-discriminators on raw, 2x and 4x
    average-pooled audio.
  * ``mpd``      - one sub-discriminator per period p; the input is reshaped
    so convolutions stride over time-within-period.
  * ``combined`` - msd + mpd concatenated (HiFi-GAN style).

All sub-discriminators expose their intermediate post-activation feature
maps for the feature-matching loss.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import CounterRng

MELGAN_KIND = "melgan_like"
HIFIGAN_KIND = "hifigan_like"
GENERATOR_KINDS = (MELGAN_KIND, HIFIGAN_KIND)

HOP_FACTOR = 256
WEIGHT_STD = 0.02
LRELU_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = MELGAN_KIND
    mel_channels: int = 80
    base_channels: int = 32
    upsample_strides: tuple = (8, 8, 2, 2)
    resblock_kernels: tuple = (3,)          # melgan_like uses one stack; hifigan_like fuses several
    resblock_dilations: tuple = (1, 3, 9)
    min_channels: int = 4
    io_kernel: int = 7

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if int(np.prod(self.upsample_strides)) != HOP_FACTOR:
            raise ValueError(f"upsample stride product must be {HOP_FACTOR}, got {self.upsample_strides}")
        if any(s < 2 or s % 2 for s in self.upsample_strides):
            raise ValueError("upsample strides must be even and >= 2")
        if self.base_channels < self.min_channels:
            raise ValueError("base_channels below the channel floor")
        if self.io_kernel % 2 == 0:
            raise ValueError("io_kernel must be odd")
        if any(k % 2 == 0 for k in self.resblock_kernels):
            raise ValueError("resblock kernels must be odd")

    def channel_schedule(self) -> list[int]:
        """Channel count after each upsampling block (halved, floored)."""
        chans = []
        c = self.base_channels
        for _ in self.upsample_strides:
            c = max(c // 2, self.min_channels)
            chans.append(c)
        return chans


def melgan_config(**overrides) -> GeneratorConfig:
    kw = dict(kind=MELGAN_KIND, base_channels=32, resblock_kernels=(3,), resblock_dilations=(1, 3, 9))
    kw.update(overrides)
    return GeneratorConfig(**kw)


def hifigan_config(**overrides) -> GeneratorConfig:
    kw = dict(kind=HIFIGAN_KIND, base_channels=64, resblock_kernels=(3, 7), resblock_dilations=(1, 3))
    kw.update(overrides)
    return GeneratorConfig(**kw)


def generator_config_for(kind: str, **overrides) -> GeneratorConfig:
    if kind == MELGAN_KIND:
        return melgan_config(**overrides)
    if kind == HIFIGAN_KIND:
        return hifigan_config(**overrides)
    raise ValueError(f"unknown generator kind {kind!r}")


def _init_params(shapes: dict[str, tuple], rng: CounterRng, dtype,
                 scheme: str = "normal002") -> dict[str, Tensor]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        elif scheme == "fan_in":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            data = rng.normal(shape, std=1.0 / np.sqrt(fan_in)).astype(dtype)
        else:
            data = rng.normal(shape, std=WEIGHT_STD).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


class GeneratorHandle:
    """Parameter container plus the forward pass for one generator."""

    def __init__(self, config: GeneratorConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def kind(self) -> str:
        return self.config.kind

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.set_requires_grad(flag)

    def forward(self, mel: Tensor) -> Tensor:
        return self.forward_with_taps(mel)[0]

    def forward_with_taps(self, mel: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Vocode a mel tensor [n_mels, T] or [B, n_mels, T].

        Returns (waveform [L=256*T] or [B, L], taps), taps being the output of
        every upsampling block in network order.
        """
        cfg = self.config
        squeeze = mel.data.ndim == 2
        if mel.data.shape[-2] != cfg.mel_channels:
            raise ValueError(f"mel has {mel.data.shape[-2]} channels, generator expects {cfg.mel_channels}")
        p = self.params
        pad_io = (cfg.io_kernel - 1) // 2
        x = ad.conv1d(mel, p["in.w"], p["in.b"], padding=pad_io)
        taps = []
        for i, stride in enumerate(cfg.upsample_strides):
            x = ad.leaky_relu(x, LRELU_SLOPE)
            x = ad.conv_transpose1d(x, p[f"up{i}.w"], p[f"up{i}.b"], stride=stride, padding=stride // 2)
            if cfg.kind == MELGAN_KIND:
                x = self._res_stack(x, f"up{i}.k{cfg.resblock_kernels[0]}", cfg.resblock_kernels[0])
            else:
                acc = None
                for ks in cfg.resblock_kernels:
                    y = self._res_stack(x, f"up{i}.k{ks}", ks)
                    acc = y if acc is None else ad.add(acc, y)
                x = ad.scalar_mul(acc, 1.0 / len(cfg.resblock_kernels))
            taps.append(x)
        x = ad.leaky_relu(x, LRELU_SLOPE)
        x = ad.conv1d(x, p["out.w"], p["out.b"], padding=pad_io)
        wave = ad.tanh(x)
        if squeeze:
            wave = ad.reshape(wave, (wave.data.shape[-1],))
        else:
            wave = ad.reshape(wave, (wave.data.shape[0], wave.data.shape[-1]))
        return wave, taps

    def _res_stack(self, x: Tensor, prefix: str, kernel: int) -> Tensor:
        p = self.params
        for j, dil in enumerate(self.config.resblock_dilations):
            y = ad.leaky_relu(x, LRELU_SLOPE)
            y = ad.conv1d(y, p[f"{prefix}.d{j}.c1.w"], p[f"{prefix}.d{j}.c1.b"],
                          padding=dil * (kernel - 1) // 2, dilation=dil)
            y = ad.leaky_relu(y, LRELU_SLOPE)
            if self.config.kind == MELGAN_KIND:
                y = ad.conv1d(y, p[f"{prefix}.d{j}.c2.w"], p[f"{prefix}.d{j}.c2.b"])
            else:
                y = ad.conv1d(y, p[f"{prefix}.d{j}.c2.w"], p[f"{prefix}.d{j}.c2.b"],
                              padding=(kernel - 1) // 2)
            x = ad.add(x, y)
        return x


def _generator_shapes(cfg: GeneratorConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    shapes["in.w"] = (cfg.base_channels, cfg.mel_channels, cfg.io_kernel)
    shapes["in.b"] = (cfg.base_channels,)
    c_in = cfg.base_channels
    for i, (stride, c_out) in enumerate(zip(cfg.upsample_strides, cfg.channel_schedule())):
        shapes[f"up{i}.w"] = (c_in, c_out, 2 * stride)
        shapes[f"up{i}.b"] = (c_out,)
        kernels = cfg.resblock_kernels if cfg.kind == HIFIGAN_KIND else cfg.resblock_kernels[:1]
        for ks in kernels:
            for j in range(len(cfg.resblock_dilations)):
                shapes[f"up{i}.k{ks}.d{j}.c1.w"] = (c_out, c_out, ks)
                shapes[f"up{i}.k{ks}.d{j}.c1.b"] = (c_out,)
                c2k = 1 if cfg.kind == MELGAN_KIND else ks
                shapes[f"up{i}.k{ks}.d{j}.c2.w"] = (c_out, c_out, c2k)
                shapes[f"up{i}.k{ks}.d{j}.c2.b"] = (c_out,)
        c_in = c_out
    shapes["out.w"] = (1, c_in, cfg.io_kernel)
    shapes["out.b"] = (1,)
    return shapes


def build_generator(config: GeneratorConfig, seed: int, dtype=np.float32,
                    init_scheme: str = "normal002") -> GeneratorHandle:
    rng = CounterRng(seed).stream("init.gen")
    return GeneratorHandle(config, _init_params(_generator_shapes(config), rng, dtype, init_scheme))


# -- discriminators ---------------------------------------------------------------

MSD_KIND = "msd"
MPD_KIND = "mpd"
COMBINED_KIND = "combined"
DISCRIMINATOR_KINDS = (MSD_KIND, MPD_KIND, COMBINED_KIND)

# (out_channels, kernel, stride, groups); in_channels chain from 1, final layer emits logits
_MSD_LAYERS = ((8, 15, 2, 1), (16, 21, 4, 4), (32, 21, 4, 4), (32, 5, 1, 1))
_MSD_FINAL = (1, 3, 1, 1)
_MPD_LAYERS = ((8, 5, 3, 1), (16, 5, 3, 1), (32, 5, 3, 1), (32, 5, 1, 1))
_MPD_FINAL = (1, 3, 1, 1)


@dataclass(frozen=True)
class DiscriminatorConfig:
    kind: str = MSD_KIND
    msd_scales: int = 3
    periods: tuple = (2, 3, 5, 7, 11)

    def __post_init__(self):
        if self.kind not in DISCRIMINATOR_KINDS:
            raise ValueError(f"unknown discriminator kind {self.kind!r}")
        if self.kind in (MSD_KIND, COMBINED_KIND) and self.msd_scales != 3:
            raise ValueError("multi-scale discriminator is defined with exactly 3 scales")
        if self.kind in (MPD_KIND, COMBINED_KIND) and not self.periods:
            raise ValueError("period set must be non-empty")


def discriminator_config_for(gen_kind: str) -> DiscriminatorConfig:
    """MelGAN-like trains against MSD; HiFi-GAN-like against MSD + MPD."""
    return DiscriminatorConfig(kind=MSD_KIND if gen_kind == MELGAN_KIND else COMBINED_KIND)


class DiscriminatorHandle:
    def __init__(self, config: DiscriminatorConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def kind(self) -> str:
        return self.config.kind

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.set_requires_grad(flag)

    def min_input_length(self) -> int:
        """Smallest audio length every sub-discriminator accepts."""
        L = 1
        while not self._length_ok(L):
            L *= 2
            if L > 1 << 20:
                raise RuntimeError("no feasible input length")
        lo, hi = L // 2, L
        while lo + 1 < hi:
            mid = (lo + hi) // 2
            if self._length_ok(mid):
                hi = mid
            else:
                lo = mid
        return hi

    def _length_ok(self, L: int) -> bool:
        def chain_ok(L0, layers):
            for (_, k, s, _) in layers:
                L0 = (L0 + 2 * (k // 2) - k) // s + 1
                if L0 < 1:
                    return False
            return True

        if self.config.kind in (MSD_KIND, COMBINED_KIND):
            Ls = L
            for _ in range(self.config.msd_scales):
                if not chain_ok(Ls, _MSD_LAYERS + (_MSD_FINAL,)):
                    return False
                Ls = (Ls + 2 - 4) // 2 + 1
                if Ls < 1:
                    return False
        if self.config.kind in (MPD_KIND, COMBINED_KIND):
            for p in self.config.periods:
                if not chain_ok(-(-L // p), _MPD_LAYERS + (_MPD_FINAL,)):
                    return False
        return True

    def forward(self, audio: Tensor) -> list[tuple[Tensor, list[Tensor]]]:
        """Run every sub-discriminator on audio [L] or [B, L].

        Returns one (logit map, [intermediate feature maps]) pair per
        sub-discriminator: MSD entries first (x1, x2, x4 pooling), then one
        entry per period.
        """
        data_len = audio.data.shape[-1]
        need = self.min_input_length()
        if data_len < need:
            raise ValueError(f"audio length {data_len} below discriminator receptive footprint {need}")
        if audio.data.ndim == 1:
            x = ad.reshape(audio, (1, 1, data_len))
        elif audio.data.ndim == 2:
            x = ad.reshape(audio, (audio.data.shape[0], 1, data_len))
        else:
            raise ValueError(f"audio must be [L] or [B, L], got {audio.data.shape}")

        results = []
        if self.config.kind in (MSD_KIND, COMBINED_KIND):
            scaled = x
            for s in range(self.config.msd_scales):
                if s > 0:
                    scaled = ad.avg_pool1d(scaled, kernel=4, stride=2, padding=1)
                results.append(self._run_stack(scaled, f"s{s}", _MSD_LAYERS, _MSD_FINAL))
        if self.config.kind in (MPD_KIND, COMBINED_KIND):
            for period in self.config.periods:
                folded = ad.periodize(x, period)                       # [B, 1, T', p]
                folded = ad.moveaxis(folded, 3, 1)                     # [B, p, 1, T']
                B, p_, _, Tp = folded.data.shape
                folded = ad.reshape(folded, (B * p_, 1, Tp))
                results.append(self._run_stack(folded, f"p{period}", _MPD_LAYERS, _MPD_FINAL))
        return results

    def _run_stack(self, x: Tensor, prefix: str, layers, final) -> tuple[Tensor, list[Tensor]]:
        feats = []
        for i, (_, k, s, g) in enumerate(layers):
            x = ad.conv1d(x, self.params[f"{prefix}.l{i}.w"], self.params[f"{prefix}.l{i}.b"],
                          stride=s, padding=k // 2, groups=g)
            x = ad.leaky_relu(x, LRELU_SLOPE)
            feats.append(x)
        i = len(layers)
        _, k, s, g = final
        logits = ad.conv1d(x, self.params[f"{prefix}.l{i}.w"], self.params[f"{prefix}.l{i}.b"],
                           stride=s, padding=k // 2, groups=g)
        return logits, feats


def _stack_shapes(prefix: str, layers, final) -> dict[str, tuple]:
    shapes = {}
    c_in = 1
    for i, (c_out, k, _, g) in enumerate(layers + (final,)):
        shapes[f"{prefix}.l{i}.w"] = (c_out, c_in // g, k)
        shapes[f"{prefix}.l{i}.b"] = (c_out,)
        c_in = c_out
    return shapes


def build_discriminator(config: DiscriminatorConfig, seed: int, dtype=np.float32,
                        init_scheme: str = "normal002") -> DiscriminatorHandle:
    rng = CounterRng(seed).stream("init.disc")
    shapes: dict[str, tuple] = {}
    if config.kind in (MSD_KIND, COMBINED_KIND):
        for s in range(config.msd_scales):
            shapes.update(_stack_shapes(f"s{s}", _MSD_LAYERS, _MSD_FINAL))
    if config.kind in (MPD_KIND, COMBINED_KIND):
        for p in config.periods:
            shapes.update(_stack_shapes(f"p{p}", _MPD_LAYERS, _MPD_FINAL))
    return DiscriminatorHandle(config, _init_params(shapes, rng, dtype, init_scheme))


@contextmanager
def frozen(handle):
    """Temporarily exclude a handle's parameters from gradient tracking."""
    flags = {k: p.requires_grad for k, p in handle.params.items()}
    try:
        handle.set_trainable(False)
        yield handle
    finally:
        for k, p in handle.params.items():
            p.set_requires_grad(flags[k])
