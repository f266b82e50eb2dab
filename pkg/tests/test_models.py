import numpy as np
import pytest

from vocadapt import autodiff as ad
from vocadapt.autodiff import Tensor
from vocadapt.models import (DiscriminatorConfig, GeneratorConfig, build_discriminator,
                             build_generator, discriminator_config_for, frozen,
                             generator_config_for, hifigan_config, melgan_config)
from vocadapt.rng import CounterRng

TOY_MELGAN = melgan_config()
TOY_HIFIGAN = hifigan_config()


def rand_mel(seed, channels, frames, batch=None):
    shape = (channels, frames) if batch is None else (batch, channels, frames)
    return Tensor(CounterRng(seed).normal(shape).astype(np.float32) - 5.0)


# -- config validation -----------------------------------------------------------


def test_stride_product_must_be_256():
    with pytest.raises(ValueError):
        GeneratorConfig(upsample_strides=(8, 8, 2))
    with pytest.raises(ValueError):
        GeneratorConfig(upsample_strides=(8, 8, 2, 3))


def test_channel_schedule_floors_at_min():
    cfg = melgan_config()
    sched = cfg.channel_schedule()
    assert sched == [16, 8, 4, 4]
    assert all(c >= 4 for c in sched)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(kind="wavenet_like")
    with pytest.raises(ValueError):
        generator_config_for("other")


# -- generator forward ------------------------------------------------------------


def test_parameter_count_pinned_and_seed_stable():
    gen = build_generator(TOY_MELGAN, seed=123)
    again = build_generator(TOY_MELGAN, seed=123)
    # counted once from the architecture (strides 8/8/2/2, base 32, mel 80,
    # io kernel 7, 3 dilated blocks per stage with kernel 3 + 1x1), then pinned:
    # 17952 + 8208+3168 + 2056+816 + 132+216 + 68+216 + 29 = 32861
    assert gen.num_parameters() == 32861
    assert gen.num_parameters() == again.num_parameters()
    for k in gen.params:
        assert np.array_equal(gen.params[k].data, again.params[k].data)
    other = build_generator(TOY_MELGAN, seed=124)
    assert any(not np.array_equal(gen.params[k].data, other.params[k].data) for k in gen.params)


def test_length_law_both_kinds():
    for cfg in (TOY_MELGAN, TOY_HIFIGAN):
        gen = build_generator(cfg, seed=0)
        for frames in (1, 13, 64):
            wave = gen.forward(rand_mel(1, cfg.mel_channels, frames))
            assert wave.data.shape == (256 * frames,)


def test_forward_on_seven_frames_gives_1792_samples():
    gen = build_generator(TOY_MELGAN, seed=0)
    assert gen.forward(rand_mel(2, 80, 7)).data.shape == (1792,)


def test_output_bounded_by_tanh():
    gen = build_generator(TOY_HIFIGAN, seed=5, init_scheme="fan_in")
    wave = gen.forward(rand_mel(3, 80, 4))
    assert np.all(np.abs(wave.data) < 1.0)


def test_zeroed_output_conv_gives_constant_tanh_bias():
    gen = build_generator(TOY_MELGAN, seed=0)
    gen.params["out.w"].data[:] = 0.0
    gen.params["out.b"].data[:] = 0.37
    wave = gen.forward(rand_mel(4, 80, 3))
    assert np.allclose(wave.data, np.tanh(0.37), atol=1e-6)


def test_forward_deterministic():
    gen = build_generator(TOY_MELGAN, seed=0)
    mel = rand_mel(5, 80, 6)
    assert np.array_equal(gen.forward(mel).data, gen.forward(mel).data)


def test_channel_mismatch_rejected():
    gen = build_generator(TOY_MELGAN, seed=0)
    with pytest.raises(ValueError, match="channels"):
        gen.forward(rand_mel(6, 64, 4))


def test_batched_forward_matches_single():
    gen = build_generator(TOY_MELGAN, seed=0)
    batch = rand_mel(7, 80, 5, batch=3)
    waves = gen.forward(batch)
    assert waves.data.shape == (3, 1280)
    single = gen.forward(Tensor(batch.data[1]))
    assert np.allclose(waves.data[1], single.data, atol=1e-6)


# -- taps ---------------------------------------------------------------------------


def test_tap_count_and_lengths():
    for cfg in (TOY_MELGAN, TOY_HIFIGAN):
        gen = build_generator(cfg, seed=0)
        frames = 3
        wave, taps = gen.forward_with_taps(rand_mel(8, cfg.mel_channels, frames))
        assert len(taps) == len(cfg.upsample_strides)
        expected_len = frames
        for tap, stride in zip(taps, cfg.upsample_strides):
            expected_len *= stride
            assert tap.data.shape[-1] == expected_len
        # equivalent closed form: 256*T / prod(strides after this one)
        total = 256 * frames
        for l, tap in enumerate(taps):
            rest = int(np.prod(cfg.upsample_strides[l + 1:]))
            assert tap.data.shape[-1] == total // rest


def test_taps_same_pass_as_waveform():
    gen = build_generator(TOY_MELGAN, seed=0)
    mel = rand_mel(9, 80, 4)
    wave1, taps = gen.forward_with_taps(mel)
    wave2 = gen.forward(mel)
    assert np.array_equal(wave1.data, wave2.data)


def test_taps_are_ancestors_of_waveform():
    gen = build_generator(TOY_MELGAN, seed=0)
    mel = rand_mel(10, 80, 2)
    wave, taps = gen.forward_with_taps(mel)
    seen = set()
    stack = [wave]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node._parents)
    for tap in taps:
        assert id(tap) in seen


def test_gradient_reaches_every_parameter():
    for cfg in (TOY_MELGAN, TOY_HIFIGAN):
        gen = build_generator(cfg, seed=3, init_scheme="fan_in")
        wave = gen.forward(rand_mel(11, cfg.mel_channels, 2))
        ad.mean(ad.mul(wave, wave)).backward()
        for name, p in gen.params.items():
            assert p.grad is not None, f"no grad for {name}"
            assert np.any(p.grad != 0.0), f"all-zero grad for {name}"
            p.grad = None


# -- discriminators --------------------------------------------------------------------


def test_msd_has_three_entries():
    disc = build_discriminator(DiscriminatorConfig(kind="msd"), seed=0)
    results = disc.forward(Tensor(CounterRng(1).normal((8192,)).astype(np.float32) * 0.1))
    assert len(results) == 3
    for logits, feats in results:
        assert len(feats) == 4


def test_mpd_entry_per_period():
    disc = build_discriminator(DiscriminatorConfig(kind="mpd"), seed=0)
    results = disc.forward(Tensor(CounterRng(2).normal((8192,)).astype(np.float32) * 0.1))
    assert len(results) == 5


def test_combined_is_msd_plus_mpd():
    disc = build_discriminator(DiscriminatorConfig(kind="combined"), seed=0)
    results = disc.forward(Tensor(CounterRng(3).normal((8192,)).astype(np.float32) * 0.1))
    assert len(results) == 8


def test_msd_scale_law_matches_avg_pool_chain():
    disc = build_discriminator(DiscriminatorConfig(kind="msd"), seed=0)
    lengths = []
    orig_pool = ad.avg_pool1d

    def spy(x, kernel=4, stride=2, padding=1):
        out = orig_pool(x, kernel, stride, padding)
        lengths.append((x.data.shape[-1], out.data.shape[-1]))
        return out

    ad_avg = ad.avg_pool1d
    try:
        ad.avg_pool1d = spy
        import vocadapt.models as models
        models.ad.avg_pool1d = spy
        disc.forward(Tensor(np.zeros(8192, dtype=np.float32)))
    finally:
        ad.avg_pool1d = ad_avg
        models.ad.avg_pool1d = ad_avg
    assert lengths == [(8192, 4096), (4096, 2048)]
    for L_in, L_out in lengths:
        assert L_out == (L_in + 2 - 4) // 2 + 1


def test_zero_audio_zeroed_final_layer_logits_equal_bias():
    disc = build_discriminator(DiscriminatorConfig(kind="msd"), seed=0)
    for s in range(3):
        disc.params[f"s{s}.l4.w"].data[:] = 0.0
        disc.params[f"s{s}.l4.b"].data[:] = 0.25
    results = disc.forward(Tensor(np.zeros(8192, dtype=np.float32)))
    for logits, _ in results:
        assert np.allclose(logits.data, 0.25, atol=1e-7)


def test_audio_too_short_rejected():
    disc = build_discriminator(DiscriminatorConfig(kind="msd"), seed=0)
    n = disc.min_input_length()
    with pytest.raises(ValueError, match="footprint"):
        disc.forward(Tensor(np.zeros(n - 1, dtype=np.float32)))


def test_min_input_length_is_tight():
    disc = build_discriminator(DiscriminatorConfig(kind="combined", periods=(2, 3)), seed=0)
    n = disc.min_input_length()
    disc.forward(Tensor(np.zeros(n, dtype=np.float32)))  # must not raise
    with pytest.raises(ValueError):
        disc.forward(Tensor(np.zeros(n - 1, dtype=np.float32)))


def test_frozen_context_blocks_and_restores():
    disc = build_discriminator(DiscriminatorConfig(kind="msd"), seed=0)
    audio = Tensor(CounterRng(4).normal((8192,)).astype(np.float32) * 0.1, requires_grad=True)
    with frozen(disc):
        results = disc.forward(audio)
        total = None
        for logits, _ in results:
            term = ad.mean(logits)
            total = term if total is None else ad.add(total, term)
        total.backward()
    assert audio.grad is not None
    assert all(p.grad is None for p in disc.params.values())
    assert all(p.requires_grad for p in disc.params.values())


def test_discriminator_config_for_kind():
    assert discriminator_config_for("melgan_like").kind == "msd"
    assert discriminator_config_for("hifigan_like").kind == "combined"
