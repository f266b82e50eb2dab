"""Training objectives for the vocoder families.

Naming follows what each term does:

  * hinge_* / lsgan_*        - adversarial terms (margin form for the
    MelGAN-like family, least-squares for the HiFi-GAN-like family).
  * feature_matching_loss    - L1 between discriminator feature maps of real
    and generated audio.
  * mel_recon_loss           - L1 between log-mel of generated audio and the
    conditioning log-mel, differentiable through the spectral chain.
  * cdc_distributions / cdc_loss - cross-domain consistency: pairwise
    similarity distributions over generator activations, kept aligned
    between a frozen source generator and the adapting one via KL.

The adversarial margin term is implemented in minimization form
(max(0, 1 -/+ D)); the equivalent max-player formulation writes the same
margins with min(0, .), which would be degenerate if minimized directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import DspConfig, MelSpectrogram, log_mel_tensor
from .models import GeneratorHandle, HIFIGAN_KIND, MELGAN_KIND


@dataclass(frozen=True)
class LossWeights:
    """Combination coefficients for the generator objective."""

    lambda_cd: float = 1e3
    lambda_fm: float = 10.0
    lambda_mel: float = 45.0   # unused by the melgan_like objective

    def __post_init__(self):
        if self.lambda_cd < 0 or self.lambda_fm < 0 or self.lambda_mel < 0:
            raise ValueError("loss weights must be non-negative")


def default_weights(kind: str) -> LossWeights:
    if kind == MELGAN_KIND:
        return LossWeights(lambda_cd=1e3, lambda_fm=10.0, lambda_mel=0.0)
    if kind == HIFIGAN_KIND:
        return LossWeights(lambda_cd=1e3, lambda_fm=2.0, lambda_mel=45.0)
    raise ValueError(f"unknown generator kind {kind!r}")


@dataclass(frozen=True)
class CdcConfig:
    """Consistency-loss batch shape: N+1 items, compared at selected taps."""

    batch: int = 4                       # N+1
    layer_indices: tuple | None = None   # None = all generator taps
    pooling: str = "temporal_mean"       # or "flatten"
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("consistency batch needs at least 2 items (N+1 >= 2)")
        if self.pooling not in ("temporal_mean", "flatten"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


# -- adversarial terms ---------------------------------------------------------


def _require_logits(logits, name):
    if not logits:
        raise ValueError(f"{name}: empty logit list")


def hinge_disc_loss(real_logits: list[Tensor], fake_logits: list[Tensor]) -> Tensor:
    """sum_k mean(max(0, 1 - D_k(x))) + mean(max(0, 1 + D_k(G(m)))).

    Callers must detach the fake branch from the generator graph.
    """
    _require_logits(real_logits, "hinge_disc_loss")
    if len(real_logits) != len(fake_logits):
        raise ValueError("hinge_disc_loss: sub-discriminator count mismatch")
    total = None
    for r, f in zip(real_logits, fake_logits):
        term = ad.add(ad.mean(ad.relu(ad.sub(1.0, r))), ad.mean(ad.relu(ad.add(f, 1.0))))
        total = term if total is None else ad.add(total, term)
    return total


def hinge_gen_loss(fake_logits: list[Tensor]) -> Tensor:
    """sum_k mean(-D_k(G(m)))."""
    _require_logits(fake_logits, "hinge_gen_loss")
    total = None
    for f in fake_logits:
        term = ad.mean(ad.scalar_mul(f, -1.0))
        total = term if total is None else ad.add(total, term)
    return total


def lsgan_disc_loss(real_logits: list[Tensor], fake_logits: list[Tensor]) -> Tensor:
    """sum_k mean((D_k(x) - 1)^2) + mean(D_k(G(m))^2)."""
    _require_logits(real_logits, "lsgan_disc_loss")
    if len(real_logits) != len(fake_logits):
        raise ValueError("lsgan_disc_loss: sub-discriminator count mismatch")
    total = None
    for r, f in zip(real_logits, fake_logits):
        rt = ad.sub(r, 1.0)
        term = ad.add(ad.mean(ad.mul(rt, rt)), ad.mean(ad.mul(f, f)))
        total = term if total is None else ad.add(total, term)
    return total


def lsgan_gen_loss(fake_logits: list[Tensor]) -> Tensor:
    """sum_k mean((D_k(G(m)) - 1)^2)."""
    _require_logits(fake_logits, "lsgan_gen_loss")
    total = None
    for f in fake_logits:
        ft = ad.sub(f, 1.0)
        term = ad.mean(ad.mul(ft, ft))
        total = term if total is None else ad.add(total, term)
    return total


def adversarial_losses_for(kind: str):
    """(disc_loss_fn, gen_loss_fn) for a generator family."""
    if kind == MELGAN_KIND:
        return hinge_disc_loss, hinge_gen_loss
    if kind == HIFIGAN_KIND:
        return lsgan_disc_loss, lsgan_gen_loss
    raise ValueError(f"unknown generator kind {kind!r}")


# -- reconstruction-style terms ---------------------------------------------------


def feature_matching_loss(real_feats: list[list[Tensor]], fake_feats: list[list[Tensor]]) -> Tensor:
    """Mean over sub-discriminators of sum over layers of mean |real - fake|.

    Real-branch features must be detached constants.
    """
    if not real_feats or len(real_feats) != len(fake_feats):
        raise ValueError("feature_matching_loss: sub-discriminator nesting mismatch")
    total = None
    for rl, fl in zip(real_feats, fake_feats):
        if len(rl) != len(fl):
            raise ValueError("feature_matching_loss: layer count mismatch")
        for r, f in zip(rl, fl):
            term = ad.mean(ad.absolute(ad.sub(r, f)))
            total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(total, 1.0 / len(real_feats))


def _target_mel_array(target, dtype) -> np.ndarray:
    if isinstance(target, MelSpectrogram):
        return target.values.astype(dtype, copy=False)
    if isinstance(target, (list, tuple)):
        return np.stack([_target_mel_array(t, dtype) for t in target])
    return np.asarray(target, dtype=dtype)


def mel_recon_loss(generated: Tensor, target, config: DspConfig) -> Tensor:
    """Mean L1 between log-mel of the generated waveform and the target log-mel.

    generated: [L] or [B, L]; target: MelSpectrogram, array, or list of either.
    """
    tgt = _target_mel_array(target, generated.data.dtype)
    frames = tgt.shape[-1]
    if generated.data.shape[-1] != config.hop_length * frames:
        raise ValueError(f"generated length {generated.data.shape[-1]} != hop*T = {config.hop_length * frames}")
    if (generated.data.ndim == 2) != (tgt.ndim == 3):
        raise ValueError("generated batching does not match target batching")
    gen_mel = log_mel_tensor(generated, config)
    if gen_mel.data.shape != tgt.shape:
        raise ValueError(f"mel shape mismatch {gen_mel.data.shape} vs {tgt.shape}")
    return ad.mean(ad.absolute(ad.sub(gen_mel, Tensor(tgt))))


# -- cross-domain consistency ------------------------------------------------------


def _pool_activation(act: Tensor, pooling: str) -> Tensor:
    if act.data.ndim == 1:
        return act
    if pooling == "temporal_mean":
        pooled = ad.mean(act, axis=-1)
        return pooled if pooled.data.ndim == 1 else ad.reshape(pooled, (-1,))
    return ad.reshape(act, (-1,))


def cdc_distributions(acts_a: list[list[Tensor]], acts_b: list[list[Tensor]],
                      cfg: CdcConfig) -> tuple[list[list[Tensor]], list[list[Tensor]]]:
    """Per-layer, per-anchor similarity distributions for two generators.

    ``acts_a[i][l]`` is generator A's activation for batch item i at
    configured layer l (same for B).  For each layer and anchor i the
    activations are pooled to vectors, cosine similarities to every j != i
    are stacked, and softmax turns them into an N-way distribution.

    Returns (dists_a, dists_b), each indexed [layer][anchor].
    """
    n_items = len(acts_a)
    if n_items < 2:
        raise ValueError("cdc_distributions needs at least 2 batch items")
    if len(acts_b) != n_items:
        raise ValueError("cdc_distributions: batch size mismatch between generators")
    n_layers = len(acts_a[0])
    for acts in (acts_a, acts_b):
        for item in acts:
            if len(item) != n_layers:
                raise ValueError("cdc_distributions: layer count mismatch across items")

    out = []
    for acts in (acts_a, acts_b):
        layer_dists = []
        for l in range(n_layers):
            vecs = [_pool_activation(acts[i][l], cfg.pooling) for i in range(n_items)]
            dim = {v.data.shape for v in vecs}
            if len(dim) != 1:
                raise ValueError(f"cdc_distributions: incongruent pooled shapes {dim} at layer {l}")
            sims = {}
            for i in range(n_items):
                for j in range(i + 1, n_items):
                    sims[(i, j)] = ad.cosine_similarity(vecs[i], vecs[j], eps=cfg.eps)
            dists = []
            for i in range(n_items):
                row = [sims[(min(i, j), max(i, j))] for j in range(n_items) if j != i]
                dists.append(ad.softmax(ad.stack(row)))
            layer_dists.append(dists)
        out.append(layer_dists)
    return out[0], out[1]


def _select_taps(taps: list[Tensor], layer_indices) -> list[Tensor]:
    if layer_indices is None:
        return taps
    try:
        return [taps[i] for i in layer_indices]
    except IndexError:
        raise ValueError(f"layer index out of range for {len(taps)} generator taps") from None


def take_item(batched: Tensor, i: int) -> Tensor:
    """Row i of a batched activation [N, C, L] -> [C, L]."""
    out = ad.make_op(batched.data[i], (batched,), None, "take_item")
    if out._tracked:
        def _bwd(g):
            gx = np.zeros_like(batched.data)
            gx[i] = g
            ad.accumulate(batched, gx)
        out._backward = _bwd
    return out


def cdc_loss(source_gen: GeneratorHandle, adapted_gen: GeneratorHandle,
             mel_batch, cfg: CdcConfig) -> Tensor:
    """Sum over layers and anchors of KL(adapted distribution || source distribution).

    The source generator runs outside the graph, so gradients reach only the
    adapted generator's parameters.  Zero when the two generators coincide.
    """
    if source_gen.config != adapted_gen.config:
        raise ValueError("cdc_loss: generator architectures differ")
    mels = _target_mel_array(list(mel_batch), np.float64 if adapted_gen.params["in.w"].data.dtype == np.float64 else np.float32)
    if mels.ndim != 3:
        raise ValueError("cdc_loss: mel batch must stack to [N+1, n_mels, T]")
    if mels.shape[0] < 2:
        raise ValueError("cdc_loss: batch smaller than 2")

    _, adapted_taps = adapted_gen.forward_with_taps(Tensor(mels))
    with ad.no_grad():
        _, source_taps = source_gen.forward_with_taps(Tensor(mels))
    adapted_taps = _select_taps(adapted_taps, cfg.layer_indices)
    source_taps = _select_taps(source_taps, cfg.layer_indices)

    n_items = mels.shape[0]
    acts_adapted = [[take_item(t, i) for t in adapted_taps] for i in range(n_items)]
    acts_source = [[take_item(t, i) for t in source_taps] for i in range(n_items)]
    dists_adapted, dists_source = cdc_distributions(acts_adapted, acts_source, cfg)

    total = None
    for layer_a, layer_s in zip(dists_adapted, dists_source):
        for y_adapted, y_source in zip(layer_a, layer_s):
            term = ad.kl_divergence(y_adapted, y_source)
            total = term if total is None else ad.add(total, term)
    return total


# -- combination --------------------------------------------------------------------


def combined_gen_objective(kind: str, parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """adv + lambda_cd*cdc + lambda_fm*fm (+ lambda_mel*mel for hifigan_like).

    The cdc part may be omitted (source pretraining), which is the same as
    weighting it by zero.
    """
    required = ("adv", "fm") if kind == MELGAN_KIND else ("adv", "fm", "mel")
    if kind not in (MELGAN_KIND, HIFIGAN_KIND):
        raise ValueError(f"unknown generator kind {kind!r}")
    for name in required:
        if name not in parts:
            raise ValueError(f"combined objective for {kind} missing part {name!r}")
    total = parts["adv"]
    if "cdc" in parts:
        total = ad.add(total, ad.scalar_mul(parts["cdc"], weights.lambda_cd))
    total = ad.add(total, ad.scalar_mul(parts["fm"], weights.lambda_fm))
    if kind == HIFIGAN_KIND:
        total = ad.add(total, ad.scalar_mul(parts["mel"], weights.lambda_mel))
    return total
