"""Source pretraining and three-way fine-tuning (none / traditional / cdc).

One optimization step alternates a discriminator update (real vs. detached
generated audio, the family's GAN loss) and a generator update (adversarial
+ feature matching, + mel reconstruction for the hifigan_like family, + the
weighted consistency term in cdc mode).

Reproducibility contract: all randomness flows through named counter-RNG
streams ("data" for crop batches, "cdc" for consistency batches, "init.*"
for weights), so a cdc-mode run and a traditional-mode run with the same
seed see identical data batches step for step.  Step records are exactly
reproducible except for the wall-clock field.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointBundle, OptimBlob, config_hash, load_checkpoint, save_checkpoint
from .data import ClipPool, mel_crops_from_pool, sample_crop_batch
from .dsp import DspConfig
from .losses import (CdcConfig, LossWeights, adversarial_losses_for, cdc_loss,
                     combined_gen_objective, default_weights, feature_matching_loss,
                     mel_recon_loss)
from .models import (DiscriminatorHandle, GeneratorHandle, HIFIGAN_KIND, build_discriminator,
                     build_generator, discriminator_config_for, frozen, generator_config_for)
from .optim import AdamState, adam_step
from .rng import CounterRng

FINETUNE_MODES = ("none", "traditional", "cdc")


class TrainingNanError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"non-finite value aborted training at step {step}: {cause}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "melgan_like"
    steps: int = 20000
    batch_size: int = 2
    crop_frames: int = 32
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    weights: LossWeights | None = None       # None = family defaults
    cdc: CdcConfig = CdcConfig()
    cdc_pool: str = "source"                 # source | target | mixed
    disc_from_checkpoint: bool = True
    seed: int = 0
    checkpoint_interval: int = 5000
    log_interval: int = 50
    dsp: DspConfig = DspConfig()

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.crop_frames < 1:
            raise ValueError("steps, batch_size and crop_frames must be >= 1")
        if self.cdc_pool not in ("source", "target", "mixed"):
            raise ValueError(f"unknown cdc_pool {self.cdc_pool!r}")

    def resolved_weights(self) -> LossWeights:
        return self.weights if self.weights is not None else default_weights(self.kind)

    def fingerprint(self) -> str:
        gen_cfg = generator_config_for(self.kind)
        return config_hash({"kind": self.kind, "generator": asdict(gen_cfg), "dsp": asdict(self.dsp)})


@dataclass
class StepRecord:
    step: int
    losses: dict[str, float]
    wall_ms: float
    nan: bool = False

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "losses": self.losses,
                           "wall_ms": round(self.wall_ms, 3), "nan": self.nan})

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        rec = json.loads(line)
        return cls(rec["step"], rec["losses"], rec["wall_ms"], rec["nan"])


def write_step_log(records: list[StepRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_step_log(path) -> list[StepRecord]:
    with open(path) as f:
        return [StepRecord.from_json(line) for line in f if line.strip()]


def sample_cdc_mels(source_pool: ClipPool | None, target_pool: ClipPool | None,
                    cfg: CdcConfig, crop_frames: int, rng: CounterRng,
                    pool_choice: str = "source"):
    """N+1 mel crops for the consistency batch, drawn with replacement."""
    if pool_choice == "source":
        pools = [source_pool] * cfg.batch
    elif pool_choice == "target":
        pools = [target_pool] * cfg.batch
    else:
        pools = [(source_pool, target_pool)[rng.randint(2)] for _ in range(cfg.batch)]
    if any(p is None for p in pools):
        raise ValueError(f"cdc pool {pool_choice!r} needs a manifest that was not provided")
    mels = []
    for p in pools:
        mels.extend(mel_crops_from_pool(p, 1, crop_frames, rng))
    return mels


class TrainLoop:
    """Alternating GAN updates over one data pool; drives pretrain and finetune."""

    def __init__(self, config: TrainConfig, gen: GeneratorHandle, disc: DiscriminatorHandle,
                 pool: ClipPool, mode: str = "traditional",
                 source_gen: GeneratorHandle | None = None,
                 cdc_source_pool: ClipPool | None = None,
                 cdc_target_pool: ClipPool | None = None,
                 start_step: int = 0):
        if mode == "cdc" and source_gen is None:
            raise ValueError("cdc mode requires a frozen source generator")
        self.config = config
        self.gen = gen
        self.disc = disc
        self.pool = pool
        self.mode = mode
        self.source_gen = source_gen
        self.cdc_source_pool = cdc_source_pool
        self.cdc_target_pool = cdc_target_pool
        self.weights = config.resolved_weights()
        self.disc_loss_fn, self.gen_loss_fn = adversarial_losses_for(config.kind)
        self.gen_opt = AdamState(gen.params, config.lr_gen, config.beta1, config.beta2)
        self.disc_opt = AdamState(disc.params, config.lr_disc, config.beta1, config.beta2)
        root = CounterRng(config.seed)
        self.data_rng = root.stream("data")
        self.cdc_rng = root.stream("cdc")
        self.step_index = start_step
        self.records: list[StepRecord] = []

    def loss_names(self) -> list[str]:
        names = ["adv_d", "adv_g", "fm"]
        if self.config.kind == HIFIGAN_KIND:
            names.append("mel")
        if self.mode == "cdc":
            names.append("cdc")
        return names

    def step(self) -> StepRecord:
        t0 = time.perf_counter()
        cfg = self.config
        try:
            batch = sample_crop_batch(self.pool, cfg.batch_size, cfg.crop_frames, self.data_rng)
            mel = Tensor(batch.mels.astype(np.float32))
            real = Tensor(batch.waveforms.astype(np.float32))

            fake = self.gen.forward(mel)

            # discriminator update on real vs. detached fake
            fake_const = fake.detach()
            real_res = self.disc.forward(real)
            fake_res = self.disc.forward(fake_const)
            d_loss = self.disc_loss_fn([r for r, _ in real_res], [f for f, _ in fake_res])
            d_loss.backward()
            adam_step(self.disc.params, self.disc_opt)

            # generator update against the refreshed discriminator
            with frozen(self.disc):
                fake_res_g = self.disc.forward(fake)
                with ad.no_grad():
                    real_res_g = self.disc.forward(real)
            adv_g = self.gen_loss_fn([l for l, _ in fake_res_g])
            fm = feature_matching_loss([f for _, f in real_res_g], [f for _, f in fake_res_g])
            parts = {"adv": adv_g, "fm": fm}
            if cfg.kind == HIFIGAN_KIND:
                parts["mel"] = mel_recon_loss(fake, batch.mels.astype(np.float32), cfg.dsp)
            if self.mode == "cdc":
                cdc_mels = sample_cdc_mels(self.cdc_source_pool, self.cdc_target_pool,
                                           cfg.cdc, cfg.crop_frames, self.cdc_rng, cfg.cdc_pool)
                parts["cdc"] = cdc_loss(self.source_gen, self.gen, cdc_mels, cfg.cdc)
            g_loss = combined_gen_objective(cfg.kind, parts, self.weights)
            g_loss.backward()
            adam_step(self.gen.params, self.gen_opt)
        except FloatingPointError as e:
            self.step_index += 1
            rec = StepRecord(self.step_index, {}, (time.perf_counter() - t0) * 1e3, nan=True)
            self.records.append(rec)
            raise TrainingNanError(self.step_index, e) from e

        self.step_index += 1
        losses = {"adv_d": d_loss.item(), "adv_g": adv_g.item(), "fm": fm.item()}
        if "mel" in parts:
            losses["mel"] = parts["mel"].item()
        if "cdc" in parts:
            losses["cdc"] = parts["cdc"].item()
        rec = StepRecord(self.step_index, losses, (time.perf_counter() - t0) * 1e3)
        self.records.append(rec)
        return rec

    def run(self, steps: int, run_dir: Path | None = None,
            progress: bool = False) -> list[StepRecord]:
        cfg = self.config
        for i in range(steps):
            rec = self.step()
            if progress and (rec.step % max(1, cfg.log_interval) == 0 or i == steps - 1):
                parts = " ".join(f"{k}={v:.4f}" for k, v in rec.losses.items())
                print(f"step {rec.step}: {parts}", flush=True)
            if run_dir is not None and cfg.checkpoint_interval > 0 and rec.step % cfg.checkpoint_interval == 0:
                save_checkpoint(self.to_bundle(), Path(run_dir) / f"checkpoint_{rec.step:07d}.avck")
        return self.records

    def logged_records(self) -> list[StepRecord]:
        """Every log_interval-th record plus the final one."""
        k = max(1, self.config.log_interval)
        out = [r for r in self.records if r.step % k == 0]
        if self.records and (not out or out[-1].step != self.records[-1].step):
            out.append(self.records[-1])
        return out

    def to_bundle(self) -> CheckpointBundle:
        params = {f"gen.{k}": v.data.astype("<f4") for k, v in self.gen.params.items()}
        params.update({f"disc.{k}": v.data.astype("<f4") for k, v in self.disc.params.items()})
        return CheckpointBundle(
            kind=self.config.kind,
            config_hash=self.config.fingerprint(),
            step=self.step_index,
            params=params,
            optim={"gen": OptimBlob.from_state(self.gen_opt),
                   "disc": OptimBlob.from_state(self.disc_opt)},
        )


def _gen_from_bundle(bundle: CheckpointBundle, config: TrainConfig) -> GeneratorHandle:
    gen_cfg = generator_config_for(config.kind)
    gen = build_generator(gen_cfg, seed=config.seed)
    weights = bundle.tensors("gen.")
    if set(weights) != set(gen.params):
        raise ValueError("checkpoint generator parameters do not match the configured architecture")
    for k in gen.params:
        if gen.params[k].data.shape != weights[k].data.shape:
            raise ValueError(f"checkpoint shape mismatch for gen.{k}")
        gen.params[k] = weights[k]
    return gen


def _disc_from_bundle(bundle: CheckpointBundle, config: TrainConfig) -> DiscriminatorHandle:
    disc = build_discriminator(discriminator_config_for(config.kind), seed=config.seed)
    weights = bundle.tensors("disc.")
    if set(weights) != set(disc.params):
        raise ValueError("checkpoint discriminator parameters do not match the configured architecture")
    for k in disc.params:
        disc.params[k] = weights[k]
    return disc


def pretrain(source_manifest, config: TrainConfig, run_dir=None,
             progress: bool = False) -> tuple[CheckpointBundle, list[StepRecord]]:
    """Train generator + discriminator from scratch on the source corpus."""
    pool = ClipPool(source_manifest, "train", config.dsp)
    gen = build_generator(generator_config_for(config.kind), seed=config.seed)
    disc = build_discriminator(discriminator_config_for(config.kind), seed=config.seed)
    loop = TrainLoop(config, gen, disc, pool, mode="traditional")
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    loop.run(config.steps, run_dir=run_dir, progress=progress)
    bundle = loop.to_bundle()
    if run_dir is not None:
        save_checkpoint(bundle, Path(run_dir) / "pretrained.avck")
        write_step_log(loop.logged_records(), Path(run_dir) / "pretrain_steps.jsonl")
    return bundle, loop.records


def finetune(source_checkpoint, target_manifest, mode: str, config: TrainConfig,
             source_manifest=None, run_dir=None,
             progress: bool = False) -> tuple[CheckpointBundle, list[StepRecord]]:
    """Adapt a pretrained checkpoint to the target corpus.

    mode 'none'        - returns the checkpoint unchanged.
    mode 'traditional' - plain GAN fine-tuning on the target train split.
    mode 'cdc'         - GAN fine-tuning plus the weighted consistency term
                         against an immutable copy of the source generator.
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown fine-tune mode {mode!r}")
    bundle = source_checkpoint if isinstance(source_checkpoint, CheckpointBundle) \
        else load_checkpoint(source_checkpoint)
    if bundle.kind != config.kind:
        raise ValueError(f"checkpoint is for kind {bundle.kind!r}, config wants {config.kind!r}")
    if mode == "none":
        return bundle, []

    pool = ClipPool(target_manifest, "train", config.dsp)
    gen = _gen_from_bundle(bundle, config)
    if config.disc_from_checkpoint and any(k.startswith("disc.") for k in bundle.params):
        disc = _disc_from_bundle(bundle, config)
    else:
        disc = build_discriminator(discriminator_config_for(config.kind), seed=config.seed)

    source_gen = None
    cdc_source_pool = None
    cdc_target_pool = None
    if mode == "cdc":
        source_gen = _gen_from_bundle(bundle, config)
        source_gen.set_trainable(False)
        if config.cdc_pool in ("source", "mixed"):
            if source_manifest is None:
                raise ValueError("cdc mode with a source mel pool needs the source manifest")
            cdc_source_pool = ClipPool(source_manifest, "train", config.dsp)
        if config.cdc_pool in ("target", "mixed"):
            cdc_target_pool = pool

    loop = TrainLoop(config, gen, disc, pool, mode=mode, source_gen=source_gen,
                     cdc_source_pool=cdc_source_pool, cdc_target_pool=cdc_target_pool,
                     start_step=0)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    loop.run(config.steps, run_dir=run_dir, progress=progress)
    out = loop.to_bundle()
    if run_dir is not None:
        save_checkpoint(out, Path(run_dir) / f"finetuned_{mode}.avck")
        write_step_log(loop.logged_records(), Path(run_dir) / f"finetune_{mode}_steps.jsonl")
    return out, loop.records
