"""Training loops for both families, with deterministic seeding and resume.

Every consumer of randomness draws from a stream named after its purpose and
the global step, so runs are bit-reproducible, ablations that skip a branch
do not perturb the other branches, and resuming from a checkpoint replays
the exact continuation of the uninterrupted run.

The GAN loop alternates num_critic critic updates per generator iteration
(with a much larger ratio for the first few iterations while the critic
warms up), and holds the analogical weight at zero for the first
`analogical_warmup_epochs` data passes: until the generator produces
passable samples the relation classifier has nothing to learn from, so R
stays frozen.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import CheckpointData, restore_optimizer, save_checkpoint
from .data import batch_at, batches_per_epoch
from .latent import sample_analogical_batch, sample_prior
from .models import all_parameters_finite, build_bundle, latent_input, param_digest
from .objectives import combined_step_loss, critic_loss
from .seeding import seed_torch, stream

__all__ = [
    "TrainConfig",
    "RunHistory",
    "TrainingDiverged",
    "train_anavae",
    "train_anagan",
    "train",
]

LOSS_ABORT_MAGNITUDE = 1e6
LOSS_ABORT_PATIENCE = 10


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    family: str
    dataset: str = "synthetic"
    profile: str = ""                      # "" -> named after the dataset
    lambda_: float = 1.0
    batch_size: int = 32
    lr: float = 0.0                        # 0 -> family default
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    num_critic: int = 3
    critic_warmup_iters: int = 25
    critic_warmup_num_critic: int = 100
    analogical_warmup_epochs: int = -1     # -1 -> family default (100 gan, 0 vae)
    gp_weight: float = 0.25
    epochs: int = 30
    seed: int = 0
    checkpoint_every: int = 0              # epochs; 0 -> final checkpoint only
    digest_every: int = 1                  # record parameter digests every n-th update; 0 off
    n_train: int = 2560                    # synthetic dataset sizes
    n_eval: int = 6400

    def __post_init__(self):
        if self.family not in ("anavae", "anagan"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.profile:
            self.profile = self.dataset if self.dataset != "external64" else "color64"
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be >= 0")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.num_critic < 1:
            raise ValueError("rates and counts must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.analogical_warmup_epochs < 0:
            self.analogical_warmup_epochs = 100 if self.family == "anagan" else 0
        if self.family == "anagan" and self.analogical_warmup_epochs > self.epochs \
                and self.lambda_ > 0:
            raise ValueError("analogical_warmup_epochs exceeds the epoch budget; "
                             "the analogical term would never activate")

    @property
    def effective_lr(self):
        if self.lr > 0:
            return self.lr
        return 2e-5 if self.family == "anagan" else 1e-4

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def content_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunHistory:
    seed: int
    config_hash: str
    records: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def append(self, record):
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("history steps must be strictly increasing")
        self.records.append(record)

    def to_jsonl(self):
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records) + "\n"

    def losses(self, phase=None):
        return [r["losses"]["total"] for r in self.records
                if phase is None or r["phase"] == phase]


def _digests(bundle):
    return {name: param_digest(net) for name, net in bundle.nets.items()}


class _DivergenceWatch:
    """Abort on a non-finite loss, or on 10 consecutive huge ones."""

    def __init__(self):
        self.huge_streak = 0

    def check(self, total, step):
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss {total} at step {step}")
        if abs(total) > LOSS_ABORT_MAGNITUDE:
            self.huge_streak += 1
            if self.huge_streak >= LOSS_ABORT_PATIENCE:
                raise TrainingDiverged(
                    f"|loss| > {LOSS_ABORT_MAGNITUDE:g} for {self.huge_streak} "
                    f"consecutive steps (step {step}, loss {total:g})")
        else:
            self.huge_streak = 0


def _post_step_checks(bundle, watch, total, step):
    watch.check(total, step)
    if not all_parameters_finite(bundle):
        raise TrainingDiverged(f"non-finite parameter after step {step}")


def _adam(params, config):
    return torch.optim.Adam(params, lr=config.effective_lr,
                            betas=(config.adam_beta1, config.adam_beta2))


def _resume_state(config, resume: CheckpointData):
    if resume.config.get("seed") != config.seed:
        raise TrainingDiverged("resume seed differs from the checkpoint's")
    return resume.bundle, dict(resume.position), list(resume.history_records)


def _maybe_checkpoint(checkpoint_dir, config, bundle, optimizers, position, history,
                      epoch, final=False):
    if checkpoint_dir is None:
        return None
    due = final or (config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0)
    if not due:
        return None
    path = f"{checkpoint_dir}/checkpoint_epoch{epoch:04d}.zip"
    save_checkpoint(path, bundle, optimizers, config.to_dict(), position, history.records)
    return path


# ---------------------------------------------------------------------------
# VAE family
# ---------------------------------------------------------------------------


def train_anavae(config: TrainConfig, dataset, checkpoint_dir=None, resume=None,
                 epoch_callback=None):
    """Joint optimization of G, Q, R on recon+KL plus the analogical term.

    `epoch_callback(epoch, bundle)`, when given, runs at each epoch boundary
    (monitoring hooks; it must not mutate the bundle).
    """
    if config.family != "anavae":
        raise ValueError("config.family must be 'anavae'")
    seed = config.seed
    bpe = batches_per_epoch(dataset, "train", config.batch_size)
    history = RunHistory(seed=seed, config_hash=config.content_hash())
    if resume is not None:
        bundle, position, records = _resume_state(config, resume)
        history.records = records
        if position["batches_consumed"] % bpe != 0:
            raise TrainingDiverged("vae checkpoints are epoch-aligned; got a "
                                   f"mid-epoch position {position}")
        start_epoch = position["batches_consumed"] // bpe
        global_step = position["global_step"]
    else:
        bundle = build_bundle("anavae", config.profile, seed=seed)
        start_epoch, global_step = 0, 0
    optimizer = _adam(bundle.parameters(), config)
    if resume is not None:
        restore_optimizer(optimizer, resume.optimizer_states["joint"])

    watch = _DivergenceWatch()
    t0 = time.time()
    for epoch in range(start_epoch, config.epochs):
        for within in range(bpe):
            batch = batch_at(dataset, "train", config.batch_size, seed, epoch * bpe + within)
            global_step += 1
            seed_torch(seed, f"torch.{global_step}")
            pairs = None
            if config.lambda_ > 0:
                pairs = sample_analogical_batch(bundle.latent_spec, config.batch_size,
                                                stream(seed, f"pairs.{global_step}"))
            try:
                report = combined_step_loss(bundle, batch, pairs, config.lambda_,
                                            rng=stream(seed, f"eps.{global_step}"),
                                            train=True)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"step {global_step}: {exc}") from exc
            optimizer.zero_grad()
            report.total_tensor.backward()
            optimizer.step()
            _post_step_checks(bundle, watch, report.total, global_step)
            record = {"step": global_step, "epoch": epoch, "phase": "vae",
                      "losses": {"total": report.total, **report.components}}
            if config.digest_every and global_step % config.digest_every == 0:
                record["digests"] = _digests(bundle)
            history.append(record)
        position = {"global_step": global_step, "batches_consumed": (epoch + 1) * bpe}
        _maybe_checkpoint(checkpoint_dir, config, bundle, {"joint": optimizer},
                          position, history, epoch + 1, final=epoch + 1 == config.epochs)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, bundle)
    history.wall_seconds = time.time() - t0
    return bundle, history


# ---------------------------------------------------------------------------
# GAN family
# ---------------------------------------------------------------------------


def train_anagan(config: TrainConfig, dataset, checkpoint_dir=None, resume=None,
                 epoch_callback=None):
    """Wasserstein critic/generator alternation with the analogical term.

    One generator iteration = num_critic critic updates (100 while
    gen_iter <= critic_warmup_iters, then the configured 3) followed by one
    update of G and R on the adversarial + analogical loss. Real batches are
    consumed only by critic updates; iterations may span epoch boundaries.
    """
    if config.family != "anagan":
        raise ValueError("config.family must be 'anagan'")
    seed = config.seed
    bpe = batches_per_epoch(dataset, "train", config.batch_size)
    target_batches = config.epochs * bpe
    history = RunHistory(seed=seed, config_hash=config.content_hash())
    if resume is not None:
        bundle, position, records = _resume_state(config, resume)
        history.records = records
        global_step = position["global_step"]
        gen_iter = position["gen_iter"]
        batches_consumed = position["batches_consumed"]
    else:
        bundle = build_bundle("anagan", config.profile, seed=seed)
        global_step, gen_iter, batches_consumed = 0, 0, 0
    opt_critic = _adam(bundle.critic.parameters(), config)
    opt_gen = _adam(list(bundle.generator.parameters())
                    + list(bundle.relation.parameters()), config)
    if resume is not None:
        restore_optimizer(opt_critic, resume.optimizer_states["critic"])
        restore_optimizer(opt_gen, resume.optimizer_states["generator"])

    spec = bundle.latent_spec
    watch = _DivergenceWatch()
    t0 = time.time()
    last_epoch_ckpt = batches_consumed // bpe
    while batches_consumed < target_batches:
        gen_iter += 1
        n_critic = (config.critic_warmup_num_critic
                    if gen_iter <= config.critic_warmup_iters else config.num_critic)
        for _ in range(n_critic):
            epoch = batches_consumed // bpe
            batch = batch_at(dataset, "train", config.batch_size, seed, batches_consumed)
            batches_consumed += 1
            global_step += 1
            seed_torch(seed, f"torch.{global_step}")
            codes, noises = sample_prior(spec, config.batch_size,
                                         stream(seed, f"latent.{global_step}"))
            bundle.generator.train(True)
            with torch.no_grad():
                fake = bundle.generator(latent_input(bundle, codes, noises))
            try:
                report = critic_loss(bundle, batch, fake, gp_weight=config.gp_weight,
                                     rng=stream(seed, f"interp.{global_step}"), train=True)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"step {global_step}: {exc}") from exc
            opt_critic.zero_grad()
            report.total_tensor.backward()
            opt_critic.step()
            _post_step_checks(bundle, watch, report.total, global_step)
            history.append({"step": global_step, "epoch": epoch, "phase": "critic",
                            "gen_iter": gen_iter,
                            "losses": {"total": report.total, **report.components}})

        # generator phase: adversarial + (post-warmup) analogical, no real batch
        epoch = batches_consumed // bpe
        global_step += 1
        seed_torch(seed, f"torch.{global_step}")
        lam = config.lambda_ if epoch >= config.analogical_warmup_epochs else 0.0
        codes, noises = sample_prior(spec, config.batch_size,
                                     stream(seed, f"latent.{global_step}"))
        bundle.generator.train(True)
        fake = bundle.generator(latent_input(bundle, codes, noises))
        pairs = None
        if lam > 0:
            pairs = sample_analogical_batch(spec, config.batch_size,
                                            stream(seed, f"pairs.{global_step}"))
        try:
            report = combined_step_loss(bundle, fake, pairs, lam, train=True)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {global_step}: {exc}") from exc
        opt_gen.zero_grad()
        report.total_tensor.backward()
        opt_gen.step()
        _post_step_checks(bundle, watch, report.total, global_step)
        record = {"step": global_step, "epoch": epoch, "phase": "generator",
                  "gen_iter": gen_iter, "lambda": lam,
                  "losses": {"total": report.total, **report.components}}
        if config.digest_every and gen_iter % config.digest_every == 0:
            record["digests"] = _digests(bundle)
        history.append(record)

        position = {"global_step": global_step, "gen_iter": gen_iter,
                    "batches_consumed": batches_consumed}
        finished = batches_consumed >= target_batches
        epoch_now = batches_consumed // bpe
        if finished or epoch_now > last_epoch_ckpt:
            _maybe_checkpoint(checkpoint_dir, config, bundle,
                              {"critic": opt_critic, "generator": opt_gen},
                              position, history, epoch_now, final=finished)
            last_epoch_ckpt = epoch_now
            if epoch_callback is not None:
                epoch_callback(epoch_now, bundle)
    history.wall_seconds = time.time() - t0
    return bundle, history


def train(config: TrainConfig, dataset, checkpoint_dir=None, resume=None,
          epoch_callback=None):
    """Dispatch on the config's family."""
    fn = train_anavae if config.family == "anavae" else train_anagan
    return fn(config, dataset, checkpoint_dir=checkpoint_dir, resume=resume,
              epoch_callback=epoch_callback)
