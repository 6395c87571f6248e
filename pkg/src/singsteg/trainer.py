"""Losses and the progressive coarse-to-fine training loop.

Each stage pits the generator against the patch critic on that pyramid
level of the cover (Wasserstein loss with gradient penalty) while an MSE
reconstruction term pins the key-derived noise pyramid(s) to the secret
image(s). With no secrets the reconstruction term anchors a fixed random
noise set to the cover instead, which yields the reference model used by
the security audits.
"""

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import keynoise, netarch, pyramid
from .netarch import Critic, GrowingGenerator, StegoModel

MAX_SECRETS = 4
DIVERGENCE_LIMIT = 1.0e6


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite or exploded; training must fail loudly."""


@dataclass
class TrainConfig:
    recon_weight: float = 10.0        # weight of the reconstruction term
    gp_coeff: float = 0.1             # gradient-penalty coefficient
    lr: float = 5.0e-4
    lr_decay: float = 0.1
    decay_at_fraction: float = 0.8
    iters_per_stage: int = 2000
    stages: int = 6
    trainable_window: int = 3         # newest blocks that receive gradients
    width: int = 64
    coarsest_min_dim: int = 25
    critic_steps: int = 3             # critic updates per generator update
    adam_betas: tuple = (0.5, 0.999)
    seed: int = 0
    log_path: str | None = None
    log_every: int = 25
    checkpoint_every: int = 0         # iterations between checkpoints, 0 = off
    checkpoint_path: str | None = None

    def validate(self):
        if self.recon_weight <= 0:
            raise ValueError("recon_weight must be > 0")
        if self.gp_coeff <= 0:
            raise ValueError("gp_coeff must be > 0")
        if not 0.0 < self.decay_at_fraction < 1.0:
            raise ValueError("decay_at_fraction must be in (0, 1)")
        if self.iters_per_stage < 1 or self.stages < 1:
            raise ValueError("iters_per_stage and stages must be >= 1")
        if self.critic_steps < 1 or self.trainable_window < 1:
            raise ValueError("critic_steps and trainable_window must be >= 1")
        return self

    @classmethod
    def reduced(cls, **overrides) -> "TrainConfig":
        """Small CPU profile: 4 stages, 500 iterations, narrow net."""
        cfg = cls(stages=4, iters_per_stage=500, width=32, coarsest_min_dim=16)
        return replace(cfg, **overrides)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Learning rate at a 1-based iteration; decays once at the set fraction."""
    threshold = math.ceil(cfg.decay_at_fraction * cfg.iters_per_stage)
    return cfg.lr * cfg.lr_decay if iteration >= threshold else cfg.lr


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor,
                     rng: torch.Generator) -> torch.Tensor:
    """WGAN-GP penalty E[(||grad D(x_hat)||_2 - 1)^2] on a random blend.

    The blend point is eps*real + (1-eps)*fake with eps uniform in [0, 1];
    the gradient is taken of the summed patch-score map.
    """
    if real.shape != fake.shape:
        raise ValueError(f"gradient_penalty: shape mismatch {real.shape} vs {fake.shape}")
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype)
    x_hat = (eps * real + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    if not torch.all(torch.isfinite(grads)):
        raise TrainingDivergedError("gradient_penalty: non-finite critic gradients")
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def adversarial_losses(critic, real: torch.Tensor, fake: torch.Tensor,
                       gp_coeff: float, rng: torch.Generator):
    """(critic_loss, gen_loss) of the Wasserstein objective with penalty."""
    d_fake = critic(fake).mean()
    d_real = critic(real).mean()
    critic_loss = d_fake - d_real + gp_coeff * gradient_penalty(critic, real, fake, rng)
    gen_loss = -d_fake
    return critic_loss, gen_loss


def reconstruction_loss(generator, noise_maps, amps, target: torch.Tensor) -> torch.Tensor:
    """MSE between the generator output for a fixed noise set and a target.

    ``noise_maps``/``amps`` are ordered coarsest first and already cut to
    the stage being trained; ``target`` is that stage's pyramid level.
    """
    out = generator(noise_maps, amps)
    if out.shape != target.shape:
        raise ValueError(f"reconstruction_loss: shape mismatch {out.shape} vs {target.shape}")
    return F.mse_loss(out, target)


def multi_reconstruction_loss(generator, noise_sets, amps, targets) -> torch.Tensor:
    """Mean reconstruction loss over (noise set, target) pairs."""
    if len(noise_sets) == 0 or len(noise_sets) != len(targets):
        raise ValueError("multi_reconstruction_loss: need >= 1 matching noise/target pairs")
    total = None
    for maps, target in zip(noise_sets, targets):
        loss = reconstruction_loss(generator, maps, amps, target)
        total = loss if total is None else total + loss
    return total / len(noise_sets)


class RunLog:
    """Line-of-records (JSONL) progress log; silent when no path is set."""

    def __init__(self, path=None):
        self._fh = open(path, "w") if path else None

    def write(self, **record):
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _set_stage_trainable(gen: GrowingGenerator, window: int):
    """Front/back convs plus the newest `window` blocks get gradients.

    Older blocks are frozen hard: no gradients and no running-stat
    updates, so their tensors stay bit-identical across the stage.
    """
    first_trainable = max(0, len(gen.blocks) - window)
    for p in gen.front.parameters():
        p.requires_grad_(True)
    for p in gen.back.parameters():
        p.requires_grad_(True)
    gen.front.train()
    for i, block in enumerate(gen.blocks):
        trainable = i >= first_trainable
        for p in block.parameters():
            p.requires_grad_(trainable)
        block.train(trainable)
    return [p for p in gen.parameters() if p.requires_grad]


def _randn_maps(dims, levels, rng) -> list:
    """Fresh 1x1xhxw standard-normal maps for the given levels, coarsest first."""
    return [torch.randn(1, 1, *dims[n], generator=rng) for n in levels]


def _check_finite(value: float, stage: int, iteration: int, name: str):
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(
            f"{name} diverged at stage {stage}, iteration {iteration}: {value!r}"
        )


def train_stage(gen: GrowingGenerator, critic: Critic, n: int, cover_levels,
                secret_levels, keyed_noises, amps, cfg: TrainConfig,
                rng: torch.Generator, log: RunLog | None = None,
                checkpoint_fn=None):
    """Run one stage of alternating critic/generator updates.

    ``cover_levels``/``secret_levels`` are tensor ladders (finest first);
    ``keyed_noises`` holds one tensor ladder per reconstruction target.
    Only the newest blocks (plus front/back convs) are updated.
    """
    n_levels = len(cover_levels)
    levels = list(range(n_levels - 1, n - 1, -1))  # coarsest .. n
    dims = [(lv.shape[-2], lv.shape[-1]) for lv in cover_levels]
    real = cover_levels[n]
    stage_amps = [amps[k] for k in levels]
    recon_noises = [[maps[k] for k in levels] for maps in keyed_noises]
    recon_targets = [sec[n] for sec in secret_levels]

    g_params = _set_stage_trainable(gen, cfg.trainable_window)
    critic.train()
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(critic.parameters(), lr=cfg.lr, betas=cfg.adam_betas)

    for it in range(1, cfg.iters_per_stage + 1):
        lr = lr_at(it, cfg)
        for group in opt_g.param_groups:
            group["lr"] = lr
        for group in opt_d.param_groups:
            group["lr"] = lr

        fake_noise = _randn_maps(dims, levels, rng)
        with torch.no_grad():
            fake = gen(fake_noise, stage_amps)

        for _ in range(cfg.critic_steps):
            opt_d.zero_grad(set_to_none=True)
            d_loss = (critic(fake).mean() - critic(real).mean()
                      + cfg.gp_coeff * gradient_penalty(critic, real, fake, rng))
            d_loss.backward()
            opt_d.step()

        opt_g.zero_grad(set_to_none=True)
        adv = -critic(gen(fake_noise, stage_amps)).mean()
        rec = multi_reconstruction_loss(gen, recon_noises, stage_amps, recon_targets)
        g_loss = adv + cfg.recon_weight * rec
        g_loss.backward()
        opt_g.step()

        _check_finite(float(d_loss), n, it, "critic loss")
        _check_finite(float(g_loss), n, it, "generator loss")

        if log is not None and (it % cfg.log_every == 0 or it == cfg.iters_per_stage):
            log.write(event="iter", stage=n, iter=it, lr=lr,
                      critic_loss=float(d_loss), gen_adv=float(adv),
                      recon=float(rec), time=time.time())
        if checkpoint_fn is not None and cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0:
            checkpoint_fn(stage=n, iteration=it)
    return float(rec)


def _stage_amp(gen, keyed_noises, amps, n, n_levels, targets):
    """Noise amplitude for level n: RMSE of the upsampled previous-stage
    reconstruction against that level's target, averaged over targets."""
    levels_above = list(range(n_levels - 1, n, -1))
    rmses = []
    with torch.no_grad():
        for maps, target_levels in zip(keyed_noises, targets):
            out = gen([maps[k] for k in levels_above], [amps[k] for k in levels_above])
            target = target_levels[n]
            up = pyramid.resize_tensor(out, target.shape[-2], target.shape[-1])
            rmses.append(float(torch.sqrt(F.mse_loss(up, target))))
    return float(np.mean(rmses))


def _calibrate_batchnorm(gen, keyed_noises, amps):
    """Freeze batch-norm running stats onto the keyed reconstruction path.

    Each norm layer is reset and refilled with the cumulative average of
    the per-key reconstruction passes, so eval-mode extraction applies the
    same normalization the reconstruction objective was trained under.
    """
    momenta = []
    for m in gen.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            momenta.append((m, m.momentum))
            m.momentum = None
            m.reset_running_stats()
    gen.train()
    n_levels = len(keyed_noises[0])
    with torch.no_grad():
        for maps in keyed_noises:
            gen(list(reversed(maps)), list(reversed(amps[:n_levels])))
    for m, momentum in momenta:
        m.momentum = momentum
    gen.eval()


def train(cover: np.ndarray, secrets, keys, cfg: TrainConfig) -> StegoModel:
    """Full coarse-to-fine training; returns the serializable model.

    ``secrets`` is a list of 0 to 4 uint8 images and ``keys`` the matching
    embedding keys. Secrets are resized to the cover's dims before pyramid
    construction. An empty list trains the reference model, whose
    reconstruction anchor is the cover itself under a fixed random noise
    set.
    """
    cfg.validate()
    if len(secrets) != len(keys):
        raise ValueError(f"train: {len(secrets)} secrets but {len(keys)} keys")
    if len(secrets) > MAX_SECRETS:
        raise ValueError(f"train: at most {MAX_SECRETS} secrets supported")
    if len(set(k.key_bytes for k in keys)) != len(keys):
        raise ValueError("train: duplicate embedding keys")

    rng = torch.Generator().manual_seed(cfg.seed)
    log = RunLog(cfg.log_path)

    cover_f = pyramid.dequantize(cover)
    cover_pyr = pyramid.build_pyramid(cover_f, cfg.stages, cfg.coarsest_min_dim)
    dims = cover_pyr.dims
    n_levels = len(dims)
    cover_levels = [pyramid.to_tensor(lv) for lv in cover_pyr.levels]

    if secrets:
        secret_levels = []
        for sec in secrets:
            sec_f = pyramid.resize(pyramid.dequantize(sec), cover.shape[0], cover.shape[1])
            sec_pyr = pyramid.build_pyramid(sec_f, cfg.stages, cfg.coarsest_min_dim)
            secret_levels.append([pyramid.to_tensor(lv) for lv in sec_pyr.levels])
        keyed_noises = [
            [torch.from_numpy(m)[None, None] for m in keynoise.noise_pyramid(key, dims).maps]
            for key in keys
        ]
    else:
        # reference model: anchor the cover to one fixed random noise set
        secret_levels = [cover_levels]
        keyed_noises = [_randn_maps(dims, range(n_levels), rng)]

    gen = GrowingGenerator(cfg.width, rng=rng)
    critic = Critic(cfg.width, rng=rng)
    amps = [0.0] * n_levels
    amps[n_levels - 1] = 1.0

    def model_snapshot():
        return StegoModel(
            generator=gen, pyramid_dims=dims, ratio=cover_pyr.ratio,
            noise_amps=list(amps), noise_scheme=keynoise.NOISE_SCHEME,
            obfuscated=False, shuffle_scheme=None, width=cfg.width,
            trainable_window=cfg.trainable_window,
        )

    checkpoint_fn = None
    if cfg.checkpoint_path:
        from . import stego

        def checkpoint_fn(stage, iteration):
            stego.save_model(model_snapshot(), cfg.checkpoint_path)

    t0 = time.time()
    for n in range(n_levels - 1, -1, -1):
        if n < n_levels - 1:
            gen.grow(rng)
            amps[n] = _stage_amp(gen, keyed_noises, amps, n, n_levels, secret_levels)
        log.write(event="stage_start", stage=n, dims=list(dims[n]), amp=amps[n])
        final_rec = train_stage(gen, critic, n, cover_levels, secret_levels,
                                keyed_noises, amps, cfg, rng, log, checkpoint_fn)
        log.write(event="stage_end", stage=n, recon=final_rec, elapsed=time.time() - t0)

    _calibrate_batchnorm(gen, keyed_noises, amps)
    for p in gen.parameters():
        p.requires_grad_(False)
    log.close()
    return model_snapshot()
