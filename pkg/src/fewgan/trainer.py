"""Progressive training: the quantized scale 0, then residual scales 1..T.

Each scale alternates ``critic_steps`` WGAN-GP critic updates with one
generator update. Critics only ever see training images as real and their
renders as fake; side-dataset images reach the generators through the SSIM
and generator-only adversarial terms.
"""

import contextlib
import csv
import logging
import math
import os
from dataclasses import dataclass, field

import torch

from fewgan import checkpoint as ckpt_lib
from fewgan import data
from fewgan import losses
from fewgan import prior as prior_lib
from fewgan.quantizer import NonFiniteLatentError, vq_loss

logger = logging.getLogger(__name__)

# Offsets the seed of scale t so each scale's randomness is independent of
# whether earlier scales were run in the same process.
_SCALE_SEED_STRIDE = 7919


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes non-finite."""

    def __init__(self, scale, step, name, value):
        super().__init__(
            f"non-finite {name} loss ({value}) at scale {scale}, step {step}"
        )
        self.scale = scale
        self.step = step


class RunLog:
    """Append-only CSV of ``scale,step,component,value`` rows."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path is not None and not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(["scale", "step", "component", "value"])

    def record(self, scale, step, values):
        rows = [(scale, step, k, float(v)) for k, v in values.items()]
        self.rows.extend(rows)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerows(rows)


@dataclass
class Dataset:
    """Training and side images rendered at every pyramid level.

    ``train[t]`` is ``(N, 3, H_t, W_t)`` and ``side[t]`` is ``(S, 3, H_t, W_t)``.
    """

    sizes: list
    train: list
    side: list


def prepare(cfg, train_images, side_images):
    if len(train_images) < 2:
        raise ValueError(f"need at least 2 training images, got {len(train_images)}")
    if not side_images:
        raise ValueError("need at least 1 side image")
    shapes = {tuple(img.shape) for img in train_images}
    if len(shapes) != 1:
        raise ValueError(f"training images must share one shape, got {sorted(shapes)}")
    _, height, width = train_images[0].shape
    sizes = data.pyramid_sizes(height, width, cfg.scale_factor, cfg.min_size,
                               cfg.n_scales)
    return Dataset(sizes, data.stack_levels(train_images, sizes),
                   data.stack_levels(side_images, sizes))


def init_model(cfg, sizes):
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return ckpt_lib.build_model(cfg, sizes)


def _check(scale, step, values):
    for name, value in values.items():
        value = torch.as_tensor(value).detach()
        if not torch.isfinite(value):
            raise TrainingDivergence(scale, step, name, value.item())


@contextlib.contextmanager
def _latents_guard(scale, step):
    try:
        yield
    except NonFiniteLatentError as e:
        raise TrainingDivergence(scale, step, "latent", math.nan) from e


def _optimizers(cfg, g_params, d_params):
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d_params, lr=cfg.lr_d, betas=(0.5, 0.999))
    milestone = [max(1, int(cfg.lr_decay_at * cfg.steps_per_scale))]
    scheds = [torch.optim.lr_scheduler.MultiStepLR(o, milestone, gamma=cfg.lr_decay)
              for o in (opt_g, opt_d)]
    return opt_g, opt_d, scheds


def _set_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def _critic_update(cfg, critic, opt_d, real, fake, gen, scale, step, observer,
                   side_fake=None):
    if observer is not None:
        observer(scale, "real", "train")
        observer(scale, "fake", "train")
    loss = losses.adv_critic_loss(critic, real, fake, cfg.lambda_gp, generator=gen)
    if side_fake is not None:
        if observer is not None:
            observer(scale, "fake", "side")
        loss = loss + critic(side_fake.detach()).mean()
    _check(scale, step, {"critic": loss})
    opt_d.zero_grad()
    loss.backward()
    opt_d.step()
    return loss.detach()


def _seed_for(cfg, scale):
    return cfg.seed + _SCALE_SEED_STRIDE * (scale + 1)


def train_scale0(model, cfg, dataset, log=None, observer=None):
    """Trains the encoder, codebook, decoder and scale-0 critic.

    Args:
        model: :class:`~fewgan.generators.PyramidModel` to update in place.
        cfg: Training configuration.
        dataset: Output of :func:`prepare`.
        log: Optional :class:`RunLog`.
        observer: Optional callable ``(scale, role, source)`` invoked for
            every batch fed to a critic, ``role`` in {"real", "fake"} and
            ``source`` in {"train", "side"}.
    """
    torch.manual_seed(_seed_for(cfg, 0))
    gen = torch.Generator().manual_seed(_seed_for(cfg, 0))
    x = dataset.train[0]
    side = dataset.side[0]
    critic = model.critics[0]
    g_modules = [model.encoder, model.codebook, model.decoder]
    g_params = [p for m in g_modules for p in m.parameters()]
    opt_g, opt_d, scheds = _optimizers(cfg, g_params, critic.parameters())
    w = cfg.weights
    model.train()
    for step in range(cfg.steps_per_scale):
        with _latents_guard(0, step):
            s = side[torch.randint(side.shape[0], (1,), generator=gen)]
            side_fake = None
            with torch.no_grad():
                fake = model.scale0_forward(x)[0]
                if cfg.side_as_fake:
                    side_fake = model.scale0_forward(s)[0]
            for _ in range(cfg.critic_steps):
                d_loss = _critic_update(cfg, critic, opt_d, x, fake, gen, 0, step,
                                        observer, side_fake)

            _set_grad(critic, False)
            x_hat, z_e, z_q, _ = model.scale0_forward(x)
            s_hat, z_e_s, _, _ = model.scale0_forward(s)
            n_z = model.n_z
            parts = {
                "adv": losses.adv_generator_loss(critic, x_hat),
                "vq": vq_loss(x, x_hat, z_e, z_q, cfg.beta),
                "adv_ref": losses.adv_ref_loss(critic, s_hat),
                "ssim": losses.ssim_loss(s_hat, s),
                "continuity": losses.continuity_loss(z_e[:, :n_z])
                + losses.continuity_loss(z_e_s[:, :n_z]),
            }
            total = losses.scale_0_loss(parts["adv"], parts["vq"], parts["adv_ref"],
                                        parts["ssim"], parts["continuity"], w)
            _check(0, step, {**parts, "total": total})
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            _set_grad(critic, True)
            for sched in scheds:
                sched.step()
            if log is not None:
                log.record(0, step, {"critic": d_loss, "total": total.detach(),
                                     **{k: v.detach() for k, v in parts.items()}})
    model.eval()
    return model


def frozen_inputs(model, dataset, t):
    """Outputs of the frozen scales 0..t-1 for training and side images."""
    with torch.no_grad():
        prev_train = model.refine(model.scale0_forward(dataset.train[0])[0], stop=t - 1)
        prev_side = model.refine(model.scale0_forward(dataset.side[0])[0], stop=t - 1)
    return prev_train, prev_side


def train_scale_t(model, cfg, t, dataset, log=None, observer=None):
    """Trains ``G_t`` and ``D_t`` with every coarser scale frozen."""
    if not 1 <= t <= model.finest:
        raise ValueError(f"scale {t} outside 1..{model.finest}")
    torch.manual_seed(_seed_for(cfg, t))
    gen = torch.Generator().manual_seed(_seed_for(cfg, t))
    with _latents_guard(t, 0):
        prev_train, prev_side = frozen_inputs(model, dataset, t)
    x = dataset.train[t]
    side = dataset.side[t]
    generator = model.generators[t - 1]
    critic = model.critics[t]
    opt_g, opt_d, scheds = _optimizers(cfg, generator.parameters(), critic.parameters())
    w = cfg.weights
    generator.train()
    critic.train()
    for step in range(cfg.steps_per_scale):
        k = torch.randint(side.shape[0], (1,), generator=gen)
        s, s_prev = side[k], prev_side[k]
        side_fake = None
        with torch.no_grad():
            fake = model.residual_forward(prev_train, t)
            if cfg.side_as_fake:
                side_fake = model.residual_forward(s_prev, t)
        for _ in range(cfg.critic_steps):
            d_loss = _critic_update(cfg, critic, opt_d, x, fake, gen, t, step,
                                    observer, side_fake)

        _set_grad(critic, False)
        x_hat = model.residual_forward(prev_train, t)
        s_hat = model.residual_forward(s_prev, t)
        parts = {
            "adv": losses.adv_generator_loss(critic, x_hat),
            "adv_ref": losses.adv_ref_loss(critic, s_hat),
            "ssim": losses.ssim_loss(s_hat, s),
            "rec": losses.reconstruction_loss(x, x_hat),
        }
        total = losses.scale_t_loss(parts["adv"], parts["adv_ref"], parts["ssim"],
                                    parts["rec"], w)
        _check(t, step, {**parts, "total": total})
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
        _set_grad(critic, True)
        for sched in scheds:
            sched.step()
        if log is not None:
            log.record(t, step, {"critic": d_loss, "total": total.detach(),
                                 **{k: v.detach() for k, v in parts.items()}})
    generator.eval()
    critic.eval()
    return model


def train_all(cfg, train_images, side_images, checkpoint_path=None, log_path=None,
              resume=False, stop_after=None, observer=None):
    """Trains every scale in order, checkpointing after each one.

    Args:
        cfg: Training configuration.
        train_images: At least two ``(3, H, W)`` images of equal size.
        side_images: At least one ``(3, H', W')`` image.
        checkpoint_path: Where to write the checkpoint after every scale.
        log_path: Optional CSV run log (appended to).
        resume: Continue from the scales already completed in
            ``checkpoint_path``.
        stop_after: Stop once this scale is finished (for staged runs).
        observer: See :func:`train_scale0`.

    Returns:
        The trained :class:`~fewgan.generators.PyramidModel`.
    """
    dataset = prepare(cfg, train_images, side_images)
    log = RunLog(log_path)
    start = 0
    if resume and checkpoint_path is not None and os.path.exists(checkpoint_path):
        saved = ckpt_lib.load_checkpoint(checkpoint_path)
        if saved.config != cfg:
            raise ValueError("checkpoint was written with a different configuration")
        if saved.model.sizes != dataset.sizes:
            raise ValueError("checkpoint pyramid does not match the training images")
        model = saved.model
        start = saved.status.get("completed_scales", 0)
        logger.info("resuming after %d completed scales", start)
    else:
        model = init_model(cfg, dataset.sizes)
    for t in range(start, model.n_scales):
        logger.info("training scale %d at %s", t, dataset.sizes[t])
        if t == 0:
            train_scale0(model, cfg, dataset, log, observer)
        else:
            train_scale_t(model, cfg, t, dataset, log, observer)
        model.completed_scales = t + 1
        if checkpoint_path is not None:
            status = {"completed_scales": t + 1, "prior_trained": False}
            ckpt_lib.save_checkpoint(
                checkpoint_path, ckpt_lib.Checkpoint(cfg, model, None, status)
            )
        if stop_after is not None and t >= stop_after:
            break
    model.eval()
    return model


def fit(cfg, train_images, side_images, checkpoint_path=None, log_path=None,
        resume=False):
    """Trains all scales, then the prior on the side dataset's index grids.

    Returns:
        ``(model, prior)``.
    """
    model = train_all(cfg, train_images, side_images, checkpoint_path, log_path,
                      resume)
    for p in model.parameters():
        p.requires_grad_(False)
    grids = prior_lib.encode_side_dataset(model, side_images)
    log = RunLog(log_path)
    prior = prior_lib.train_prior(
        grids, cfg.n_embeddings, cfg.prior_epochs, lr=cfg.prior_lr,
        seed=_seed_for(cfg, model.n_scales), channels=cfg.prior_channels,
        n_blocks=cfg.prior_blocks,
        log=lambda epoch, value: log.record("prior", epoch, {"nll": value}),
    )
    prior.codebook_tag = model.codebook.tag()
    if checkpoint_path is not None:
        status = {"completed_scales": model.n_scales, "prior_trained": True,
                  "prior_nll": prior.final_nll}
        ckpt_lib.save_checkpoint(checkpoint_path,
                                 ckpt_lib.Checkpoint(cfg, model, prior, status))
    return model, prior
