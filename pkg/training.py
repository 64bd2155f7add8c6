#!/usr/bin/env python3
"""
Adversarial VAE Training
The VAE, discriminator, adversarial and combined losses, one alternating
update step, and the epoch loop with its CSV log and checkpoints.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models import ModelParams, discriminate, encode, generate, reparameterize
from normalization import GroupLayout
from patching import PatchBatch, sample_train_patches, whole_image_batch
from tensor_engine import (Adam, ContractError, Tensor, add, clamp, concat, exp, log, mean,
                           mul, square, sub, sum_, take_batch)

LOG_COLUMNS = ["epoch", "step", "l_dcp", "l_d", "d_real", "d_fake"]


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; carries the step index and the loss components."""

    def __init__(self, step: int, components: Dict[str, float]):
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"Training diverged at step {step}: {detail}")


@dataclass
class LossWeights:
    kl: float = 1e-4
    rec: float = 1e-3
    gen: float = 1e-3

    def __post_init__(self):
        for name in ("kl", "rec", "gen"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")


@dataclass
class TrainConfig:
    lr: float = 8.5e-5
    batch_images: int = 4
    patches_per_image: int = 48
    epochs: int = 30
    seed: int = 0
    prob_clamp: float = 1e-4
    non_saturating: bool = False
    shared_disc_batch: bool = False
    full_image: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")
        if self.batch_images < 1 or self.patches_per_image < 1:
            raise ValueError("batch_images and patches_per_image must be >= 1")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be >= 0")


@dataclass
class StepReport:
    step: int
    l_dcp: float
    l_d: float
    d_real: float
    d_fake: float
    components: Dict[str, float] = field(default_factory=dict)


# =============================================================================
# Losses
# =============================================================================

def _check_scores(scores: Tensor, name: str) -> None:
    data = scores.data
    # Saturated float32 sigmoids land exactly on 0 or 1; the clamp handles those
    if not np.all(np.isfinite(data)) or np.any(data < 0.0) or np.any(data > 1.0):
        raise ContractError(f"{name} scores must lie in (0, 1), got range "
                            f"[{np.nanmin(data):.4g}, {np.nanmax(data):.4g}]")


def _clamped_log(scores: Tensor, eps: float) -> Tensor:
    return log(clamp(scores, eps, 1.0 - eps))


def reconstruction_error(x: Tensor, x_rec: Tensor) -> Tensor:
    return mean(square(sub(x, x_rec)))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """-1/2 sum_j (1 + logvar - mu^2 - sigma^2), averaged over the batch."""
    inner = sub(sub(add(logvar, 1.0), square(mu)), exp(logvar))
    return mul(mean(sum_(inner, axis=1)), -0.5)


def loss_vae(x: Tensor, x_rec: Tensor, mu: Tensor, logvar: Tensor, kl_weight: float = 1e-4) -> Tensor:
    return add(reconstruction_error(x, x_rec), mul(kl_divergence(mu, logvar), kl_weight))


def loss_discriminator(d_real: Tensor, d_rec: Tensor, d_fake: Tensor, eps: float = 1e-4) -> Tensor:
    """mean log(1 - D(real)) + mean log D(rec) + mean log D(fake)."""
    for scores, name in ((d_real, "real"), (d_rec, "reconstructed"), (d_fake, "generated")):
        _check_scores(scores, name)
    real_term = mean(log(clamp(sub(1.0, d_real), eps, 1.0 - eps)))
    return add(add(real_term, mean(_clamped_log(d_rec, eps))), mean(_clamped_log(d_fake, eps)))


def adversarial_term(scores: Tensor, eps: float = 1e-4, non_saturating: bool = False) -> Tensor:
    """mean(1 - log D), or mean(-log D) for the non-saturating variant."""
    _check_scores(scores, "adversarial")
    neg_log = mul(mean(_clamped_log(scores, eps)), -1.0)
    return neg_log if non_saturating else add(neg_log, 1.0)


def loss_adversarial(d_rec: Tensor, d_fake: Tensor, eps: float = 1e-4,
                     non_saturating: bool = False) -> Tensor:
    return add(adversarial_term(d_rec, eps, non_saturating), adversarial_term(d_fake, eps, non_saturating))


def loss_components(x: Tensor, x_rec: Tensor, mu: Tensor, logvar: Tensor, d_rec: Tensor,
                    d_fake: Tensor, eps: float = 1e-4, non_saturating: bool = False) -> Dict[str, Tensor]:
    return {
        "recon": reconstruction_error(x, x_rec),
        "kl": kl_divergence(mu, logvar),
        "adv_rec": adversarial_term(d_rec, eps, non_saturating),
        "adv_gen": adversarial_term(d_fake, eps, non_saturating),
    }


def combine_components(components: Dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = components["recon"]
    total = add(total, mul(components["kl"], weights.kl))
    total = add(total, mul(components["adv_rec"], weights.rec))
    return add(total, mul(components["adv_gen"], weights.gen))


def loss_dcp(x: Tensor, x_rec: Tensor, mu: Tensor, logvar: Tensor, d_rec: Tensor, d_fake: Tensor,
             weights: Optional[LossWeights] = None, eps: float = 1e-4,
             non_saturating: bool = False) -> Tensor:
    """Reconstruction + w_kl KL + w_rec adversarial(rec) + w_gen adversarial(fake)."""
    weights = weights or LossWeights()
    return combine_components(loss_components(x, x_rec, mu, logvar, d_rec, d_fake, eps, non_saturating),
                              weights)


# =============================================================================
# One alternating update
# =============================================================================

def make_optimizers(model: ModelParams, lr: float) -> Tuple[Adam, Adam]:
    return Adam(model.vae_parameters(), lr), Adam(model.disc_parameters(), lr)


def _score_sets(model: ModelParams, real: Tensor, rec: Tensor, fake: Tensor, layout: GroupLayout,
                shared: bool) -> Tuple[Tensor, Tensor, Tensor]:
    n = real.shape[0]
    if not shared:
        return (discriminate(model, real, layout), discriminate(model, rec, layout),
                discriminate(model, fake, layout))
    joined = discriminate(model, concat([real, rec, fake]), GroupLayout(3 * n, 1))
    return (take_batch(joined, slice(0, n)), take_batch(joined, slice(n, 2 * n)),
            take_batch(joined, slice(2 * n, 3 * n)))


def _require_finite(step: int, tensors: Dict[str, Tensor]) -> None:
    means = {name: float(np.mean(t.data, dtype=np.float64)) for name, t in tensors.items()}
    if not all(math.isfinite(v) for v in means.values()):
        raise TrainingDivergedError(step, means)


def train_step(model: ModelParams, batch: PatchBatch, vae_opt: Adam, disc_opt: Adam,
               cfg: TrainConfig, weights: Optional[LossWeights] = None,
               rng: Optional[np.random.Generator] = None, step: int = 0) -> StepReport:
    """VAE update through the discriminator, then a discriminator update on detached samples."""
    weights = weights or LossWeights()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x, layout = batch.data, batch.layout
    n = x.shape[0]
    latent = model.cfg.latent_dim

    # theta update
    model.zero_grad()
    mu, logvar = encode(model, x)
    z = reparameterize(mu, logvar, rng.standard_normal((n, latent)))
    x_rec = generate(model, z)
    x_fake = generate(model, Tensor(rng.standard_normal((n, latent))))
    d_real, d_rec, d_fake = _score_sets(model, x, x_rec, x_fake, layout, cfg.shared_disc_batch)
    _require_finite(step, {"mu": mu, "logvar": logvar, "x_rec": x_rec, "d_real": d_real,
                           "d_rec": d_rec, "d_fake": d_fake})
    parts = loss_components(x, x_rec, mu, logvar, d_rec, d_fake, cfg.prob_clamp, cfg.non_saturating)
    total = combine_components(parts, weights)
    components = {k: float(v.item()) for k, v in parts.items()}
    components["l_dcp"] = float(total.item())
    if not math.isfinite(components["l_dcp"]):
        raise TrainingDivergedError(step, components)
    total.backward()
    vae_opt.step()

    # phi update
    model.zero_grad()
    d_real, d_rec, d_fake = _score_sets(model, x, x_rec.detach(), x_fake.detach(), layout,
                                        cfg.shared_disc_batch)
    l_d = loss_discriminator(d_real, d_rec, d_fake, cfg.prob_clamp)
    l_d_value = float(l_d.item())
    if not math.isfinite(l_d_value):
        raise TrainingDivergedError(step, dict(components, l_d=l_d_value))
    l_d.backward()
    disc_opt.step()
    model.zero_grad()

    return StepReport(
        step=step,
        l_dcp=components["l_dcp"],
        l_d=l_d_value,
        d_real=float(np.mean(d_real.data, dtype=np.float64)),
        d_fake=float(np.mean(d_fake.data, dtype=np.float64)),
        components=components,
    )


# =============================================================================
# Epoch loop
# =============================================================================

def _check_writable(path: Optional[Path]) -> None:
    if path is None:
        return
    parent = Path(path).parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise PermissionError(f"Cannot write to {parent}")


def _batches(images: Sequence[np.ndarray], cfg: TrainConfig, patch_size: int,
             rng: np.random.Generator):
    order = rng.permutation(len(images))
    for start in range(0, len(order), cfg.batch_images):
        chosen = [images[i] for i in order[start:start + cfg.batch_images]]
        if cfg.full_image:
            yield whole_image_batch(chosen, patch_size)
        else:
            yield sample_train_patches(chosen, cfg.patches_per_image, patch_size, rng)


def fit(images: Sequence[np.ndarray], model: ModelParams, cfg: TrainConfig,
        weights: Optional[LossWeights] = None, log_path: Optional[Path] = None,
        checkpoint_path: Optional[Path] = None, config=None) -> Tuple[ModelParams, pd.DataFrame]:
    """Train for cfg.epochs; one log row per epoch, checkpoints every cfg.checkpoint_every epochs."""
    if len(images) == 0:
        raise ValueError("Training dataset is empty")
    _check_writable(log_path)
    _check_writable(checkpoint_path)
    weights = weights or LossWeights()
    rng = np.random.default_rng(cfg.seed)
    vae_opt, disc_opt = make_optimizers(model, cfg.lr)
    rows: List[dict] = []
    step = 0
    model.train()

    for epoch in range(1, cfg.epochs + 1):
        start_time = time.time()
        reports = []
        for batch in _batches(images, cfg, model.cfg.patch_size, rng):
            reports.append(train_step(model, batch, vae_opt, disc_opt, cfg, weights, rng, step))
            step += 1
        row = {
            "epoch": epoch,
            "step": step,
            "l_dcp": float(np.mean([r.l_dcp for r in reports])),
            "l_d": float(np.mean([r.l_d for r in reports])),
            "d_real": float(np.mean([r.d_real for r in reports])),
            "d_fake": float(np.mean([r.d_fake for r in reports])),
        }
        rows.append(row)
        logging.info(f"Epoch {epoch}/{cfg.epochs} - {len(reports)} steps in {time.time() - start_time:.2f}s "
                     f"- L_DCP {row['l_dcp']:.5f}, L_D {row['l_d']:.4f}, "
                     f"D(real) {row['d_real']:.3f}, D(fake) {row['d_fake']:.3f}")
        if log_path is not None:
            pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(log_path, index=False)
        if checkpoint_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            _save(model, checkpoint_path, config, epoch)

    just_saved = cfg.checkpoint_every and cfg.epochs % cfg.checkpoint_every == 0
    if checkpoint_path is not None and cfg.epochs > 0 and not just_saved:
        _save(model, checkpoint_path, config, cfg.epochs)
    log_frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if log_path is not None and not rows:
        log_frame.to_csv(log_path, index=False)
    return model, log_frame


def _save(model: ModelParams, path: Path, config, epoch: int) -> None:
    from checkpoint import save_checkpoint  # checkpoint -> run_config -> training
    save_checkpoint(model, config, path)
    logging.info(f"Checkpoint written after epoch {epoch}: {path}")
