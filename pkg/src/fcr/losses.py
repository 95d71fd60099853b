"""Loss terms of the adversarial objective: reconstruction ELBO, the
similarity and treatment-classifier regularizers, and the permutation
discriminator losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import (
    DimensionError,
    PROB_FLOOR,
    binary_cross_entropy,
    cosine_rows,
    gaussian_nll,
    kl_diag_gaussian,
)
from .model import FcrModel, permute_within_condition


class TrainingStepError(RuntimeError):
    """A loss part became non-finite; the message names the part."""


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the similarity, classifier and discriminator terms."""

    w_sim: float = 0.0
    w_ct: float = 0.0
    w_dis: float = 0.0

    def __post_init__(self):
        for name in ("w_sim", "w_ct", "w_dis"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


class StepRng:
    """Paired numpy/torch randomness derived from one seed.

    Re-creating a StepRng from the same seed replays the exact sampling path,
    which the finite-difference gradient checks rely on.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.np = np.random.default_rng(self.seed)
        self.torch = torch.Generator()
        self.torch.manual_seed(self.seed)

    def child(self, offset: int) -> "StepRng":
        return StepRng((self.seed * 1_000_003 + offset) % (2**63))


@dataclass
class Batch:
    """Tensors for one minibatch plus the raw labels used for grouping."""

    y: torch.Tensor
    t_enc: torch.Tensor
    x_enc: torch.Tensor
    t_idx: torch.Tensor
    t_labels: np.ndarray
    x_labels: np.ndarray
    control_mask: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]

    def rows(self, idx: np.ndarray) -> "Batch":
        ti = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            y=self.y[ti],
            t_enc=self.t_enc[ti],
            x_enc=self.x_enc[ti],
            t_idx=self.t_idx[ti],
            t_labels=self.t_labels[idx],
            x_labels=self.x_labels[idx],
            control_mask=self.control_mask[idx],
        )


def elbo_loss(model: FcrModel, batch: Batch, rng: StepRng
              ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Negative evidence lower bound with one reparameterized sample per cell.

    Parts: unit-scale Gaussian reconstruction NLL plus one KL term per latent
    block between its posterior and its conditional prior, all batch means.
    """
    if len(batch) == 0:
        raise DimensionError("elbo_loss requires a nonempty batch")
    prior = model.prior_params(batch.t_enc, batch.x_enc)
    posterior = model.posterior_params(batch.y, batch.t_enc, batch.x_enc)
    z = posterior.sample(rng.torch)
    recon = gaussian_nll(batch.y, model.decode(z)).mean()
    kl_x = kl_diag_gaussian(posterior.x, prior.x).mean()
    kl_tx = kl_diag_gaussian(posterior.tx, prior.tx).mean()
    kl_t = kl_diag_gaussian(posterior.t, prior.t).mean()
    neg_elbo = recon + kl_x + kl_tx + kl_t
    parts = {"recon": recon, "kl_x": kl_x, "kl_tx": kl_tx, "kl_t": kl_t}
    return neg_elbo, parts


def pair_controls(batch: Batch, rng: StepRng) -> tuple[np.ndarray, np.ndarray, int]:
    """Match each treated row with a random in-batch control sharing its
    covariate label. Returns (treated_idx, control_idx, skipped_count)."""
    treated = np.flatnonzero(~batch.control_mask)
    controls = np.flatnonzero(batch.control_mask)
    by_label: dict = {}
    for i in controls:
        by_label.setdefault(batch.x_labels[i], []).append(i)
    t_out, c_out, skipped = [], [], 0
    for i in treated:
        pool = by_label.get(batch.x_labels[i])
        if not pool:
            skipped += 1
            continue
        t_out.append(i)
        c_out.append(pool[int(rng.np.integers(0, len(pool)))])
    return np.asarray(t_out, dtype=int), np.asarray(c_out, dtype=int), skipped


def _block_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean per-sample cosine for multi-dimensional blocks; scalar blocks use
    the cosine of the paired batch vectors instead, since the cosine of two
    scalars degenerates to a bare sign."""
    if a.shape[-1] == 1:
        values, _ = cosine_rows(a.reshape(1, -1), b.reshape(1, -1))
        return values[0]
    values, _ = cosine_rows(a, b)
    return values.mean()


def sim_loss_from_samples(z_t: torch.Tensor, z_t0: torch.Tensor,
                          z_x: torch.Tensor, z_x0: torch.Tensor) -> torch.Tensor:
    """Similarity of treated/control treatment blocks minus similarity of
    their covariate blocks; in [-2, 2]."""
    return _block_similarity(z_t, z_t0) - _block_similarity(z_x, z_x0)


def sim_loss(model: FcrModel, batch: Batch, rng: StepRng
             ) -> tuple[torch.Tensor, int]:
    """Similarity regularizer over treated/control pairs sharing covariates."""
    ti, ci, skipped = pair_controls(batch, rng)
    if len(ti) == 0:
        return torch.zeros((), dtype=batch.y.dtype), skipped
    treated, control = batch.rows(ti), batch.rows(ci)
    q = model.posterior_params(treated.y, treated.t_enc, treated.x_enc)
    q0 = model.posterior_params(control.y, control.t_enc, control.x_enc)
    z = q.sample(rng.torch)
    z0 = q0.sample(rng.torch)
    return sim_loss_from_samples(z.z_t, z0.z_t, z.z_x, z0.z_x), skipped


def ct_loss_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of predicted treatment probabilities."""
    picked = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -picked.clamp(PROB_FLOOR, 1.0).log().mean()


def ct_loss(model: FcrModel, batch: Batch, rng: StepRng
            ) -> tuple[torch.Tensor, int]:
    """Treatment-classifier loss on paired treated/control representations."""
    ti, ci, skipped = pair_controls(batch, rng)
    if len(ti) == 0:
        return torch.zeros((), dtype=batch.y.dtype), skipped
    treated, control = batch.rows(ti), batch.rows(ci)
    q = model.posterior_params(treated.y, treated.t_enc, treated.x_enc)
    q0 = model.posterior_params(control.y, control.t_enc, control.x_enc)
    z = q.sample(rng.torch)
    z0 = q0.sample(rng.torch)
    probs = model.classify_treatment(z.z_t, z.z_tx, z0.z_t, z0.z_tx)
    return ct_loss_from_probs(probs, treated.t_idx), skipped


@dataclass
class DisLossResult:
    value: torch.Tensor
    no_permutable_group: bool = False
    skipped_groups: int = 0


def dis_loss(model: FcrModel, batch: Batch, side: str, rng: StepRng,
             detach_latents: bool = False) -> DisLossResult:
    """Binary cross-entropy of a permutation discriminator on a balanced mix
    of original and within-condition-permuted interaction latents.

    ``detach_latents`` cuts gradients into the encoder; the discriminator
    update stage uses this so only the discriminator itself learns.
    """
    posterior = model.posterior_params(batch.y, batch.t_enc, batch.x_enc)
    z = posterior.sample(rng.torch)
    if side == "x":
        block, cond_enc, labels = z.z_x, batch.x_enc, batch.x_labels
    elif side == "t":
        block, cond_enc, labels = z.z_t, batch.t_enc, batch.t_labels
    else:
        raise ValueError(f"side must be 'x' or 't', got {side!r}")
    z_tx = z.z_tx
    if detach_latents:
        block, z_tx = block.detach(), z_tx.detach()
    perm = permute_within_condition(z_tx, labels, rng.np)
    if perm.permuted_groups == 0:
        return DisLossResult(torch.zeros((), dtype=batch.y.dtype),
                             no_permutable_group=True,
                             skipped_groups=perm.skipped_groups)
    idx = torch.as_tensor(perm.base_index, dtype=torch.long)
    p = model.discriminate(block[idx], perm.tx_rows, cond_enc[idx], side)
    value = binary_cross_entropy(p, perm.permuted.to(p.dtype))
    return DisLossResult(value, skipped_groups=perm.skipped_groups)


def total_loss(parts: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """neg_elbo + w_sim*sim + w_ct*ct - w_dis*(dis_x + dis_t)."""
    for name, value in parts.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingStepError(f"loss part {name!r} is non-finite: {value}")
    return (
        parts["neg_elbo"]
        + weights.w_sim * parts["sim"]
        + weights.w_ct * parts["ct"]
        - weights.w_dis * (parts["dis_x"] + parts["dis_t"])
    )


def all_loss_parts(model: FcrModel, batch: Batch, rng: StepRng
                   ) -> tuple[dict[str, torch.Tensor], dict[str, float]]:
    """Every term of the objective on one batch, plus skip diagnostics."""
    neg_elbo, elbo_parts = elbo_loss(model, batch, rng)
    sim, sim_skipped = sim_loss(model, batch, rng)
    ct, ct_skipped = ct_loss(model, batch, rng)
    dx = dis_loss(model, batch, "x", rng)
    dt = dis_loss(model, batch, "t", rng)
    parts = {
        "neg_elbo": neg_elbo,
        "sim": sim,
        "ct": ct,
        "dis_x": dx.value,
        "dis_t": dt.value,
        **elbo_parts,
    }
    diagnostics = {
        "sim_rows_skipped": float(sim_skipped),
        "ct_rows_skipped": float(ct_skipped),
        "dis_x_groups_skipped": float(dx.skipped_groups),
        "dis_t_groups_skipped": float(dt.skipped_groups),
    }
    return parts, diagnostics
