"""Shared domain types and the exact math primitives used across the package."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

PROB_FLOOR = 1e-12
COSINE_EPS = 1e-12


class DimensionError(ValueError):
    """Inputs whose shapes cannot be combined."""


class DomainError(ValueError):
    """Inputs outside an operation's mathematical domain."""


@dataclass(frozen=True)
class LatentDims:
    """Sizes of the three latent blocks: covariate, interaction, treatment."""

    n_x: int
    n_tx: int
    n_t: int

    def __post_init__(self):
        for name in ("n_x", "n_tx", "n_t"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise DomainError(f"{name} must be a nonnegative integer, got {v!r}")
        if self.n < 1:
            raise DomainError("total latent dimension must be at least 1")

    @property
    def n(self) -> int:
        return self.n_x + self.n_tx + self.n_t

    def slices(self) -> tuple[slice, slice, slice]:
        """(x, tx, t) index ranges into a concatenated latent vector."""
        a, b = self.n_x, self.n_x + self.n_tx
        return slice(0, a), slice(a, b), slice(b, self.n)


class DiagGaussian:
    """Diagonal Gaussian given by a mean vector and a strictly positive scale.

    The scale is stored as its logarithm so positivity holds by construction;
    network heads emit log-scales directly via :meth:`from_log_scale`.
    """

    __slots__ = ("mean", "log_scale")

    def __init__(self, mean: torch.Tensor, scale: torch.Tensor):
        mean = torch.as_tensor(mean)
        scale = torch.as_tensor(scale, dtype=mean.dtype)
        if mean.shape != scale.shape:
            raise DimensionError(
                f"mean shape {tuple(mean.shape)} != scale shape {tuple(scale.shape)}"
            )
        if not bool((scale > 0).all()):
            raise DomainError("scale must be strictly positive componentwise")
        self.mean = mean
        self.log_scale = scale.log()

    @classmethod
    def from_log_scale(cls, mean: torch.Tensor, log_scale: torch.Tensor) -> "DiagGaussian":
        if mean.shape != log_scale.shape:
            raise DimensionError(
                f"mean shape {tuple(mean.shape)} != log_scale shape {tuple(log_scale.shape)}"
            )
        g = cls.__new__(cls)
        g.mean = mean
        g.log_scale = log_scale
        return g

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __repr__(self):
        return f"DiagGaussian(dim={tuple(self.mean.shape)})"


@dataclass
class LatentSample:
    """One draw of the three latent blocks."""

    z_x: torch.Tensor
    z_tx: torch.Tensor
    z_t: torch.Tensor

    def concat(self) -> torch.Tensor:
        return torch.cat([self.z_x, self.z_tx, self.z_t], dim=-1)

    def check_dims(self, dims: LatentDims) -> None:
        got = (self.z_x.shape[-1], self.z_tx.shape[-1], self.z_t.shape[-1])
        want = (dims.n_x, dims.n_tx, dims.n_t)
        if got != want:
            raise DimensionError(f"latent block sizes {got} do not match dims {want}")


@dataclass
class Dataset:
    """Outcome matrix plus per-cell labels, optionally with ground-truth latents.

    ``covariates`` and ``treatments`` hold the raw per-cell values (categorical
    levels are kept as their original values; encoding to one-hot happens at the
    model boundary). ``control_mask`` is True where the cell is a control.
    """

    outcomes: np.ndarray
    covariates: np.ndarray
    treatments: np.ndarray
    control_mask: np.ndarray
    latents: Optional[np.ndarray] = None
    gene_names: Optional[list[str]] = None
    dims: Optional[LatentDims] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        if self.outcomes.ndim != 2:
            raise DimensionError("outcomes must be a 2-d (cells x genes) matrix")
        n = self.outcomes.shape[0]
        self.covariates = np.asarray(self.covariates)
        self.treatments = np.asarray(self.treatments)
        self.control_mask = np.asarray(self.control_mask, dtype=bool)
        for name, arr in (
            ("covariates", self.covariates),
            ("treatments", self.treatments),
            ("control_mask", self.control_mask),
        ):
            if arr.shape[0] != n:
                raise DimensionError(f"{name} has {arr.shape[0]} rows, outcomes has {n}")
        if self.latents is not None:
            self.latents = np.asarray(self.latents, dtype=np.float64)
            if self.latents.shape[0] != n:
                raise DimensionError("latents row count does not match outcomes")
        if not np.isfinite(self.outcomes).all():
            raise DomainError("outcomes contain non-finite entries")
        if self.latents is not None and not np.isfinite(self.latents).all():
            raise DomainError("latents contain non-finite entries")

    @property
    def n_cells(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_genes(self) -> int:
        return self.outcomes.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            outcomes=self.outcomes[idx],
            covariates=self.covariates[idx],
            treatments=self.treatments[idx],
            control_mask=self.control_mask[idx],
            latents=None if self.latents is None else self.latents[idx],
            gene_names=self.gene_names,
            dims=self.dims,
            meta=dict(self.meta),
        )

    def latent_block(self, block: str) -> np.ndarray:
        """Ground-truth latent columns for one of 'x', 'tx', 't'."""
        if self.latents is None:
            raise DomainError("dataset carries no ground-truth latents")
        if self.dims is None:
            raise DomainError("dataset carries latents but no block dimensions")
        sl = dict(zip(("x", "tx", "t"), self.dims.slices()))[block]
        return self.latents[:, sl]


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over components."""
    if q.mean.shape != p.mean.shape:
        raise DimensionError(
            f"q has shape {tuple(q.mean.shape)}, p has shape {tuple(p.mean.shape)}"
        )
    log_ratio = p.log_scale - q.log_scale
    var_q = (2.0 * q.log_scale).exp()
    var_p = (2.0 * p.log_scale).exp()
    per_comp = log_ratio + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p) - 0.5
    return per_comp.sum(dim=-1)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of the angle between two vectors; 0 when either norm vanishes."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    values, _ = cosine_rows(a.reshape(1, -1), b.reshape(1, -1))
    return values[0]


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise cosine similarity with a degeneracy mask for zero-norm rows.

    Degenerate rows report similarity 0 rather than raising: zero latents occur
    transiently during training and must not abort a step.
    """
    if a.shape != b.shape:
        raise DimensionError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    degenerate = (na <= COSINE_EPS) | (nb <= COSINE_EPS)
    denom = (na * nb).clamp_min(COSINE_EPS)
    values = (a * b).sum(dim=-1) / denom
    values = torch.where(degenerate, torch.zeros_like(values), values)
    return values, degenerate


def reparameterize(g: DiagGaussian, eps: torch.Tensor) -> torch.Tensor:
    """mean + scale * eps; differentiable in the Gaussian parameters."""
    eps = torch.as_tensor(eps, dtype=g.mean.dtype)
    if eps.shape != g.mean.shape:
        raise DimensionError(
            f"eps shape {tuple(eps.shape)} != parameter shape {tuple(g.mean.shape)}"
        )
    return g.mean + g.scale * eps


def cross_entropy(probs: torch.Tensor, label: int) -> torch.Tensor:
    """Negative log-probability of ``label`` with floored probabilities."""
    probs = torch.as_tensor(probs)
    if probs.ndim != 1:
        raise DimensionError("probs must be a 1-d simplex vector")
    total = float(probs.detach().sum())
    if abs(total - 1.0) > 1e-6:
        raise DomainError(f"probs sum to {total}, not 1")
    if not (0 <= label < probs.shape[0]):
        raise IndexError(f"label {label} out of range for {probs.shape[0]} classes")
    return -probs[label].clamp(PROB_FLOOR, 1.0).log()


def binary_cross_entropy(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean BCE with probabilities floored away from 0 and 1.

    The clamp must stay representable: 1 - 1e-12 rounds to 1 in float32, so
    the bound widens to the dtype's epsilon when needed.
    """
    eps = max(PROB_FLOOR, float(torch.finfo(p.dtype).eps))
    p = p.clamp(eps, 1.0 - eps)
    target = target.to(p.dtype)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def gaussian_nll(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Unit-scale Gaussian negative log-likelihood per row, summed over genes."""
    if y.shape != y_hat.shape:
        raise DimensionError(f"shapes {tuple(y.shape)} and {tuple(y_hat.shape)} differ")
    k = y.shape[-1]
    return 0.5 * ((y - y_hat) ** 2).sum(dim=-1) + 0.5 * k * math.log(2.0 * math.pi)
