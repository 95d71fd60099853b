"""The factorized-representation networks: conditional priors with a Hadamard
interaction, mean-field posteriors, decoder, treatment classifier and the two
permutation discriminators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import DiagGaussian, DimensionError, LatentDims, LatentSample, reparameterize
from .networks import MLP, GaussianNet


@dataclass
class ModelConfig:
    dims: LatentDims
    y_dim: int
    t_classes: int
    x_classes: int
    hidden: int = 128
    depth: int = 2
    embed_width: int = 32
    slope: float = 0.01
    # Continuous covariates bypass one-hot encoding; x_classes is then the
    # covariate vector width.
    x_continuous: bool = False

    def to_dict(self) -> dict:
        return {
            "dims": {"n_x": self.dims.n_x, "n_tx": self.dims.n_tx, "n_t": self.dims.n_t},
            "y_dim": self.y_dim,
            "t_classes": self.t_classes,
            "x_classes": self.x_classes,
            "hidden": self.hidden,
            "depth": self.depth,
            "embed_width": self.embed_width,
            "slope": self.slope,
            "x_continuous": self.x_continuous,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        dims = d.pop("dims")
        return cls(dims=LatentDims(**dims), **d)


@dataclass
class GaussianTriple:
    """Block-keyed diagonal Gaussians; used for both priors and posteriors."""

    x: DiagGaussian
    tx: DiagGaussian
    t: DiagGaussian

    def sample(self, generator: Optional[torch.Generator] = None) -> LatentSample:
        out = []
        for g in (self.x, self.tx, self.t):
            eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
            out.append(reparameterize(g, eps))
        return LatentSample(*out)

    def means(self) -> LatentSample:
        return LatentSample(self.x.mean, self.tx.mean, self.t.mean)


PriorTriple = GaussianTriple
PosteriorTriple = GaussianTriple


class FcrModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        kw = dict(hidden=cfg.hidden, depth=cfg.depth, slope=cfg.slope)
        t_dim, x_dim = cfg.t_classes, cfg.x_classes

        self.prior_x = GaussianNet(x_dim, dims.n_x, **kw)
        self.prior_t = GaussianNet(t_dim, dims.n_t, **kw)
        self.embed_x = MLP(x_dim, cfg.embed_width, **kw)
        self.embed_t = MLP(t_dim, cfg.embed_width, **kw)
        self.prior_tx = GaussianNet(cfg.embed_width, dims.n_tx, **kw)

        self.post_x = GaussianNet(x_dim + cfg.y_dim, dims.n_x, **kw)
        self.post_t = GaussianNet(t_dim + cfg.y_dim, dims.n_t, **kw)
        self.post_tx = GaussianNet(t_dim + x_dim + cfg.y_dim, dims.n_tx, **kw)

        self.decoder = MLP(dims.n, cfg.y_dim, **kw)
        # Zero-initialized output heads start the classifier uniform and the
        # discriminators at 0.5.
        self.classifier = MLP(2 * (dims.n_t + dims.n_tx), cfg.t_classes,
                              zero_init_out=True, **kw)
        self.dis_x = MLP(dims.n_x + dims.n_tx + x_dim, 1, zero_init_out=True, **kw)
        self.dis_t = MLP(dims.n_t + dims.n_tx + t_dim, 1, zero_init_out=True, **kw)

    # -- encodings ---------------------------------------------------------

    def encode_t(self, t_idx: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.one_hot(
            t_idx.long(), self.cfg.t_classes
        ).to(next(self.parameters()).dtype)

    def encode_x(self, x_val: torch.Tensor) -> torch.Tensor:
        if self.cfg.x_continuous:
            x = torch.as_tensor(x_val, dtype=next(self.parameters()).dtype)
            return x if x.ndim == 2 else x[:, None]
        return torch.nn.functional.one_hot(
            x_val.long(), self.cfg.x_classes
        ).to(next(self.parameters()).dtype)

    # -- generative and inference heads -------------------------------------

    def prior_params(self, t_enc: torch.Tensor, x_enc: torch.Tensor) -> PriorTriple:
        self._check_width("t", t_enc, self.cfg.t_classes)
        self._check_width("x", x_enc, self.cfg.x_classes)
        interaction = self.embed_x(x_enc) * self.embed_t(t_enc)
        return GaussianTriple(
            x=self.prior_x(x_enc),
            tx=self.prior_tx(interaction),
            t=self.prior_t(t_enc),
        )

    def posterior_params(self, y: torch.Tensor, t_enc: torch.Tensor,
                         x_enc: torch.Tensor) -> PosteriorTriple:
        self._check_width("y", y, self.cfg.y_dim)
        self._check_width("t", t_enc, self.cfg.t_classes)
        self._check_width("x", x_enc, self.cfg.x_classes)
        return GaussianTriple(
            x=self.post_x(torch.cat([x_enc, y], dim=-1)),
            tx=self.post_tx(torch.cat([t_enc, x_enc, y], dim=-1)),
            t=self.post_t(torch.cat([t_enc, y], dim=-1)),
        )

    def decode(self, z) -> torch.Tensor:
        if isinstance(z, LatentSample):
            z.check_dims(self.cfg.dims)
            z = z.concat()
        if z.shape[-1] != self.cfg.dims.n:
            raise DimensionError(
                f"latent width {z.shape[-1]} != configured {self.cfg.dims.n}"
            )
        return self.decoder(z)

    def classify_treatment(self, z_t, z_tx, z_t0, z_tx0) -> torch.Tensor:
        dims = self.cfg.dims
        for name, z, want in (("z_t", z_t, dims.n_t), ("z_tx", z_tx, dims.n_tx),
                              ("z_t0", z_t0, dims.n_t), ("z_tx0", z_tx0, dims.n_tx)):
            self._check_width(name, z, want)
        logits = self.classifier(torch.cat([z_t, z_tx, z_t0, z_tx0], dim=-1))
        return torch.softmax(logits, dim=-1)

    def discriminate(self, block: torch.Tensor, z_tx: torch.Tensor,
                     cond_enc: torch.Tensor, side: str) -> torch.Tensor:
        """Probability that z_tx was permuted within its condition group."""
        dims = self.cfg.dims
        if side == "x":
            net, block_dim, cond_dim = self.dis_x, dims.n_x, self.cfg.x_classes
        elif side == "t":
            net, block_dim, cond_dim = self.dis_t, dims.n_t, self.cfg.t_classes
        else:
            raise ValueError(f"side must be 'x' or 't', got {side!r}")
        self._check_width("block", block, block_dim)
        self._check_width("z_tx", z_tx, dims.n_tx)
        self._check_width("condition", cond_enc, cond_dim)
        logit = net(torch.cat([block, z_tx, cond_enc], dim=-1)).squeeze(-1)
        # Bounded logit caps the adversarial reward for inflating latents.
        return torch.sigmoid(logit.clamp(-15.0, 15.0))

    @staticmethod
    def _check_width(name: str, tensor: torch.Tensor, want: int) -> None:
        if tensor.shape[-1] != want:
            raise DimensionError(f"{name} has width {tensor.shape[-1]}, expected {want}")

    def model_parameters(self):
        """Parameters of the min player: generative, inference and classifier."""
        for name, p in self.named_parameters():
            if not name.startswith(("dis_x", "dis_t")):
                yield p

    def discriminator_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith(("dis_x", "dis_t")):
                yield p


@dataclass
class PermutationBatch:
    """Rows fed to a permutation discriminator.

    ``base_index`` points at the row providing the companion block and the
    condition; ``tx_source`` points at the row whose interaction latents were
    used (differs from base_index exactly on permuted copies).
    """

    tx_rows: torch.Tensor
    base_index: np.ndarray
    tx_source: np.ndarray
    permuted: torch.Tensor
    skipped_groups: int = 0
    permuted_groups: int = 0

    def __len__(self) -> int:
        return self.tx_rows.shape[0]


def _sattolo_cycle(idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random cyclic permutation: a single-pass derangement of idx."""
    out = idx.copy()
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i))
        out[i], out[j] = out[j], out[i]
    return out


def permute_within_condition(z_tx: torch.Tensor, labels: Sequence,
                             rng: np.random.Generator) -> PermutationBatch:
    """Shuffle interaction latents only among rows sharing a condition label.

    Emits every input row unpermuted (flag False) and, for each group of size
    at least 2, a deranged copy of the group (flag True), yielding a balanced
    mix up to singleton groups, which are counted and skipped.
    """
    labels = np.asarray(labels)
    if z_tx.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"{z_tx.shape[0]} latent rows but {labels.shape[0]} condition labels"
        )
    n = z_tx.shape[0]
    base = [np.arange(n)]
    source = [np.arange(n)]
    skipped = 0
    permuted_groups = 0
    for value in np.unique(labels):
        group = np.flatnonzero(labels == value)
        if group.size < 2:
            skipped += 1
            continue
        base.append(group)
        source.append(_sattolo_cycle(group, rng))
        permuted_groups += 1
    base_index = np.concatenate(base)
    tx_source = np.concatenate(source)
    flags = np.zeros(base_index.shape[0], dtype=bool)
    flags[n:] = True
    return PermutationBatch(
        tx_rows=z_tx[torch.as_tensor(tx_source)],
        base_index=base_index,
        tx_source=tx_source,
        permuted=torch.as_tensor(flags),
        skipped_groups=skipped,
        permuted_groups=permuted_groups,
    )
