"""Synthetic perturbation-response data with known latents, plus a numerical
diagnostic for the interaction-identifiability rank condition."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, DomainError, LatentDims


class DesignInsufficiencyError(ValueError):
    """The (treatment, covariate) supports cannot provide the switched
    experimental design needed by the interaction rank condition."""


@dataclass(frozen=True)
class SimConfig:
    sample_count: int = 5000
    t_support: tuple[float, ...] = (1.0, 2.0, 3.0)
    x_support: tuple[float, ...] = (100.0, 1000.0, 5000.0)
    dims: LatentDims = field(default_factory=lambda: LatentDims(1, 4, 1))
    y_dim: int = 96
    mixer_depth: int = 2
    mixer_activation: float = 0.2
    interaction_mean_coeffs: Optional[tuple[float, ...]] = None
    # "product": interaction means are coeffs_j * x * t with unit variance.
    # "nonlinear": oscillatory means and heteroscedastic variances (see
    # interaction_law); the mode under which the rank condition is satisfiable.
    mean_mode: str = "product"
    # Treatment level whose cells are marked as controls; None leaves the
    # control mask empty. The generative law is unchanged either way.
    control_t: Optional[float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise DomainError("sample_count must be >= 1")
        if not self.t_support or not self.x_support:
            raise DomainError("treatment and covariate supports must be nonempty")
        if self.y_dim < self.dims.n:
            raise DomainError("y_dim must be at least the total latent dimension")
        if self.mean_mode not in ("product", "nonlinear"):
            raise DomainError(f"unknown mean_mode {self.mean_mode!r}")
        if self.mixer_depth < 1:
            raise DomainError("mixer_depth must be >= 1")
        if self.control_t is not None and self.control_t not in self.t_support:
            raise DomainError("control_t must be a member of t_support")

    def coeffs(self) -> np.ndarray:
        if self.interaction_mean_coeffs is None:
            return np.ones(self.dims.n_tx)
        c = np.asarray(self.interaction_mean_coeffs, dtype=float)
        if c.shape != (self.dims.n_tx,):
            raise DomainError(
                f"interaction_mean_coeffs needs length {self.dims.n_tx}, got {c.shape}"
            )
        return c


def rank_demo_config(**overrides) -> SimConfig:
    """Nonlinear-mean configuration documented to satisfy the rank condition.

    The product-mean default cannot: its difference vectors are collinear.
    Satisfiability needs at least 2*n_tx doubly-switched conditions, i.e.
    (|T|-1)*(|X|-1) >= 2*n_tx, hence the widened covariate support here.
    """
    base = dict(
        mean_mode="nonlinear",
        t_support=(1.0, 2.0, 3.0),
        x_support=(100.0, 500.0, 1000.0, 2500.0, 5000.0),
    )
    base.update(overrides)
    return SimConfig(**base)


def interaction_law(cfg: SimConfig, t: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-component mean and variance of the interaction block given (t, x).

    Arrays broadcast over the leading axis; returns (means, variances) with
    shape (len(t), n_tx). Component index j is 1-based in the formulas.
    """
    t = np.asarray(t, dtype=float)[:, None]
    x = np.asarray(x, dtype=float)[:, None]
    j = np.arange(1, cfg.dims.n_tx + 1, dtype=float)[None, :]
    if cfg.mean_mode == "product":
        mu = cfg.coeffs()[None, :] * (x * t)
        var = np.ones_like(mu)
    else:
        mu = np.sin((j + 1.0) * x * t / 500.0)
        var = 1.0 + 0.5 * j * np.abs(t - x / 1000.0)
    return mu, var


def _mixer_weights(rng: np.random.Generator, cfg: SimConfig) -> list[np.ndarray]:
    """Random mixing layers with unit-norm rows to avoid rank collapse."""
    sizes = [cfg.dims.n] + [cfg.y_dim] * cfg.mixer_depth
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        weights.append(w)
    return weights


def _apply_mixer(weights: Sequence[np.ndarray], slope: float, z: np.ndarray) -> np.ndarray:
    h = z
    for i, w in enumerate(weights):
        h = h @ w.T
        if i < len(weights) - 1:
            h = np.where(h >= 0, h, slope * h)
    return h


def generate_synthetic(cfg: SimConfig) -> Dataset:
    """Draw labels, latents and mixed outcomes under the configured laws."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.sample_count
    dims = cfg.dims

    t = rng.choice(np.asarray(cfg.t_support, dtype=float), size=n)
    x = rng.choice(np.asarray(cfg.x_support, dtype=float), size=n)

    z_x = rng.normal(loc=np.repeat((x / 2.0)[:, None], dims.n_x, axis=1), scale=1.0)
    z_t = rng.normal(loc=np.repeat((t / 2.0)[:, None], dims.n_t, axis=1), scale=1.0)
    mu_tx, var_tx = interaction_law(cfg, t, x)
    z_tx = rng.normal(loc=mu_tx, scale=np.sqrt(var_tx))

    z = np.concatenate([z_x, z_tx, z_t], axis=1)
    weights = _mixer_weights(rng, cfg)
    y = _apply_mixer(weights, cfg.mixer_activation, z)

    control_mask = (
        np.zeros(n, dtype=bool) if cfg.control_t is None else t == cfg.control_t
    )
    meta = {
        "sim_config": _config_dict(cfg),
        "mixer_weights": [w.tolist() for w in weights],
    }
    return Dataset(
        outcomes=y,
        covariates=x,
        treatments=t,
        control_mask=control_mask,
        latents=z,
        dims=dims,
        meta=meta,
    )


def _config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["dims"] = {"n_x": cfg.dims.n_x, "n_tx": cfg.dims.n_tx, "n_t": cfg.dims.n_t}
    return d


@dataclass(frozen=True)
class RankReport:
    matrix_rank: int
    required_rank: int
    condition_number: float
    satisfied: bool
    singular_values: tuple[float, ...] = ()

    def to_json(self) -> str:
        return json.dumps(
            {
                "matrix_rank": self.matrix_rank,
                "required_rank": self.required_rank,
                "condition_number": self.condition_number,
                "satisfied": self.satisfied,
                "singular_values": list(self.singular_values),
            },
            indent=2,
        )


RANK_TOLERANCE = 1e-10


def interaction_contrast_rows(cfg: SimConfig) -> np.ndarray:
    """One row per non-control condition: the log-density derivative contrasts.

    For Gaussian component laws the score is -(z - mu)/var and the curvature
    is -1/var, so each condition's contrast vector is affine in z with the z
    coefficient equal to the curvature contrast. Evaluating at z = 0 therefore
    captures the whole function family: row = [score contrast at 0 | curvature
    contrast], with contrast(f) = f(ti,xi) + f(t0,x0) - f(t0,xi) - f(ti,x0).
    """
    n_tx = cfg.dims.n_tx
    t_vals = sorted(set(float(v) for v in cfg.t_support))
    x_vals = sorted(set(float(v) for v in cfg.x_support))
    t0, x0 = t_vals[0], x_vals[0]
    conditions = [
        (ti, xi) for ti in t_vals for xi in x_vals if not (ti == t0 and xi == x0)
    ]
    if len(conditions) < 2 * n_tx:
        raise DesignInsufficiencyError(
            f"the supports yield {len(conditions)} non-control conditions but the "
            f"switched-experiment design needs at least {2 * n_tx} besides the "
            f"control condition ({t0}, {x0})"
        )

    def params(ti, xi):
        mu, var = interaction_law(cfg, np.array([ti]), np.array([xi]))
        return mu[0], var[0]

    mu0, var0 = params(t0, x0)
    rows = np.zeros((len(conditions), 2 * n_tx))
    for r, (ti, xi) in enumerate(conditions):
        mu_ii, var_ii = params(ti, xi)
        mu_0i, var_0i = params(t0, xi)
        mu_i0, var_i0 = params(ti, x0)
        score = (mu_ii / var_ii) + (mu0 / var0) - (mu_0i / var_0i) - (mu_i0 / var_i0)
        curvature = -(1.0 / var_ii + 1.0 / var0 - 1.0 / var_0i - 1.0 / var_i0)
        rows[r] = np.concatenate([score, curvature])
    return rows


def check_interaction_rank(cfg: SimConfig) -> RankReport:
    """Numerical rank of the stacked contrast vectors against 2*n_tx."""
    required = 2 * cfg.dims.n_tx
    if required == 0:
        return RankReport(0, 0, 1.0, True)
    rows = interaction_contrast_rows(cfg)
    svals = np.linalg.svd(rows, compute_uv=False)
    cutoff = RANK_TOLERANCE * svals[0] if svals[0] > 0 else RANK_TOLERANCE
    rank = int((svals > cutoff).sum())
    if rank >= required and svals[required - 1] > 0:
        cond = float(svals[0] / svals[required - 1])
    else:
        cond = float("inf")
    return RankReport(
        matrix_rank=rank,
        required_rank=required,
        condition_number=cond,
        satisfied=rank == required,
        singular_values=tuple(float(s) for s in svals),
    )
