"""Outcome-prediction metrics and counterfactual decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.stats import ranksums

from ..core import Dataset, DimensionError


def r2_score(y_true, y_pred, with_flag: bool = False):
    """1 - SSE/SST over all entries, with the grand mean as the baseline.

    A constant target leaves the score undefined; the value is then NaN and
    the degeneracy is flagged when ``with_flag`` is set.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise DimensionError(
            f"shapes differ: {y_true.shape} vs {y_pred.shape}"
        )
    flat_true = y_true.ravel()
    flat_pred = y_pred.ravel()
    sst = float(((flat_true - flat_true.mean()) ** 2).sum())
    if sst <= 0.0:
        return (math.nan, True) if with_flag else math.nan
    sse = float(((flat_true - flat_pred) ** 2).sum())
    value = 1.0 - sse / sst
    return (value, False) if with_flag else value


def welch_t(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-column Welch t-statistics between two sample groups."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.shape[0], b.shape[0]
    va = a.var(axis=0, ddof=1) if na > 1 else np.zeros(a.shape[1])
    vb = b.var(axis=0, ddof=1) if nb > 1 else np.zeros(b.shape[1])
    denom = np.sqrt(np.maximum(va / max(na, 1) + vb / max(nb, 1), 1e-24))
    return (a.mean(axis=0) - b.mean(axis=0)) / denom


def _ranksum_stats(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray([ranksums(a[:, j], b[:, j]).statistic for j in range(a.shape[1])])


@dataclass(frozen=True)
class DegMseResult:
    value: float
    groups_used: int
    groups_skipped: int
    top_k_clamped: bool
    top_genes: dict = field(default_factory=dict)


def deg_mse(ds: Dataset, predictions: np.ndarray, top_k: int = 20,
            method: str = "welch") -> DegMseResult:
    """Mean squared prediction error over the most differential genes.

    For each (covariate, treatment) group of non-control cells, genes are
    ranked by the magnitude of a treated-vs-control two-sample statistic
    (Welch t by default, rank-sum optionally), the top ``top_k`` kept, and
    the MSE of the predictions on those genes averaged across groups.
    ``predictions`` holds one row per non-control cell in dataset order.
    """
    treated_rows = np.flatnonzero(~ds.control_mask)
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != (treated_rows.size, ds.n_genes):
        raise DimensionError(
            f"predictions shape {predictions.shape} does not match "
            f"({treated_rows.size}, {ds.n_genes}) treated cells x genes"
        )
    if method not in ("welch", "ranksum"):
        raise ValueError(f"method must be 'welch' or 'ranksum', got {method!r}")
    clamped = top_k > ds.n_genes
    k = min(top_k, ds.n_genes)

    covs = np.asarray(ds.covariates)
    treats = np.asarray(ds.treatments)
    pred_of_row = {int(r): i for i, r in enumerate(treated_rows)}
    mses = []
    skipped = 0
    top_genes: dict = {}
    pairs = sorted(
        set(zip(covs[treated_rows].tolist(), treats[treated_rows].tolist())),
        key=repr,
    )
    for cov, treat in pairs:
        group = np.flatnonzero((covs == cov) & (treats == treat) & ~ds.control_mask)
        controls = np.flatnonzero((covs == cov) & ds.control_mask)
        if controls.size == 0:
            skipped += 1
            continue
        stats_fn = welch_t if method == "welch" else _ranksum_stats
        scores = np.abs(stats_fn(ds.outcomes[group], ds.outcomes[controls]))
        top = np.argsort(-scores, kind="stable")[:k]
        top_genes[(cov, treat)] = top
        pred_idx = [pred_of_row[int(r)] for r in group]
        diff = predictions[pred_idx][:, top] - ds.outcomes[group][:, top]
        mses.append(float((diff**2).mean()))
    value = float(np.mean(mses)) if mses else math.nan
    return DegMseResult(
        value=value,
        groups_used=len(mses),
        groups_skipped=skipped,
        top_k_clamped=clamped,
        top_genes=top_genes,
    )


@dataclass
class CounterfactualResult:
    """Predicted outcomes for reference cells decoded with control context.

    ``reference_rows`` indexes the reference dataset row each prediction
    corresponds to; ``control_rows`` the control cell supplying the covariate
    block; ``skipped_rows`` counts references without a covariate match.
    """

    predictions: np.ndarray
    reference_rows: np.ndarray
    control_rows: np.ndarray
    skipped_rows: int


def counterfactual_predict(bundle, controls: Dataset, references: Dataset,
                           target_treatment=None) -> CounterfactualResult:
    """Decode each reference cell's interaction and treatment blocks together
    with a covariate-matched control cell's covariate block.

    ``bundle`` provides ``model``, ``scaler``, ``t_vocab`` and ``x_vocab``
    (a checkpoint or train result). Posterior means are used throughout.
    References are paired with controls of the same covariate label in order
    of appearance, cycling through the controls when references outnumber
    them; pairing the control set with itself is therefore the identity and
    reduces to plain reconstruction.
    """
    model = bundle.model
    scaler = bundle.scaler
    if target_treatment is not None:
        keep = np.flatnonzero(np.asarray(references.treatments) == target_treatment)
        references = references.subset(keep)

    ref_keep: list[int] = []
    ctl_pick: list[int] = []
    skipped = 0
    ctl_by_label: dict = {}
    for i, label in enumerate(np.asarray(controls.covariates).tolist()):
        ctl_by_label.setdefault(label, []).append(i)
    seen: dict = {}
    for i, label in enumerate(np.asarray(references.covariates).tolist()):
        pool = ctl_by_label.get(label)
        if not pool:
            skipped += 1
            continue
        k = seen.get(label, 0)
        seen[label] = k + 1
        ref_keep.append(i)
        ctl_pick.append(pool[k % len(pool)])

    if not ref_keep:
        return CounterfactualResult(
            predictions=np.zeros((0, controls.n_genes)),
            reference_rows=np.asarray([], dtype=int),
            control_rows=np.asarray([], dtype=int),
            skipped_rows=skipped,
        )

    ref_rows = np.asarray(ref_keep, dtype=int)
    ctl_rows = np.asarray(ctl_pick, dtype=int)
    with torch.no_grad():
        q_ref = _posterior_means(bundle, references, ref_rows)
        q_ctl = _posterior_means(bundle, controls, ctl_rows)
        z = torch.cat([q_ctl.x.mean, q_ref.tx.mean, q_ref.t.mean], dim=-1)
        decoded = model.decode(z).numpy()
    return CounterfactualResult(
        predictions=scaler.inverse(decoded),
        reference_rows=ref_rows,
        control_rows=ctl_rows,
        skipped_rows=skipped,
    )


def _posterior_means(bundle, ds: Dataset, rows: np.ndarray):
    model = bundle.model
    y = torch.as_tensor(bundle.scaler.transform(ds.outcomes[rows]),
                        dtype=torch.float32)
    t_idx = torch.as_tensor(bundle.t_vocab.encode(np.asarray(ds.treatments)[rows]))
    x_idx = torch.as_tensor(bundle.x_vocab.encode(np.asarray(ds.covariates)[rows]))
    return model.posterior_params(y, model.encode_t(t_idx), model.encode_x(x_idx))
