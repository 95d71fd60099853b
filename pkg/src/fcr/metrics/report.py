"""Assembling the full evaluation report for a trained model."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..core import Dataset
from .independence import hsic, kci_protocol
from .leiden import cluster_labels
from .mcc import mcc
from .nmi import nmi
from .prediction import counterfactual_predict, deg_mse, r2_score


@dataclass
class MetricsReport:
    mcc: Optional[float]
    nmi_x: Optional[float]
    nmi_t: Optional[float]
    nmi_xt: Optional[float]
    r2: Optional[float]
    deg_mse: Optional[float]
    kci: dict[str, list[float]] = field(default_factory=dict)
    hsic: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.r2 is not None and not math.isnan(self.r2) and self.r2 > 1.0 + 1e-9:
            raise ValueError(f"r2 must not exceed 1, got {self.r2}")
        for name, values in self.kci.items():
            arr = np.asarray(values, dtype=float)
            if arr.size and ((arr < -1e-12) | (arr > 1 + 1e-12)).any():
                raise ValueError(f"kci p-values for {name!r} outside [0, 1]")
        for name, entry in self.hsic.items():
            p = entry.get("p_value")
            if p is not None and not (0.0 <= p <= 1.0):
                raise ValueError(f"hsic p-value for {name!r} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "mcc": self.mcc,
            "nmi_x": self.nmi_x,
            "nmi_t": self.nmi_t,
            "nmi_xt": self.nmi_xt,
            "r2": self.r2,
            "deg_mse": self.deg_mse,
            "kci": self.kci,
            "hsic": self.hsic,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(**d)


def latent_means(bundle, ds: Dataset, rows: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior mean of each latent block for the given dataset rows."""
    model = bundle.model
    with torch.no_grad():
        y = torch.as_tensor(bundle.scaler.transform(ds.outcomes[rows]),
                            dtype=torch.float32)
        t_idx = torch.as_tensor(bundle.t_vocab.encode(np.asarray(ds.treatments)[rows]))
        x_idx = torch.as_tensor(bundle.x_vocab.encode(np.asarray(ds.covariates)[rows]))
        q = model.posterior_params(y, model.encode_t(t_idx), model.encode_x(x_idx))
        return q.x.mean.numpy(), q.tx.mean.numpy(), q.t.mean.numpy()


def evaluate_model(bundle, ds: Dataset, splits, *, seed: int = 0,
                   knn: int = 15, resolution: float = 1.0,
                   hsic_permutations: int = 300, kci_samples: int = 2000,
                   kci_repeats: int = 20, max_cells: int = 2000,
                   deg_top_k: int = 20) -> MetricsReport:
    """Compute the quantitative evaluation suite on the held-out splits.

    Identifiability (MCC against ground-truth latents, synthetic data only),
    per-block clustering NMIs, kernel independence diagnostics, and
    counterfactual prediction quality (R2 and top-DEG MSE).
    """
    test_rows = np.asarray(splits.test)
    z_x, z_tx, z_t = latent_means(bundle, ds, test_rows)
    covs = np.asarray(ds.covariates)[test_rows]
    treats = np.asarray(ds.treatments)[test_rows]
    t_codes = bundle.t_vocab.encode(treats).astype(np.float64)[:, None]
    x_codes = bundle.x_vocab.encode(covs).astype(np.float64)[:, None]

    mcc_value = None
    if ds.latents is not None and ds.dims is not None \
            and ds.dims.n_tx == bundle.model.cfg.dims.n_tx and ds.dims.n_tx > 0:
        true_tx = ds.latent_block("tx")[test_rows]
        mcc_value = mcc(true_tx, z_tx, correlation="rank").mcc

    nmi_x = nmi_t = nmi_xt = None
    if test_rows.size >= knn + 1:
        combined = np.asarray([f"{c}|{t}" for c, t in zip(covs.tolist(), treats.tolist())])
        nmi_x = nmi(cluster_labels(z_x, knn, resolution, seed), covs)
        nmi_t = nmi(cluster_labels(z_t, knn, resolution, seed), treats)
        nmi_xt = nmi(cluster_labels(z_tx, knn, resolution, seed), combined)

    rng = np.random.default_rng(seed)
    kernel_rows = rng.permutation(test_rows.size)[:min(test_rows.size, max_cells)]
    hsic_out = {}
    for name, a, b in (("z_t_vs_t", z_t, t_codes), ("z_x_vs_x", z_x, x_codes)):
        res = hsic(a[kernel_rows], b[kernel_rows], n_permutations=hsic_permutations,
                   rng=np.random.default_rng(seed + 11))
        hsic_out[name] = {"statistic": res.statistic, "p_value": res.p_value}

    kci_out = {}
    kci_cases = {
        "z_x_indep_t_given_x": (z_x, t_codes, x_codes),
        "z_t_indep_x_given_t": (z_t, x_codes, t_codes),
        "z_t_indep_z_tx_given_t": (z_t, z_tx, t_codes),
        "z_x_indep_z_tx_given_x": (z_x, z_tx, x_codes),
    }
    for name, (a, b, c) in kci_cases.items():
        ps = kci_protocol(a, b, c, n_samples=kci_samples, repeats=kci_repeats,
                          seed=seed + 101)
        kci_out[name] = [float(p) for p in ps]

    r2_value = None
    deg_value = None
    control_rows = np.asarray(splits.prediction)
    ref_rows = test_rows[~np.asarray(ds.control_mask)[test_rows]]
    if control_rows.size and ref_rows.size:
        controls = ds.subset(control_rows)
        references = ds.subset(ref_rows)
        cf = counterfactual_predict(bundle, controls, references)
        if cf.reference_rows.size:
            true_y = references.outcomes[cf.reference_rows]
            r2_value = r2_score(true_y, cf.predictions)
            kept_global = ref_rows[cf.reference_rows]
            all_controls = np.flatnonzero(np.asarray(ds.control_mask))
            ds_deg = ds.subset(np.concatenate([kept_global, all_controls]))
            deg = deg_mse(ds_deg, cf.predictions, top_k=deg_top_k)
            deg_value = None if math.isnan(deg.value) else deg.value

    return MetricsReport(
        mcc=mcc_value,
        nmi_x=nmi_x,
        nmi_t=nmi_t,
        nmi_xt=nmi_xt,
        r2=r2_value,
        deg_mse=deg_value,
        kci=kci_out,
        hsic=hsic_out,
        metadata={
            "seed": seed,
            "config_hash": getattr(bundle, "extra", {}).get("config_hash", ""),
            "n_cells": int(ds.n_cells),
            "n_test": int(test_rows.size),
            "n_prediction": int(control_rows.size),
        },
    )
