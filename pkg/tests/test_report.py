import json

import numpy as np
import pytest

from fcr.core import LatentDims
from fcr.losses import LossWeights
from fcr.metrics.report import MetricsReport, evaluate_model, latent_means
from fcr.simulate import SimConfig, generate_synthetic
from fcr.train import TrainConfig, build_model_config, train


@pytest.fixture(scope="module")
def trained():
    ds = generate_synthetic(SimConfig(sample_count=1200, y_dim=24, seed=8))
    mc = build_model_config(ds, LatentDims(1, 4, 1), hidden=32, depth=1,
                            embed_width=8)
    cfg = TrainConfig(epochs=4, batch_size=400, disc_steps=1,
                      weights=LossWeights(1, 0.5, 0.5), seed=8)
    return ds, train(ds, mc, cfg)


def small_report(ds, result, seed=0):
    return evaluate_model(
        result, ds, result.splits, seed=seed, knn=10, resolution=1.0,
        hsic_permutations=30, kci_samples=80, kci_repeats=2, max_cells=150,
        deg_top_k=5,
    )


class TestEvaluateModel:
    def test_report_has_required_keys(self, trained):
        ds, result = trained
        report = small_report(ds, result)
        d = report.to_dict()
        for key in ("mcc", "nmi_x", "nmi_t", "nmi_xt", "r2", "deg_mse"):
            assert key in d
        assert d["mcc"] is not None
        assert 0.0 <= d["mcc"] <= 1.0
        assert d["r2"] is not None and d["r2"] <= 1.0
        assert set(d["kci"]) == {
            "z_x_indep_t_given_x", "z_t_indep_x_given_t",
            "z_t_indep_z_tx_given_t", "z_x_indep_z_tx_given_x",
        }
        for values in d["kci"].values():
            assert len(values) == 2
            assert all(0.0 <= p <= 1.0 for p in values)
        assert set(d["hsic"]) == {"z_t_vs_t", "z_x_vs_x"}

    def test_deterministic_given_seed(self, trained):
        ds, result = trained
        a = small_report(ds, result, seed=5).to_json()
        b = small_report(ds, result, seed=5).to_json()
        assert a == b

    def test_json_round_trip(self, trained):
        ds, result = trained
        report = small_report(ds, result)
        again = MetricsReport.from_json(report.to_json())
        assert again.to_dict() == report.to_dict()

    def test_latent_means_shapes(self, trained):
        ds, result = trained
        rows = np.arange(50)
        z_x, z_tx, z_t = latent_means(result, ds, rows)
        assert z_x.shape == (50, 1)
        assert z_tx.shape == (50, 4)
        assert z_t.shape == (50, 1)


class TestReportValidation:
    def test_r2_cannot_exceed_one(self):
        with pytest.raises(ValueError):
            MetricsReport(mcc=None, nmi_x=None, nmi_t=None, nmi_xt=None,
                          r2=1.5, deg_mse=None)

    def test_kci_p_values_range_checked(self):
        with pytest.raises(ValueError):
            MetricsReport(mcc=None, nmi_x=None, nmi_t=None, nmi_xt=None,
                          r2=None, deg_mse=None, kci={"a": [1.7]})
