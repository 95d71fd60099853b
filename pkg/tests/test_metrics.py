import itertools
import math

import numpy as np
import pytest
from scipy.stats import ttest_ind

from fcr.core import Dataset, DimensionError, LatentDims
from fcr.metrics.mcc import mcc
from fcr.metrics.nmi import nmi
from fcr.metrics.prediction import (
    counterfactual_predict,
    deg_mse,
    r2_score,
    welch_t,
)


class TestMcc:
    def test_identity(self):
        z = np.random.default_rng(0).normal(size=(200, 4))
        assert mcc(z, z).mcc == pytest.approx(1.0)

    def test_permutation_and_monotone_transforms(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(300, 4))
        transforms = [np.exp, np.tanh, lambda v: v**3, lambda v: 2 * v - 7]
        est = np.column_stack([transforms[j](z[:, j]) for j in range(4)])
        est = est[:, [2, 0, 3, 1]]
        result = mcc(z, est, correlation="rank")
        assert result.mcc == pytest.approx(1.0, abs=1e-9)
        # The assignment undoes the column permutation.
        assert result.permutation.tolist() == [1, 3, 0, 2]

    def test_linear_mode_catches_linear_maps(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(500, 3))
        est = 3.0 * z[:, [1, 2, 0]] + 5.0
        assert mcc(z, est, correlation="linear").mcc == pytest.approx(1.0, abs=1e-12)

    def test_constant_column_flagged_as_zero(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(50, 2))
        est = z.copy()
        est[:, 1] = 4.2
        result = mcc(z, est)
        assert "est:1" in result.degenerate_columns
        assert np.all(result.correlations[:, 1] == 0.0)

    def test_column_permutation_invariance(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(100, 4))
        est = rng.normal(size=(100, 4)) + 0.5 * z
        base = mcc(z, est).mcc
        for perm in ([1, 0, 3, 2], [3, 2, 1, 0]):
            assert mcc(z, est[:, perm]).mcc == pytest.approx(base, abs=1e-12)

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            mcc(np.zeros((5, 2)), np.zeros((5, 3)))
        with pytest.raises(DimensionError):
            mcc(np.zeros((5, 2)), np.zeros((6, 2)))


def nmi_brute_force(a, b):
    """Direct evaluation of the normalized-MI formula, written independently:
    explicit count dictionaries and log sums, no array tricks."""
    n = len(a)
    c_a = {}
    c_b = {}
    c_ab = {}
    for ai, bi in zip(a, b):
        c_a[ai] = c_a.get(ai, 0) + 1
        c_b[bi] = c_b.get(bi, 0) + 1
        c_ab[(ai, bi)] = c_ab.get((ai, bi), 0) + 1
    p_a = {k: v / n for k, v in c_a.items()}
    p_b = {k: v / n for k, v in c_b.items()}
    p_ab = {k: v / n for k, v in c_ab.items()}
    h_a = -sum(p * math.log(p) for p in p_a.values())
    h_b = -sum(p * math.log(p) for p in p_b.values())
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    mi = sum(p * math.log(p / (p_a[k1] * p_b[k2]))
             for (k1, k2), p in p_ab.items())
    return 2.0 * mi / (h_a + h_b)


class TestNmi:
    def test_identical_up_to_relabeling(self):
        assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_exactly_factorizing_joint(self):
        assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-15)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = rng.integers(0, 4, 10)
            b = rng.integers(0, 4, 10)
            v = nmi(a, b)
            assert 0.0 <= v <= 1.0 + 1e-12
            assert v == pytest.approx(nmi(b, a), abs=1e-12)

    def test_matches_brute_force_on_random_labelings(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            a = rng.integers(0, 4, 10)
            b = rng.integers(0, 4, 10)
            assert nmi(a, b) == pytest.approx(nmi_brute_force(a, b), abs=1e-12)

    def test_degenerate_single_class(self):
        value, flag = nmi([7, 7, 7], [7, 7, 7], with_flag=True)
        assert value == 1.0 and flag
        value, flag = nmi([1, 1, 1], [0, 1, 2], with_flag=True)
        assert value == 0.0 and flag

    def test_exhaustive_six_elements_three_classes(self):
        # Every pair of labelings of 6 elements into at most 3 classes,
        # deduplicated through canonical relabeling.
        def canonical(labels):
            remap = {}
            out = []
            for v in labels:
                remap.setdefault(v, len(remap))
                out.append(remap[v])
            return tuple(out)

        reps = sorted({canonical(c) for c in itertools.product(range(3), repeat=6)})
        for a in reps:
            for b in reps:
                assert nmi(a, b) == pytest.approx(nmi_brute_force(a, b), abs=1e-12)

    def test_length_validation(self):
        with pytest.raises(DimensionError):
            nmi([0, 1], [0, 1, 2])


class TestR2:
    def test_perfect(self):
        y = np.random.default_rng(7).normal(size=(10, 3))
        assert r2_score(y, y) == pytest.approx(1.0)

    def test_grand_mean_baseline(self):
        y = np.random.default_rng(8).normal(size=(20, 4))
        pred = np.full_like(y, y.mean())
        assert r2_score(y, pred) == pytest.approx(0.0, abs=1e-12)

    def test_arithmetic_example(self):
        assert r2_score(np.array([1.0, 2.0, 3.0]),
                        np.array([1.0, 2.0, 2.0])) == pytest.approx(0.5)

    def test_constant_target_flagged(self):
        value, flag = r2_score(np.ones((3, 2)), np.zeros((3, 2)), with_flag=True)
        assert math.isnan(value) and flag

    def test_one_line_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            y = rng.normal(size=(15, 4))
            p = rng.normal(size=(15, 4))
            oracle = 1 - ((y - p) ** 2).sum() / ((y - y.mean()) ** 2).sum()
            assert r2_score(y, p) == pytest.approx(oracle, abs=1e-12)

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            r2_score(np.zeros((2, 2)), np.zeros((2, 3)))


def grouped_dataset(seed=0):
    rng = np.random.default_rng(seed)
    n = 120
    t = np.repeat([0.0, 1.0, 2.0], 40)
    x = np.tile(np.repeat([10.0, 20.0], 20), 3)
    y = rng.normal(size=(n, 5))
    return Dataset(outcomes=y, covariates=x, treatments=t, control_mask=t == 0.0)


class TestDegMse:
    def test_zero_for_perfect_predictions(self):
        ds = grouped_dataset()
        treated = np.flatnonzero(~ds.control_mask)
        result = deg_mse(ds, ds.outcomes[treated], top_k=3)
        assert result.value == pytest.approx(0.0)
        assert result.groups_used == 4

    def test_top_k_clamped(self):
        ds = grouped_dataset()
        treated = np.flatnonzero(~ds.control_mask)
        result = deg_mse(ds, ds.outcomes[treated], top_k=50)
        assert result.top_k_clamped

    def test_obvious_differential_gene_ranks_first(self):
        rng = np.random.default_rng(1)
        n = 60
        t = np.repeat([0.0, 1.0], 30)
        x = np.full(n, 5.0)
        y = rng.normal(size=(n, 3)) * 0.1
        y[t == 1.0, 1] += 10.0  # gene 1 is strongly differential
        ds = Dataset(outcomes=y, covariates=x, treatments=t, control_mask=t == 0.0)
        treated = np.flatnonzero(~ds.control_mask)
        result = deg_mse(ds, ds.outcomes[treated], top_k=1)
        (top,) = result.top_genes[(5.0, 1.0)]
        assert top == 1
        # Oracle: exhaustive Welch statistics via scipy.
        stats = [abs(ttest_ind(y[t == 1.0][:, j], y[t == 0.0][:, j],
                               equal_var=False).statistic) for j in range(3)]
        assert int(np.argmax(stats)) == 1

    def test_welch_matches_scipy(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(25, 6))
        b = rng.normal(loc=0.3, size=(40, 6)) * 1.7
        mine = welch_t(a, b)
        theirs = ttest_ind(a, b, equal_var=False).statistic
        np.testing.assert_allclose(mine, theirs, rtol=1e-10)

    def test_group_without_controls_skipped(self):
        ds = grouped_dataset()
        # Remove controls for covariate 20 only.
        keep = ~(ds.control_mask & (ds.covariates == 20.0))
        ds2 = ds.subset(np.flatnonzero(keep))
        treated = np.flatnonzero(~ds2.control_mask)
        result = deg_mse(ds2, ds2.outcomes[treated], top_k=2)
        assert result.groups_skipped == 2
        assert result.groups_used == 2

    def test_prediction_alignment_validated(self):
        ds = grouped_dataset()
        with pytest.raises(DimensionError):
            deg_mse(ds, np.zeros((3, 5)))


class TestCounterfactual:
    @pytest.fixture(scope="class")
    def trained(self):
        from fcr.simulate import SimConfig, generate_synthetic
        from fcr.train import TrainConfig, train, build_model_config
        from fcr.losses import LossWeights
        ds = generate_synthetic(SimConfig(sample_count=900, seed=5))
        mc = build_model_config(ds, LatentDims(1, 4, 1), hidden=32, depth=1,
                                embed_width=8)
        result = train(ds, mc, TrainConfig(epochs=3, batch_size=300, disc_steps=1,
                                           weights=LossWeights(1, 0.5, 0.5), seed=5))
        return ds, result

    def test_controls_to_themselves_is_reconstruction(self, trained):
        ds, result = trained
        controls = ds.subset(np.flatnonzero(ds.control_mask)[:40])
        cf = counterfactual_predict(result, controls, controls)
        assert cf.skipped_rows == 0
        np.testing.assert_array_equal(cf.reference_rows, cf.control_rows)
        from fcr.metrics.report import latent_means
        import torch
        z_x, z_tx, z_t = latent_means(result, controls, np.arange(40))
        with torch.no_grad():
            direct = result.model.decode(
                torch.as_tensor(np.hstack([z_x, z_tx, z_t]), dtype=torch.float32)
            ).numpy()
        np.testing.assert_allclose(cf.predictions, result.scaler.inverse(direct),
                                   rtol=1e-5, atol=1e-5)

    def test_output_shape_and_pairing(self, trained):
        ds, result = trained
        controls = ds.subset(np.flatnonzero(ds.control_mask)[:30])
        treated_rows = np.flatnonzero(~ds.control_mask)[:50]
        refs = ds.subset(treated_rows)
        cf = counterfactual_predict(result, controls, refs)
        assert cf.predictions.shape == (len(cf.reference_rows), ds.n_genes)
        for r, c in zip(cf.reference_rows, cf.control_rows):
            assert refs.covariates[r] == controls.covariates[c]

    def test_missing_covariate_match_skipped(self, trained):
        ds, result = trained
        ctl_rows = np.flatnonzero(ds.control_mask & (ds.covariates == 100.0))[:10]
        controls = ds.subset(ctl_rows)
        treated_rows = np.flatnonzero(~ds.control_mask)[:40]
        refs = ds.subset(treated_rows)
        cf = counterfactual_predict(result, controls, refs)
        expected_skips = int((refs.covariates != 100.0).sum())
        assert cf.skipped_rows == expected_skips

    def test_target_treatment_filter(self, trained):
        ds, result = trained
        controls = ds.subset(np.flatnonzero(ds.control_mask)[:30])
        refs = ds.subset(np.flatnonzero(~ds.control_mask)[:60])
        cf = counterfactual_predict(result, controls, refs, target_treatment=2.0)
        kept_treatments = refs.treatments[refs.treatments == 2.0]
        assert len(cf.reference_rows) + cf.skipped_rows == len(kept_treatments)
