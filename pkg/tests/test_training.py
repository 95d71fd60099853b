import json
import math

import numpy as np
import pytest
import torch

from fcr.core import Dataset, DomainError, LatentDims
from fcr.losses import LossWeights, StepRng, dis_loss
from fcr.model import FcrModel, ModelConfig
from fcr.simulate import SimConfig, generate_synthetic
from fcr.train import (
    CheckpointError,
    ProtocolError,
    SplitFractions,
    TrainConfig,
    TrainingDiverged,
    _cell_hash,
    build_model_config,
    encode_dataset,
    grid_search,
    load_checkpoint,
    make_batch,
    paper_default_grid,
    save_checkpoint,
    split_dataset,
    train,
)
from fcr.dataio import covariate_vocab, treatment_vocab


def toy_dataset(n=240, controls=80, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.integers(1, 4, n).astype(float)
    t[:controls] = 0.0
    x = rng.choice([10.0, 20.0], n)
    y = rng.normal(size=(n, 6)) + t[:, None] + x[:, None] / 10.0
    return Dataset(outcomes=y, covariates=x, treatments=t, control_mask=t == 0.0)


def quick_config(**over):
    base = dict(epochs=2, batch_size=64, lr=3e-4, disc_lr=3e-4, disc_steps=1,
                weights=LossWeights(0.5, 0.5, 0.5), seed=0)
    base.update(over)
    return TrainConfig(**base)


class TestSplitProtocol:
    def test_documented_counts(self):
        ds = toy_dataset(n=1000, controls=100, seed=1)
        splits = split_dataset(ds, seed=3)
        assert splits.prediction.size == 20
        assert all(ds.control_mask[splits.prediction])
        assert splits.test.size == 196
        assert splits.validation.size == 156
        assert splits.train.size == 628

    def test_disjoint_and_exhaustive(self):
        ds = toy_dataset(n=777, controls=123, seed=2)
        splits = split_dataset(ds, seed=0)
        parts = [splits.train, splits.validation, splits.test, splits.prediction]
        combined = np.concatenate(parts)
        assert len(combined) == ds.n_cells
        assert len(np.unique(combined)) == ds.n_cells

    def test_all_controls(self):
        ds = toy_dataset(n=100, controls=100, seed=3)
        splits = split_dataset(ds, seed=1)
        assert splits.prediction.size == 20
        combined = np.concatenate([splits.train, splits.validation,
                                   splits.test, splits.prediction])
        assert len(np.unique(combined)) == 100

    def test_seed_determinism(self):
        ds = toy_dataset(seed=4)
        a = split_dataset(ds, seed=7)
        b = split_dataset(ds, seed=7)
        for pa, pb in zip((a.train, a.validation, a.test, a.prediction),
                          (b.train, b.validation, b.test, b.prediction)):
            np.testing.assert_array_equal(pa, pb)
        c = split_dataset(ds, seed=8)
        assert not np.array_equal(a.train, c.train)

    def test_no_controls_rejected(self):
        ds = toy_dataset(controls=0, seed=5)
        ds.control_mask[:] = False
        with pytest.raises(ProtocolError):
            split_dataset(ds)

    def test_fraction_validation(self):
        with pytest.raises(DomainError):
            SplitFractions(prediction=1.5)


class TestTrainLoop:
    def test_zero_epochs_rejected(self):
        with pytest.raises(DomainError):
            quick_config(epochs=0)

    def test_validation_improves_over_init(self):
        ds = toy_dataset(seed=6)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=32, depth=1,
                                embed_width=4)
        from fcr.train import validation_loss, Standardizer
        cfg = quick_config(epochs=8, weights=LossWeights(0, 0, 0))
        splits = split_dataset(ds, cfg.fractions, cfg.seed)
        t_vocab, x_vocab = treatment_vocab(ds), covariate_vocab(ds)
        scaler = Standardizer.fit(ds.subset(splits.train).outcomes)
        val_enc = encode_dataset(ds.subset(splits.validation), t_vocab, x_vocab, scaler)
        torch.manual_seed(cfg.seed)
        init_model = FcrModel(mc)
        initial = validation_loss(init_model, val_enc, cfg.weights, cfg.seed * 7919 + 13)
        result = train(ds, mc, cfg)
        assert result.best_validation < initial

    def test_seed_reproducibility(self):
        ds = toy_dataset(seed=7)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        r1 = train(ds, mc, quick_config(seed=3))
        r2 = train(ds, mc, quick_config(seed=3))
        for (n1, p1), (n2, p2) in zip(r1.model.state_dict().items(),
                                      r2.model.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2), n1

    def test_divergence_aborts_with_reference(self):
        ds = toy_dataset(seed=8)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        with pytest.raises(TrainingDiverged) as info:
            train(ds, mc, quick_config(epochs=30, lr=1e3, disc_lr=1e3))
        assert info.value.history is not None

    def test_discriminator_step_decreases_its_loss(self):
        # Adversarial sign: a tiny-lr update of the discriminators alone never
        # increases the discriminator loss on its own batch.
        ds = toy_dataset(seed=9)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=32, depth=1,
                                embed_width=4)
        torch.manual_seed(0)
        model = FcrModel(mc)
        t_vocab, x_vocab = treatment_vocab(ds), covariate_vocab(ds)
        from fcr.train import Standardizer
        enc = encode_dataset(ds, t_vocab, x_vocab, Standardizer.fit(ds.outcomes))
        batch = make_batch(model, enc, np.arange(64))
        opt = torch.optim.SGD(model.discriminator_parameters(), lr=1e-5)
        # Give the discriminator nonzero output weights first.
        warm = dis_loss(model, batch, "x", StepRng(0), detach_latents=True).value \
            + dis_loss(model, batch, "t", StepRng(0), detach_latents=True).value
        opt.zero_grad(); warm.backward(); opt.step()
        for trial in range(3):
            rng_seed = 100 + trial
            before = dis_loss(model, batch, "x", StepRng(rng_seed), detach_latents=True).value \
                + dis_loss(model, batch, "t", StepRng(rng_seed), detach_latents=True).value
            opt.zero_grad(); before.backward(); opt.step()
            after = dis_loss(model, batch, "x", StepRng(rng_seed), detach_latents=True).value \
                + dis_loss(model, batch, "t", StepRng(rng_seed), detach_latents=True).value
            assert float(after) <= float(before) + 1e-7

    def test_elbo_only_matches_plain_vae_reconstruction(self):
        # With zero weights the trainer reduces to a conditional VAE: the
        # sim/ct/dis parts must not leak into the objective.
        ds = toy_dataset(seed=10)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        r_zero = train(ds, mc, quick_config(epochs=4, weights=LossWeights(0, 0, 0),
                                            disc_steps=0))
        recon_zero = [h["recon"] for h in r_zero.history.records if "recon" in h]
        assert recon_zero[-1] < recon_zero[0]


class TestHistory:
    def test_one_record_per_step_plus_epochs(self, tmp_path):
        ds = toy_dataset(seed=11)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        cfg = quick_config(epochs=2, batch_size=50)
        result = train(ds, mc, cfg)
        n_train = result.splits.train.size
        steps_per_epoch = math.ceil(n_train / 50)
        step_records = [r for r in result.history.records if "step" in r]
        epoch_records = [r for r in result.history.records if "validation_total" in r]
        assert len(step_records) == 2 * steps_per_epoch
        assert len(epoch_records) == 2
        path = tmp_path / "history.ndjson"
        result.history.write_ndjson(path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(result.history.records)
        json.loads(lines[0])


class TestCheckpoint:
    def make_result(self, seed=0):
        ds = toy_dataset(seed=seed)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        return ds, train(ds, mc, quick_config(epochs=1))

    def test_round_trip_bit_exact(self, tmp_path):
        ds, result = self.make_result()
        path = tmp_path / "model.fcrc"
        save_checkpoint(result, path)
        loaded = load_checkpoint(path)
        for (n1, p1), (n2, p2) in zip(result.model.state_dict().items(),
                                      loaded.model.state_dict().items()):
            assert torch.equal(p1, p2), n1
        probe = torch.randn(5, result.model_config.dims.n)
        assert torch.equal(result.model.decode(probe), loaded.model.decode(probe))
        np.testing.assert_array_equal(loaded.scaler.mean, result.scaler.mean)
        assert loaded.t_vocab.values == result.t_vocab.values

    def test_truncated_file_clean_error(self, tmp_path):
        ds, result = self.make_result()
        path = tmp_path / "model.fcrc"
        save_checkpoint(result, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 64])
        with pytest.raises(CheckpointError, match="truncated|checksum"):
            load_checkpoint(path)

    def test_hash_mismatch_refused(self, tmp_path):
        ds, result = self.make_result()
        path = tmp_path / "model.fcrc"
        save_checkpoint(result, path)
        raw = bytearray(path.read_bytes())
        header_len = int.from_bytes(raw[8:12], "little")
        header = json.loads(raw[12:12 + header_len])
        header["model_config"]["hidden"] = 999
        new_header = json.dumps(header, sort_keys=True).encode()
        # Same-length edit keeps offsets valid only if re-packed:
        rebuilt = raw[:8] + len(new_header).to_bytes(4, "little") + new_header \
            + raw[12 + header_len:]
        path.write_bytes(bytes(rebuilt))
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.fcrc"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestGridSearch:
    def test_paper_grid_size(self):
        assert len(paper_default_grid()) == 1210

    def test_singleton_grid_matches_plain_train(self, tmp_path):
        ds = toy_dataset(seed=12)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        base = quick_config(epochs=1)
        cells = grid_search(ds, mc, base, [base.weights], cache_dir=None)
        assert len(cells) == 1
        direct = train(ds, mc, base)
        assert cells[0].validation == pytest.approx(direct.best_validation)

    def test_divergent_cell_recorded_not_fatal(self, tmp_path):
        ds = toy_dataset(seed=13)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        base = quick_config(epochs=25, lr=1e3, disc_lr=1e3)
        from dataclasses import replace
        ok_base = quick_config(epochs=1)
        results = grid_search(ds, mc, replace(base), [LossWeights(0, 0, 0)],
                              cache_dir=None)
        assert results[0].error is not None
        mixed = grid_search(ds, mc, ok_base,
                            [LossWeights(0, 0, 0), LossWeights(1, 1, 1)],
                            cache_dir=None)
        assert sum(c.error is None for c in mixed) == 2

    def test_cache_resume(self, tmp_path):
        ds = toy_dataset(seed=14)
        mc = build_model_config(ds, LatentDims(1, 2, 1), hidden=16, depth=1,
                                embed_width=4)
        base = quick_config(epochs=1)
        grid = [LossWeights(0, 0, 0), LossWeights(1, 0, 0)]
        first = grid_search(ds, mc, base, grid, cache_dir=tmp_path)
        assert all(not c.from_cache for c in first)
        second = grid_search(ds, mc, base, grid, cache_dir=tmp_path)
        assert all(c.from_cache for c in second)
        for a, b in zip(sorted(first, key=lambda c: c.config_hash),
                        sorted(second, key=lambda c: c.config_hash)):
            assert a.validation == pytest.approx(b.validation)

    def test_cell_hash_distinguishes_weights(self):
        ds_cfg = ModelConfig(dims=LatentDims(1, 2, 1), y_dim=6, t_classes=4,
                             x_classes=2, hidden=16, depth=1, embed_width=4)
        a = _cell_hash(ds_cfg, quick_config(weights=LossWeights(1, 0, 0)))
        b = _cell_hash(ds_cfg, quick_config(weights=LossWeights(0, 1, 0)))
        assert a != b
