import json

import numpy as np
import pytest

from flownull import mri
from flownull.config import RunConfig, config_hash, preset
from flownull.data import Dataset, DatasetError, simulate_seed
from flownull.toy import ToyProblem

MASK = mri.make_gro_mask(8, 2, 2)


class TestRunConfig:
    def test_round_trip_byte_identical(self, tmp_path):
        cfg = RunConfig.from_dict({"dataset": {"n_samples": 12}, "ablation": {"data_consistency": False}})
        cfg.save(tmp_path / "a.json")
        RunConfig.load(tmp_path / "a.json").save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_canonical_key_order(self):
        text = RunConfig().dumps()
        doc = json.loads(text)
        assert list(doc) == sorted(doc)
        assert text.endswith("\n")

    def test_hash_stable_and_sensitive(self):
        a, b = RunConfig(), RunConfig()
        assert a.hash() == b.hash() == config_hash(a.to_dict())
        assert len(a.hash()) == 16
        c = RunConfig.from_dict({"train": {"seed": 1}})
        assert c.hash() != a.hash()

    def test_partial_document_overlays_preset(self):
        cfg = RunConfig.from_dict({"preset": "paper", "eval": {"n_posterior": 4}})
        assert cfg.dataset.height == 256 and cfg.eval.n_posterior == 4

    def test_presets(self):
        desk, paper = preset("desk"), preset("paper")
        assert (desk.dataset.height, desk.dataset.coils, desk.model.levels, desk.model.steps) == (32, 2, 3, 4)
        assert (paper.dataset.height, paper.dataset.coils, paper.model.steps) == (256, 8, 20)
        assert (paper.eval.map_iters, paper.eval.map_lr) == (5000, 1e-8)
        assert (desk.eval.map_iters, desk.eval.map_lr) == (500, 1e-4)
        assert desk.train.target_noise > 0 and paper.train.target_noise == 0
        with pytest.raises(ValueError):
            preset("laptop")

    @pytest.mark.parametrize("doc", [
        {"dataset": {"height": 0}},
        {"bogus": {}},
        {"train": {"lr": 1.0}},
        {"model": {"cond_widths": [8, 8]}},
        {"eval": {"combine": "median"}},
        {"train": {"val_fraction": 1.0}},
    ])
    def test_invalid(self, doc):
        with pytest.raises(ValueError):
            RunConfig.from_dict(doc)

    def test_model_config_geometry(self):
        m = RunConfig().model_config()
        assert (m.channels, m.height, m.width) == (4, 32, 32)


class TestDataset:
    def test_simulate_shapes(self):
        ds = Dataset.simulate(3, 8, 8, 2, MASK, seed=4)
        assert ds.x.shape == ds.y.shape == ds.u.shape == ds.maps.shape == (3, 2, 8, 8)
        assert ds.i_true.shape == (3, 8, 8)
        assert ds.channels("y").shape == (3, 4, 8, 8) and ds.channels("y").dtype == np.float32

    def test_samples_independent_of_count(self):
        a = Dataset.simulate(2, 8, 8, 1, MASK, seed=4)
        b = Dataset.simulate(5, 8, 8, 1, MASK, seed=4)
        np.testing.assert_array_equal(a.x, b.x[:2])
        assert simulate_seed(4, 1) != simulate_seed(5, 1)

    def test_y_is_measured_part_of_x(self):
        ds = Dataset.simulate(2, 8, 8, 2, MASK, seed=1)
        np.testing.assert_allclose(mri.apply_A(ds.x, MASK), ds.y, atol=1e-5)
        np.testing.assert_allclose(ds.u + ds.y, ds.x, atol=1e-5)

    def test_normalisation(self):
        ds = Dataset.simulate(3, 8, 8, 1, MASK, seed=2)
        raw = Dataset.simulate(3, 8, 8, 1, MASK, seed=2, normalize=False)
        assert np.all(raw.scales == 1.0) and np.all(ds.scales > 0)
        for i in range(3):
            assert ds.scales[i] == pytest.approx(mri.normalize_stack(ds.y[i])[1])

    def test_split(self):
        ds = Dataset.simulate(10, 8, 8, 1, MASK)
        tr, va = ds.split(0.2, seed=0)
        assert len(tr) == 8 and len(va) == 2
        tr2, va2 = ds.split(0.2, seed=0)
        np.testing.assert_array_equal(va.x, va2.x)
        assert len(ds.split(0.01)[1]) == 1

    def test_save_load(self, tmp_path):
        ds = Dataset.simulate(3, 8, 8, 2, MASK, seed=9)
        ds.save(tmp_path / "d", config_hash="abc")
        back = Dataset.load(tmp_path / "d")
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.u, ds.u)
        np.testing.assert_array_equal(back.scales, ds.scales)
        assert back.mask == MASK and back.meta["config_hash"] == "abc"

    def test_save_refuses_non_empty(self, tmp_path):
        ds = Dataset.simulate(1, 8, 8, 1, MASK)
        ds.save(tmp_path / "d")
        with pytest.raises(FileExistsError):
            ds.save(tmp_path / "d")
        ds.save(tmp_path / "d", force=True)

    def test_byte_identical_resave(self, tmp_path):
        for name in ("a", "b"):
            Dataset.simulate(2, 8, 8, 1, MASK, seed=3).save(tmp_path / name, config_hash="h")
        for f in sorted((tmp_path / "a").rglob("*.*")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_mixed_masks_rejected(self, tmp_path):
        ds = Dataset.simulate(2, 8, 8, 1, MASK)
        ds.save(tmp_path / "d")
        mri.make_equispaced_mask(8, 2, 2).save(tmp_path / "d" / "sample_00001" / "mask.json")
        with pytest.raises(DatasetError, match="mask"):
            Dataset.load(tmp_path / "d")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Dataset.load(tmp_path)

    def test_shape_mismatch(self):
        x = np.zeros((2, 1, 8, 8), np.complex64)
        with pytest.raises(DatasetError):
            Dataset(x, x[:1], x, MASK)


class TestToyDataset:
    def test_unnormalised_full_targets(self):
        toy = ToyProblem.build(0)
        ds = toy.dataset(5, seed=0)
        assert not ds.normalize and np.all(ds.scales == 1)
        assert ds.x.shape == (5, 1, 2, 2)
        assert ds.check_nullspace() < 1e-6

    def test_y_recovers_measurements(self):
        toy = ToyProblem.build(0)
        x, m = toy.draw(4, seed=1)
        ds = toy.dataset(4, seed=1)
        np.testing.assert_allclose(toy.measurements_from_y(ds.y), m, atol=1e-5)
