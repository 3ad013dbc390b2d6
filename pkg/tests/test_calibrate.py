"""Temperature fitting, Platt scaling, ECE/MCE and confidence moments."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from iorlab.attacks import make_attack
from iorlab.calibrate import (
    LogitSet,
    calibrate_temperature,
    calibration_report,
    confidence_stats,
    ece_mce,
    nll,
    platt_scale,
)
from iorlab.errors import EmptyDataset, EmptyInput, EmptyLogitSet, LabelOutOfRange, ValidationError


def synthetic_logits(rng, n=2000, C=3, scale=1.0):
    """Labels drawn from softmax(z); the true temperature of z * scale is ``scale``."""
    z = rng.normal(0, 2.0, size=(n, C))
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    labels = np.array([rng.choice(C, p=row) for row in p])
    return LogitSet(z * scale, labels)


class TestLogitSet:
    def test_validation(self):
        with pytest.raises(LabelOutOfRange):
            LogitSet([[0.0, 1.0]], [2])
        with pytest.raises(ValidationError):
            LogitSet([[0.0, np.nan]], [0])
        with pytest.raises(ValidationError):
            LogitSet([[0.0, 1.0], [1.0, 0.0]], [0])

    def test_default_ids(self):
        assert LogitSet([[0.0, 1.0], [1.0, 0.0]], [1, 0]).ids == (0, 1)

    def test_save_load(self, tmp_path):
        ls = LogitSet([[0.1, -2.5], [3.0, 0.25]], [1, 0], [7, 9])
        ls.save(tmp_path / "val.jsonl")
        back = LogitSet.load(tmp_path / "val.jsonl")
        np.testing.assert_array_equal(back.logits, ls.logits)
        np.testing.assert_array_equal(back.labels, ls.labels)
        assert back.ids == (7, 9) and back.tag == "val"

    def test_load_empty(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("\n")
        with pytest.raises(EmptyLogitSet):
            LogitSet.load(tmp_path / "e.jsonl")

    def test_from_model(self, tiny_model):
        ds = make_dataset([("good", 1), ("bad movie", 0)])
        ls = LogitSet.from_model(tiny_model, ds)
        np.testing.assert_array_equal(ls.logits, tiny_model.dataset_logits(ds))
        with pytest.raises(EmptyDataset):
            LogitSet.from_model(tiny_model, make_dataset([]))


class TestNll:
    def test_known_value(self):
        ls = LogitSet([[0.0, np.log(3.0)]], [1])
        assert nll(ls) == pytest.approx(-np.log(0.75), rel=1e-14)
        assert nll(ls, 2.0) == pytest.approx(-np.log(np.sqrt(3) / (1 + np.sqrt(3))), rel=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyLogitSet):
            nll(LogitSet(np.zeros((0, 2)), []))


class TestCalibrateTemperature:
    @pytest.mark.parametrize("scale", [0.2, 5.0])
    def test_matches_grid_oracle(self, rng, scale):
        ls = synthetic_logits(rng, n=1000, scale=scale)
        grid = np.logspace(-3, 3, 2001)
        T_grid = grid[np.argmin([nll(ls, T) for T in grid])]
        T = calibrate_temperature(ls)
        assert T == pytest.approx(T_grid, rel=0.01)
        assert nll(ls, T) <= nll(ls, 1.0)

    def test_calibrated_input_stays_near_one(self, rng):
        ls = synthetic_logits(rng, n=4000)
        assert calibrate_temperature(ls) == pytest.approx(1.0, abs=0.1)

    def test_all_correct_saturating_logits_push_t_down(self):
        ls = LogitSet([[3.0, 0.0], [0.0, 3.0]], [0, 1])
        T = calibrate_temperature(ls)
        assert T < 0.5 and nll(ls, T) < nll(ls, 1.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_never_increases_nll(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        ls = LogitSet(rng.normal(0, 5, size=(n, 3)), rng.integers(0, 3, size=n))
        T = calibrate_temperature(ls, max_iters=300)
        assert nll(ls, T) <= nll(ls, 1.0) + 1e-12
        assert 1e-6 <= T <= 1e9


class TestPlatt:
    def test_improves_nll(self, rng):
        ls = synthetic_logits(rng, n=500, scale=4.0)
        params = platt_scale(ls)
        assert nll(params.transform(ls)) < nll(ls)
        assert params.scale.shape == (3,) and params.bias.shape == (3,)

    def test_recovers_shared_scale(self, rng):
        ls = synthetic_logits(rng, n=3000, scale=4.0)
        params = platt_scale(ls, max_iters=20000)
        np.testing.assert_allclose(params.scale, 0.25, atol=0.06)


class TestEceMce:
    def test_single_bin_oracle(self):
        # ten predictions at 0.9 with seven correct: gap 0.2 in one bin
        ece, mce = ece_mce([0.9] * 10, [1] * 7 + [0] * 3)
        assert ece == pytest.approx(0.2, abs=1e-12)
        assert mce == pytest.approx(0.2, abs=1e-12)

    def test_two_bins_oracle(self):
        conf = [0.15, 0.15, 0.95, 0.95]
        correct = [0, 0, 1, 1]
        ece, mce = ece_mce(conf, correct)
        assert ece == pytest.approx(0.5 * 0.15 + 0.5 * 0.05)
        assert mce == pytest.approx(0.15)

    def test_confidence_one_goes_to_last_bin(self):
        ece, _ = ece_mce([1.0, 0.95], [1, 1])
        assert ece == pytest.approx(0.025)

    def test_perfectly_calibrated(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(0.5, 1.0, size=20000)
        correct = rng.random(20000) < conf
        assert ece_mce(conf, correct)[0] < 0.02

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=60), st.integers(1, 20))
    def test_ece_bounded_by_mce(self, pairs, bins):
        conf, correct = zip(*pairs)
        ece, mce = ece_mce(conf, correct, bins)
        assert 0 <= ece <= mce + 1e-12 <= 1 + 1e-12

    def test_errors(self):
        with pytest.raises(EmptyInput):
            ece_mce([], [])
        with pytest.raises(ValidationError):
            ece_mce([0.5], [1, 0])
        with pytest.raises(ValidationError):
            ece_mce([1.5], [1])
        with pytest.raises(ValidationError):
            ece_mce([0.5], [1], num_bins=0)


class TestConfidenceStats:
    def test_clean_moments(self, toy_model, toy_splits):
        test = toy_splits[2]
        stats = confidence_stats(toy_model, test, T=2.0)
        z = toy_model.dataset_logits(test) / 2.0
        p = np.exp(z - z.max(axis=1, keepdims=True))
        conf = (p / p.sum(axis=1, keepdims=True)).max(axis=1)
        assert stats.clean_mean == pytest.approx(conf.mean())
        assert stats.clean_var == pytest.approx(conf.var())
        assert stats.adv_mean is None

    def test_scaling_moves_confidence(self, toy_model, toy_splits):
        test = toy_splits[2]
        hot = confidence_stats(toy_model, test, T=0.01).clean_mean
        cold = confidence_stats(toy_model, test, T=100.0).clean_mean
        assert hot > 0.99 and cold < 0.51

    def test_adversarial_moments(self, toy_model, toy_splits):
        test = toy_splits[2].subset(range(10))
        stats = confidence_stats(toy_model, test, attack=make_attack("dg"))
        assert stats.adv_mean is not None and 0.5 <= stats.adv_mean <= 1

    def test_empty(self, toy_model):
        with pytest.raises(EmptyDataset):
            confidence_stats(toy_model, make_dataset([]))


class TestReport:
    def test_overconfident_gets_cooled(self, rng):
        ls = synthetic_logits(rng, n=1000, scale=5.0)
        rep = calibration_report(ls)
        assert rep.temperature > 1
        assert rep.nll_after <= rep.nll_before
        assert rep.ece_after < rep.ece
        assert rep.conf_mean_after < rep.conf_mean
        assert set(rep.to_dict()) >= {"temperature", "ece", "mce", "nll_before", "nll_after"}
