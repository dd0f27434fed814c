import numpy as np
import pytest

from dacal import baselines as bl
from dacal._kernels import pav
from dacal.calibrator import CalibratorModel, compose, parse_method
from dacal.core import CalibrationDataset, softmax_rows
from dacal.dac import DacModel
from dacal.errors import ConfigError
from dacal.knn import build_indices
from oracles import isotonic_maxmin


def sample_labels(rng, logits):
    p = softmax_rows(logits)
    u = rng.random((len(p), 1))
    return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), p.shape[1] - 1)


@pytest.fixture(scope="module")
def calibrated():
    """Logits equal to true log-probabilities, labels drawn from them."""
    rng = np.random.default_rng(7)
    z = rng.standard_normal((20_000, 6)) * 2.0
    return z, sample_labels(rng, z)


class TestTemperature:
    def test_calibrated_logits_give_unit_temperature(self, calibrated):
        z, y = calibrated
        assert bl.fit_ts(z, y).temperature == pytest.approx(1.0, abs=0.02)

    def test_overconfident_logits(self, calibrated):
        z, y = calibrated
        assert bl.fit_ts(3 * z, y).temperature == pytest.approx(3.0, abs=0.05)

    @pytest.mark.parametrize("c", [0.25, 2.0, 7.5])
    def test_scaling_equivariance(self, calibrated, c):
        z, y = calibrated
        z, y = z[:3000], y[:3000]
        t1, tc = bl.fit_ts(z, y).temperature, bl.fit_ts(c * z, y).temperature
        assert tc == pytest.approx(c * t1, rel=1e-4)

    def test_unit_temperature_is_softmax(self, rng):
        z = rng.standard_normal((10, 4))
        np.testing.assert_allclose(bl.apply_ts(bl.TempScaler(1.0), z), softmax_rows(z), rtol=0, atol=1e-15)

    def test_scalar_example(self):
        out = bl.apply_ts(bl.TempScaler(2.0), [[2.0, 0.0]])
        np.testing.assert_allclose(out, [[0.731059, 0.268941]], atol=1e-6)

    def test_large_temperature_flattens(self):
        out = bl.apply_ts(bl.TempScaler(1e3), [[2.0, 0.0]])
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-3)

    def test_range_enforced(self):
        with pytest.raises(ConfigError):
            bl.TempScaler(0.0)


class TestEnsembleTemperature:
    def test_pure_ts_weights(self, rng):
        z = rng.standard_normal((20, 3))
        m = bl.EtsModel(1.7, (1.0, 0.0, 0.0))
        np.testing.assert_array_equal(bl.apply_ets(m, z), bl.apply_ts(bl.TempScaler(1.7), z))

    def test_uniform_weights(self, rng):
        out = bl.apply_ets(bl.EtsModel(1.0, (0.0, 0.0, 1.0)), rng.standard_normal((5, 4)))
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_half_half_example(self):
        out = bl.apply_ets(bl.EtsModel(2.0, (0.5, 0.5, 0.0)), [[2.0, 0.0]])
        np.testing.assert_allclose(out, [[0.805928, 0.194072]], atol=1e-6)

    def test_calibrated_data_keeps_uniform_weight_small(self, calibrated):
        z, y = calibrated
        m = bl.fit_ets(z, y)
        assert m.mix_weights[0] + m.mix_weights[1] >= 0.99

        def sq(p):
            return float(np.sum((p - np.eye(6)[y]) ** 2))

        assert sq(bl.apply_ets(m, z)) <= sq(bl.apply_ts(bl.TempScaler(m.temperature), z)) + 1e-9

    def test_noise_logits_prefer_uniform(self, rng):
        z = rng.standard_normal((6000, 4)) * 3
        y = np.tile(np.arange(4), 1500)
        assert bl.fit_ets(z, y).mix_weights[2] >= 0.9

    def test_never_worse_than_ts_corner(self, rng):
        for _ in range(20):
            g = rng.standard_normal((3, 3))
            gram, lin = g @ g.T + 1e-3 * np.eye(3), rng.standard_normal(3)
            w = bl._simplex_qp(gram, lin)
            assert w.min() >= 0 and w.sum() == pytest.approx(1.0)
            f = w @ gram @ w - 2 * lin @ w
            for v in rng.dirichlet(np.ones(3), 200):
                assert f <= v @ gram @ v - 2 * lin @ v + 1e-12


class TestPav:
    def test_monotone_input_untouched(self):
        y = np.array([0.0, 0.1, 0.1, 0.5, 1.0])
        np.testing.assert_array_equal(pav(y), y)

    def test_two_point_pool(self):
        m = bl.fit_isotonic([0.2, 0.8], [1.0, 0.0])
        np.testing.assert_array_equal(m([0.2, 0.8]), [0.5, 0.5])

    def test_matches_maxmin_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 51))
            y = rng.standard_normal(n) if rng.random() < 0.5 else rng.integers(0, 2, n).astype(float)
            w = rng.uniform(0.1, 3, n) if rng.random() < 0.5 else None
            np.testing.assert_allclose(pav(y, w), isotonic_maxmin(y, w), rtol=0, atol=1e-12)

    def test_tied_inputs_merge(self):
        m = bl.fit_isotonic([0.5, 0.5, 0.5, 0.9], [1, 0, 0, 1])
        np.testing.assert_array_equal(m.breakpoints, [0.5, 0.9])
        np.testing.assert_allclose(m.values, [1 / 3, 1.0])


class TestIsotonicMaps:
    def test_step_evaluation(self):
        m = bl.IsotonicMap([0.2, 0.5], [0.1, 0.7])
        np.testing.assert_array_equal(m([0.0, 0.2, 0.3, 0.5, 1.0]), [0.1, 0.1, 0.1, 0.7, 0.7])

    def test_identity_map(self):
        grid = np.round(np.arange(11) / 10, 1)
        p = np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
        np.testing.assert_array_equal(bl.apply_irm(bl.IsotonicMap(grid, grid), p), p)

    def test_constant_map_gives_uniform_rows(self, rng):
        p = softmax_rows(rng.standard_normal((4, 5)))
        out = bl.apply_irm(bl.IsotonicMap([0.0], [0.3]), p)
        np.testing.assert_allclose(out, 0.2, rtol=0, atol=1e-15)
        assert np.array_equal(out.argmax(axis=1), p.argmax(axis=1))

    def test_irm_preserves_argmax(self, rng):
        z = rng.standard_normal((10_000, 8)) * 4
        p = softmax_rows(z)
        y = sample_labels(rng, z / 3)
        out = bl.apply_irm(bl.fit_irm(p, y), p)
        assert np.array_equal(out.argmax(axis=1), p.argmax(axis=1))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_ir_binary_matches_irm_on_symmetric_data(self, rng):
        # with every (p, y) mirrored by (1 - p, 1 - y) the pooled and
        # per-class problems see the same pairs, so the maps coincide
        p1 = rng.random(300)
        y1 = (rng.random(300) < p1).astype(int)
        p = np.concatenate([np.stack([1 - p1, p1], 1), np.stack([p1, 1 - p1], 1)])
        y = np.concatenate([y1, 1 - y1])
        a = bl.apply_irm(bl.fit_irm(p, y), p)
        b = bl.apply_ir(bl.fit_ir(p, y), p)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_ir_near_identity_on_calibrated_data(self, calibrated):
        z, y = calibrated
        p = softmax_rows(z)
        model = bl.fit_ir(p, y)
        grid = np.linspace(0.1, 0.9, 9)
        for m in model.maps:
            np.testing.assert_allclose(m(grid), grid, atol=0.08)

    def test_ir_constant_predictions_give_base_rates(self, rng):
        y = rng.integers(0, 3, 500)
        p = np.tile([0.2, 0.5, 0.3], (500, 1))
        out = bl.apply_ir(bl.fit_ir(p, y), p)
        np.testing.assert_allclose(out[0], np.bincount(y, minlength=3) / 500, atol=1e-12)

    def test_json_round_trip(self, rng):
        p = softmax_rows(rng.standard_normal((50, 3)))
        y = rng.integers(0, 3, 50)
        m = bl.fit_irm(p, y)
        back = bl.IsotonicMap.from_json(m.to_json())
        np.testing.assert_array_equal(back(p), m(p))


class TestCompose:
    def _val(self, rng, n=400):
        z = rng.standard_normal((n, 4)) * 3
        return CalibrationDataset("val", z, {"a": rng.standard_normal((n, 3))}, 4, sample_labels(rng, z / 3))

    def test_grammar(self):
        assert parse_method("ets+dac") == ("ets", True)
        assert parse_method("none") == ("none", False)
        for bad in ("dac+ts", "dac", "ts+dac+dac", "foo"):
            with pytest.raises(ConfigError):
                parse_method(bad)

    def test_without_dac_is_plain_baseline(self, rng):
        val = self._val(rng)
        model, _ = compose("ts", val)
        assert model.base.temperature == bl.fit_ts(val.logits, val.labels).temperature

    def test_unit_bias_dac_equals_plain_ts(self, rng):
        val = self._val(rng)
        train = self._val(rng, 200)
        indices = build_indices(train, {"a": 5})
        ts, _ = compose("ts", val)
        wrapped = CalibratorModel("ts+dac", "ts", ts.base, dac=DacModel.bias_only(1.0, ["a"]))
        np.testing.assert_array_equal(wrapped.predict_proba(val, indices), ts.predict_proba(val))

    @pytest.mark.parametrize("method", ["ts", "ets", "irm", "ir", "none", "ts+dac", "ets+dac", "irm+dac", "ir+dac", "none+dac"])
    def test_row_stochastic_and_serializable(self, rng, method):
        val, train = self._val(rng), self._val(rng, 200)
        model, indices = compose(method, val, train=train, k_per_layer={"a": 5})
        p = model.predict_proba(val, indices)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        back = CalibratorModel.from_json(model.to_json())
        np.testing.assert_array_equal(back.predict_proba(val, indices), p)
        if not method.startswith("ir+") and method != "ir":
            assert np.array_equal(p.argmax(axis=1), val.logits.argmax(axis=1))

    def test_dac_needs_indices(self, rng):
        with pytest.raises(ConfigError):
            compose("ts+dac", self._val(rng))
