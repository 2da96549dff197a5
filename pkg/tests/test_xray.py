import json

import numpy as np
import pytest

from carl import policy, twinsim, xray
from carl.fswactions import MacroAction
from carl.xray import (
    ActionMap, AxisSpec, SanityScenario, SweepSpec, SweepSpecError,
    builtin_scenarios, collect_backgrounds, consistency_check, render,
    sanity_suite, sweep,
)


def small_spec(**kwargs):
    defaults = dict(
        x_axis=AxisSpec("wheel_saturation", 0.0, 1.0, 8),
        y_axis=AxisSpec("battery", 0.0, 1.0, 6),
        background_samples=4,
        mode="blend",
        seed=3,
    )
    defaults.update(kwargs)
    return SweepSpec(**defaults)


def charge_biased_params():
    params = policy.zero_params()
    params.b_act[:] = [0.0, 5.0, 0.0]
    return params


class TestSweep:
    def test_uniform_policy_uniform_map(self, fast_config):
        amap = sweep(policy.zero_params(), small_spec(), fast_config)
        assert amap.probs.shape == (6, 8, 3)
        assert np.all(amap.probs == 1.0 / 3.0)

    def test_single_background_equals_forward(self, fast_config, random_params):
        rng = np.random.default_rng(0)
        background = rng.normal(size=(1, 16))
        spec = small_spec(background_samples=1)
        amap = sweep(random_params, spec, fast_config, backgrounds=background)
        obs = background[0].copy()
        obs[13:16] = amap.x_values[2]
        obs[12] = amap.y_values[4]
        logits, _ = policy.forward(random_params, obs)
        expected = policy.distribution(logits)
        assert np.allclose(amap.probs[4, 2], expected, atol=1e-12)

    def test_cells_normalized(self, fast_config, random_params):
        amap = sweep(random_params, small_spec(), fast_config)
        sums = amap.probs.sum(axis=2)
        assert np.all(np.abs(sums - 1.0) < 1e-9)

    def test_identical_axis_values_identical_cells(self, fast_config, random_params):
        spec = small_spec(x_axis=AxisSpec("wheel_saturation", 0.4, 0.4, 3))
        amap = sweep(random_params, spec, fast_config)
        for iy in range(amap.probs.shape[0]):
            for ix in range(1, 3):
                assert np.array_equal(amap.probs[iy, 0], amap.probs[iy, ix])

    def test_unknown_field_rejected(self):
        with pytest.raises(SweepSpecError):
            small_spec(x_axis=AxisSpec("reactor_temperature", 0, 1, 5)).validate()

    def test_too_few_steps_rejected(self):
        with pytest.raises(SweepSpecError):
            small_spec(x_axis=AxisSpec("battery", 0, 1, 1)).validate()

    def test_overlapping_axes_rejected(self):
        with pytest.raises(SweepSpecError):
            small_spec(x_axis=AxisSpec("battery", 0, 1, 4),
                       y_axis=AxisSpec("battery_fraction", 0, 1, 4)).validate()

    def test_backgrounds_deterministic(self, fast_config, random_params):
        a = collect_backgrounds(fast_config, random_params, 8, seed=5)
        b = collect_backgrounds(fast_config, random_params, 8, seed=5)
        assert np.array_equal(a, b)


class TestRender:
    def make_map(self, cells):
        cells = np.asarray(cells, dtype=float)
        ny, nx, _ = cells.shape
        return ActionMap(probs=cells, x_field="wheel_saturation", y_field="battery",
                         x_values=np.linspace(0, 1, nx), y_values=np.linspace(0, 1, ny),
                         mode="blend", seed=9)

    def test_pure_drift_cell_is_red(self):
        amap = self.make_map([[[1.0, 0.0, 0.0]]])
        ppm, _ = render(amap, "blend")
        assert ppm.endswith(bytes([255, 0, 0]))

    def test_uniform_cell_is_gray_85(self):
        amap = self.make_map([[[1 / 3, 1 / 3, 1 / 3]]])
        ppm, _ = render(amap, "blend")
        assert ppm.endswith(bytes([85, 85, 85]))

    def test_blend_channel_sums_within_rounding(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0.01, 1.0, size=(5, 7, 3))
        raw /= raw.sum(axis=2, keepdims=True)
        ppm, _ = render(self.make_map(raw), "blend")
        pixels = ppm.split(b"\n", 3)[3]
        for i in range(0, len(pixels), 3):
            total = pixels[i] + pixels[i + 1] + pixels[i + 2]
            assert 253 <= total <= 255

    def test_argmax_render_matches_csv(self):
        rng = np.random.default_rng(2)
        raw = rng.uniform(0.01, 1.0, size=(4, 4, 3))
        raw /= raw.sum(axis=2, keepdims=True)
        amap = self.make_map(raw)
        ppm, csv_text = render(amap, "argmax")
        pixels = ppm.split(b"\n", 3)[3]
        rows = [line.split(",") for line in csv_text.strip().split("\n")[1:]]
        for iy in range(4):
            for ix in range(4):
                probs = [float(x) for x in rows[iy * 4 + ix][2:]]
                expected = xray.ACTION_COLORS[int(np.argmax(probs))]
                # image row 0 is the top (largest y)
                offset = ((4 - 1 - iy) * 4 + ix) * 3
                assert tuple(pixels[offset:offset + 3]) == expected

    def test_stochastic_deterministic_bytes(self):
        rng = np.random.default_rng(3)
        raw = rng.uniform(0.01, 1.0, size=(6, 6, 3))
        raw /= raw.sum(axis=2, keepdims=True)
        amap = self.make_map(raw)
        assert render(amap, "stochastic")[0] == render(amap, "stochastic")[0]

    def test_ppm_header(self):
        amap = self.make_map(np.full((3, 5, 3), 1 / 3))
        ppm, _ = render(amap, "blend")
        assert ppm.startswith(b"P6\n5 3\n255\n")
        assert len(ppm) == len(b"P6\n5 3\n255\n") + 3 * 5 * 3

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            render(self.make_map(np.full((1, 1, 3), 1 / 3)), "watercolor")


class TestSanity:
    def test_uniform_policy_fails_everything(self, default_config):
        scenarios = builtin_scenarios(default_config)
        results = sanity_suite(policy.zero_params(), scenarios)
        assert len(results) == 2
        for res in results:
            assert not res.passed
            assert abs(res.top_probability - 1 / 3) < 1e-12

    def test_biased_policy_passes_matching_scenario(self, default_config):
        scenarios = builtin_scenarios(default_config)
        results = sanity_suite(charge_biased_params(), scenarios)
        by_name = {r.name: r for r in results}
        assert by_name["low_battery_away_from_sun"].passed
        assert by_name["low_battery_away_from_sun"].top_action == MacroAction.CHARGE
        assert not by_name["wheels_near_saturation"].passed

    def test_unknown_override_rejected(self):
        scenario = SanityScenario("bogus", [{"flux_capacitor": 1.0}], MacroAction.DRIFT)
        with pytest.raises(SweepSpecError):
            sanity_suite(policy.zero_params(), [scenario])

    def test_builtin_scenarios_shape(self, default_config):
        scenarios = builtin_scenarios(default_config)
        low = next(s for s in scenarios if s.name == "low_battery_away_from_sun")
        assert len(low.variants) == 12
        for overrides in low.variants:
            assert overrides["battery_fraction"] == 0.05
            assert overrides["wheel_saturation"] == 0.0
        hot = next(s for s in scenarios if s.name == "wheels_near_saturation")
        assert hot.variants[0]["wheel_saturation"] == 0.95


class TestConsistency:
    def test_round_trip_is_bitwise(self, random_params):
        rng = np.random.default_rng(4)
        obs = rng.normal(size=(25, 16))
        report = consistency_check(random_params, obs)
        assert report.passed
        assert report.max_abs_logit_diff == 0.0
        assert report.n_observations == 25

    def test_truncated_precision_detected(self, random_params, tmp_path):
        # Fixture: a checkpoint whose floats were rounded to 6 digits.
        path = tmp_path / "lossy.json"
        policy.save(random_params, str(path))
        doc = json.loads(path.read_text())

        def truncate(node):
            if isinstance(node, float):
                return round(node, 6)
            if isinstance(node, list):
                return [truncate(x) for x in node]
            if isinstance(node, dict):
                return {k: truncate(v) for k, v in node.items()}
            return node

        doc["layers"] = truncate(doc["layers"])
        path.write_text(json.dumps(doc))
        lossy, _ = policy.load(str(path))
        rng = np.random.default_rng(5)
        obs = rng.normal(size=(10, 16))
        direct, _ = policy.forward_batch(random_params, obs)
        restored, _ = policy.forward_batch(lossy, obs)
        diff = float(np.max(np.abs(direct - restored)))
        assert diff > 0.0

    def test_empty_log_passes(self, random_params):
        report = consistency_check(random_params, np.zeros((0, 16)))
        assert report.passed and report.n_observations == 0
