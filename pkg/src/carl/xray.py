"""Black-box policy inspection: grid sweeps over two health metrics with
representative background states, image/CSV rendering in three modes,
clear-cut sanity scenarios, and ground-vs-restored inference consistency
checks.

Sweeps replicate the diagnostic-plot idea: the remaining observation
dimensions are populated from states drawn out of seeded simulation
rollouts, so the policy is probed near the manifold it was trained on.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import attmath, policy, ppotrain, twinsim
from .fswactions import MacroAction
from .twinsim import OBS_FIELDS, OBS_SIZE

# Selectors accepted on sweep axes and scenario overrides. The aggregate
# wheel_saturation selector drives all three wheel entries at once, the
# way the wheel axis of the diagnostic plots is defined.
FIELD_SELECTORS = {name: (i,) for i, name in enumerate(OBS_FIELDS)}
FIELD_SELECTORS["wheel_saturation"] = (13, 14, 15)
FIELD_SELECTORS["battery"] = (12,)

RENDER_MODES = ("stochastic", "argmax", "blend")

ACTION_COLORS = (
    (255, 0, 0),    # drift
    (0, 255, 0),    # charge
    (0, 0, 255),    # desaturate
)

CSV_HEADER = "x_value,y_value,p_drift,p_charge,p_desaturate"


class SweepSpecError(ValueError):
    """Sweep or scenario specification names an unknown observation field."""


@dataclass(frozen=True)
class AxisSpec:
    field: str
    minimum: float
    maximum: float
    steps: int

    def values(self) -> np.ndarray:
        return np.linspace(self.minimum, self.maximum, self.steps)


@dataclass(frozen=True)
class SweepSpec:
    x_axis: AxisSpec = AxisSpec("wheel_saturation", 0.0, 1.0, 50)
    y_axis: AxisSpec = AxisSpec("battery", 0.0, 1.0, 50)
    background_samples: int = 32
    mode: str = "blend"
    seed: int = 0

    def validate(self) -> "SweepSpec":
        for axis in (self.x_axis, self.y_axis):
            if axis.field not in FIELD_SELECTORS:
                raise SweepSpecError(f"unknown observation field: {axis.field!r}")
            if axis.steps < 2:
                raise SweepSpecError("each axis needs at least 2 steps")
        x_idx = set(FIELD_SELECTORS[self.x_axis.field])
        y_idx = set(FIELD_SELECTORS[self.y_axis.field])
        if x_idx & y_idx:
            raise SweepSpecError("axis selectors must name distinct fields")
        if self.mode not in RENDER_MODES:
            raise SweepSpecError(f"render mode must be one of {RENDER_MODES}")
        if self.background_samples < 1:
            raise SweepSpecError("background_samples must be at least 1")
        return self


@dataclass(eq=False)
class ActionMap:
    """Mean action probabilities per grid cell plus axis metadata."""

    probs: np.ndarray          # (steps_y, steps_x, 3)
    x_field: str
    y_field: str
    x_values: np.ndarray
    y_values: np.ndarray
    mode: str
    seed: int


def collect_backgrounds(env_config: twinsim.SpacecraftConfig, params: policy.PolicyParams,
                        n: int, seed: int, sunlit_only: bool = False) -> np.ndarray:
    """Draw n representative observations from seeded policy rollouts."""
    pool = []
    episode = 0
    while len(pool) < max(4 * n, 120):
        traj = ppotrain.rollout_episode(env_config, params, seed * 100003 + episode)
        pool.extend(list(traj.obs))
        episode += 1
        if episode > 200:
            break
    pool = np.asarray(pool)
    if sunlit_only:
        s_hat = twinsim.sun_direction(0.0, env_config)
        keep = [not twinsim.eclipse(row[6:9] * env_config.orbit_radius, s_hat,
                                    env_config.earth_radius) for row in pool]
        if any(keep):
            pool = pool[keep]
    rng = np.random.default_rng((seed, 5))
    picks = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return pool[np.sort(picks)]


def _mean_distribution(params: policy.PolicyParams, obs: np.ndarray) -> np.ndarray:
    logits, _ = policy.forward_batch(params, obs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.mean(axis=0)


def sweep(params: policy.PolicyParams, spec: SweepSpec,
          env_config: twinsim.SpacecraftConfig,
          backgrounds: np.ndarray | None = None) -> ActionMap:
    """Evaluate the policy over the 2-D grid against fixed backgrounds.

    Every cell overrides the two axis selectors on the same N background
    observations and stores the mean action distribution.
    """
    spec.validate()
    if backgrounds is None:
        backgrounds = collect_backgrounds(env_config, params, spec.background_samples, spec.seed)
    backgrounds = np.asarray(backgrounds, dtype=float)
    n = len(backgrounds)
    x_values = spec.x_axis.values()
    y_values = spec.y_axis.values()
    nx, ny = len(x_values), len(y_values)

    obs = np.tile(backgrounds, (ny * nx, 1))
    x_per_row = np.repeat(np.tile(x_values, ny), n)
    y_per_row = np.repeat(y_values, nx * n)
    for idx in FIELD_SELECTORS[spec.x_axis.field]:
        obs[:, idx] = x_per_row
    for idx in FIELD_SELECTORS[spec.y_axis.field]:
        obs[:, idx] = y_per_row

    logits, _ = policy.forward_batch(params, obs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    cells = probs.reshape(ny, nx, n, 3)
    # Anchored mean: exact when every background yields the same
    # distribution (a uniform policy must produce exactly 1/3 per cell).
    anchor = cells[:, :, :1, :]
    grid = anchor[:, :, 0, :] + (cells - anchor).mean(axis=2)
    return ActionMap(probs=grid, x_field=spec.x_axis.field, y_field=spec.y_axis.field,
                     x_values=x_values, y_values=y_values, mode=spec.mode, seed=spec.seed)


def _pixel(cell: np.ndarray, mode: str, rng: np.random.Generator | None) -> tuple:
    if mode == "blend":
        return tuple(int(math.floor(255.0 * float(p))) for p in cell)
    if mode == "argmax":
        return ACTION_COLORS[int(np.argmax(cell))]
    # stochastic: one seeded draw per cell
    u = rng.random()
    acc = 0.0
    for i in range(2):
        acc += float(cell[i])
        if u < acc:
            return ACTION_COLORS[i]
    return ACTION_COLORS[2]


def render(action_map: ActionMap, mode: str | None = None) -> tuple[bytes, str]:
    """Produce a binary PPM (P6) image and a CSV of cell probabilities.

    Image rows run from the top of the plot (largest y value) downward;
    stochastic draws are seeded from the map's seed, so identical maps
    render to identical bytes.
    """
    mode = mode or action_map.mode
    if mode not in RENDER_MODES:
        raise ValueError(f"render mode must be one of {RENDER_MODES}")
    ny, nx, _ = action_map.probs.shape
    rng = np.random.default_rng((action_map.seed, 7)) if mode == "stochastic" else None

    body = bytearray()
    for iy in range(ny - 1, -1, -1):
        for ix in range(nx):
            body.extend(_pixel(action_map.probs[iy, ix], mode, rng))
    ppm = f"P6\n{nx} {ny}\n255\n".encode("ascii") + bytes(body)

    lines = [CSV_HEADER]
    for iy in range(ny):
        for ix in range(nx):
            p = action_map.probs[iy, ix]
            lines.append(f"{float(action_map.x_values[ix])!r},{float(action_map.y_values[iy])!r},"
                         f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}")
    return ppm, "\n".join(lines) + "\n"


@dataclass(eq=False)
class SanityScenario:
    """A clear-cut operational situation with the action an operator expects.

    `variants` is a list of override dicts (observation field -> value);
    several variants express physically equivalent constructions, e.g.
    the one-parameter family of anti-sun attitudes. The reported
    distribution is the mean over variants and background states.
    """

    name: str
    variants: list
    expected: MacroAction
    min_prob: float = 0.5

    def validate(self) -> "SanityScenario":
        for overrides in self.variants:
            for key in overrides:
                if key not in FIELD_SELECTORS:
                    raise SweepSpecError(f"unknown observation field: {key!r}")
        return self


def _anti_sun_attitudes(config: twinsim.SpacecraftConfig, spins: int = 12) -> list:
    """MRPs of attitudes pointing the panel normal exactly away from the sun."""
    s_hat = twinsim.sun_direction(0.0, config)
    n_body = np.asarray(config.panel_normal_body, dtype=float)
    axis = np.cross(n_body, -s_hat)
    norm = float(np.linalg.norm(axis))
    if norm < 1e-12:
        for i in range(3):
            candidate = np.zeros(3)
            candidate[i] = 1.0
            candidate -= (candidate @ n_body) * n_body
            c_norm = float(np.linalg.norm(candidate))
            if c_norm > 1e-9:
                axis, norm = candidate, c_norm
                break
    base = attmath.rotation_about(axis / norm, math.atan2(norm, float(n_body @ -s_hat)))
    out = []
    for phi in np.linspace(0.0, 2.0 * math.pi, spins, endpoint=False):
        out.append(attmath.mrp_from_dcm(base @ attmath.rotation_about(s_hat, phi)))
    return out


def builtin_scenarios(config: twinsim.SpacecraftConfig) -> list[SanityScenario]:
    """The two stock high-stakes situations used for go/no-go checks."""
    calm = {"body_rate_x": 0.0, "body_rate_y": 0.0, "body_rate_z": 0.0}
    low_battery = []
    for sigma in _anti_sun_attitudes(config):
        low_battery.append({
            "battery_fraction": 0.05,
            "wheel_saturation": 0.0,
            "attitude_mrp_x": float(sigma[0]),
            "attitude_mrp_y": float(sigma[1]),
            "attitude_mrp_z": float(sigma[2]),
            **calm,
        })
    wheels_hot = [{
        "battery_fraction": 0.7,
        "wheel_saturation": 0.95,
        **calm,
    }]
    return [
        SanityScenario("low_battery_away_from_sun", low_battery, MacroAction.CHARGE),
        SanityScenario("wheels_near_saturation", wheels_hot, MacroAction.DESATURATE),
    ]


@dataclass(eq=False)
class SanityResult:
    name: str
    probabilities: np.ndarray
    top_action: MacroAction
    top_probability: float
    expected: MacroAction
    passed: bool


def sanity_suite(params: policy.PolicyParams, scenarios: list[SanityScenario],
                 backgrounds: np.ndarray | None = None) -> list[SanityResult]:
    """Evaluate each scenario and judge it against its expected action.

    Overrides are applied on top of each background observation (a zero
    vector when no backgrounds are supplied); the scenario passes when
    the expected action tops the mean distribution above its threshold.
    """
    if backgrounds is None:
        backgrounds = np.zeros((1, OBS_SIZE))
    backgrounds = np.asarray(backgrounds, dtype=float)
    results = []
    for scenario in scenarios:
        scenario.validate()
        stacked = []
        for overrides in scenario.variants:
            obs = backgrounds.copy()
            for key, value in overrides.items():
                for idx in FIELD_SELECTORS[key]:
                    obs[:, idx] = value
            stacked.append(obs)
        mean = _mean_distribution(params, np.vstack(stacked))
        top = MacroAction(int(np.argmax(mean)))
        passed = top == scenario.expected and float(mean[scenario.expected]) > scenario.min_prob
        results.append(SanityResult(
            name=scenario.name, probabilities=mean, top_action=top,
            top_probability=float(mean[top]), expected=scenario.expected, passed=passed,
        ))
    return results


@dataclass(eq=False)
class ConsistencyReport:
    n_observations: int
    max_abs_logit_diff: float
    passed: bool


def consistency_check(params: policy.PolicyParams, observations: np.ndarray,
                      scratch_path: str | None = None) -> ConsistencyReport:
    """Compare direct inference against inference through a checkpoint
    save/load round trip; passes only on bitwise-identical logits."""
    observations = np.asarray(observations, dtype=float)
    if len(observations) == 0:
        return ConsistencyReport(0, 0.0, True)
    if scratch_path is None:
        fd, scratch_path = tempfile.mkstemp(suffix=".json")
        os.close(fd)
        cleanup = True
    else:
        cleanup = False
    try:
        policy.save(params, scratch_path)
        restored, _ = policy.load(scratch_path)
    finally:
        if cleanup and os.path.exists(scratch_path):
            os.unlink(scratch_path)
    direct, _ = policy.forward_batch(params, observations)
    roundtrip, _ = policy.forward_batch(restored, observations)
    diff = float(np.max(np.abs(direct - roundtrip)))
    return ConsistencyReport(len(observations), diff, diff == 0.0)
