"""Survival digital twin: an episodic environment over a CubeSat in a
circular low orbit, with macro actions, a power budget, reaction wheel
momentum bookkeeping, and terminal failure states.

The twin is deliberately desk-scale. Orbit dynamics are two-body RK4;
attitude motion is kinematic (rate-limited slews, constant-rate drift);
wheel momentum tracks a constant disturbance bias plus the momentum
exchanged by commanded slews. Episodes end in failure when the battery
empties or any wheel reaches its speed limit, and truncate at the
episode horizon.

Reward design: each decision step survived earns interval/horizon, so a
full-length episode accumulates exactly 1; any failure yields -1.5.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import attmath, fswactions
from .fswactions import MacroAction

try:
    import tomllib
except ModuleNotFoundError:  # py310
    import tomli as tomllib

TERMINAL_REWARD = -1.5
DEFAULT_SUBSTEPS = 10

# Fixed observation layout; training and shadow inference share it.
OBS_FIELDS = (
    "attitude_mrp_x", "attitude_mrp_y", "attitude_mrp_z",
    "body_rate_x", "body_rate_y", "body_rate_z",
    "position_x", "position_y", "position_z",
    "velocity_x", "velocity_y", "velocity_z",
    "battery_fraction",
    "wheel_fraction_x", "wheel_fraction_y", "wheel_fraction_z",
)
OBS_SIZE = len(OBS_FIELDS)

# Body inertia for slew momentum exchange: uniform 10x10x34 cm box,
# averaged over axes. Only the wheel bookkeeping sees this.
_INERTIA_PER_KG = (0.1 ** 2 + 0.34 ** 2) / 12.0

_YEAR_SECONDS = 365.25 * 86400.0


class ConfigError(ValueError):
    """Spacecraft configuration violates an invariant."""


class EpisodeOverError(RuntimeError):
    """step() was called on a terminated or truncated episode."""


@dataclass
class SpacecraftConfig:
    """Physical and scenario parameters of the twin, SI units."""

    mass: float = 4.0                       # kg
    panel_area: float = 0.048               # m^2
    panel_efficiency: float = 0.29
    panel_normal_body: tuple = (0.0, 0.0, 1.0)
    solar_flux: float = 1366.0              # W/m^2
    battery_capacity: float = 40000.0       # J
    base_load: float = 4.0                  # W
    mode_loads: dict = field(default_factory=lambda: {
        MacroAction.DRIFT: 1.0,
        MacroAction.CHARGE: 1.0,
        MacroAction.DESATURATE: 40.0,
    })                                      # W, added on top of base_load
    wheel_max_speed: float = 600.0          # rad/s
    wheel_momentum_max: float = 0.03        # N*m*s
    disturbance_torque_body: tuple = (1.8e-6, 1.5e-6, 2.2e-6)  # N*m
    slew_rate_max: float = 0.03             # rad/s
    desat_unload_rate: float = 8.0e-5       # N*m*s per s
    orbit_radius: float = 6.871e6           # m
    earth_mu: float = 3.986004418e14        # m^3/s^2
    earth_radius: float = 6.371e6           # m
    decision_interval: float = 60.0         # s
    episode_horizon: float = 7200.0         # s
    epoch_sun_direction: tuple = (1.0, 0.0, 0.0)
    sun_angular_rate: float = 2.0 * math.pi / _YEAR_SECONDS  # rad/s

    def validate(self) -> "SpacecraftConfig":
        positive = (
            "mass", "panel_area", "panel_efficiency", "solar_flux",
            "battery_capacity", "base_load", "wheel_max_speed",
            "wheel_momentum_max", "slew_rate_max", "desat_unload_rate",
            "orbit_radius", "earth_mu", "earth_radius",
            "decision_interval", "episode_horizon",
        )
        for name in positive:
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        if self.sun_angular_rate < 0 or not math.isfinite(self.sun_angular_rate):
            raise ConfigError("sun_angular_rate must be finite and non-negative")
        for name in ("panel_normal_body", "epoch_sun_direction"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (3,) or abs(float(np.linalg.norm(vec)) - 1.0) > 1e-6:
                raise ConfigError(f"{name} must be a unit 3-vector")
        if set(self.mode_loads) != set(MacroAction):
            raise ConfigError("mode_loads must cover exactly the three macro actions")
        for action, load in self.mode_loads.items():
            if not (math.isfinite(load) and load > 0):
                raise ConfigError(f"mode load for {action.name} must be positive")
        ratio = self.episode_horizon / self.decision_interval
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("decision_interval must divide episode_horizon")
        if self.orbit_radius <= self.earth_radius:
            raise ConfigError("orbit_radius must exceed earth_radius")
        return self

    @property
    def steps_per_episode(self) -> int:
        return int(round(self.episode_horizon / self.decision_interval))

    def to_toml(self) -> str:
        """Serialize as a TOML table; key names match the field names."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "mode_loads":
                continue
            if isinstance(value, tuple):
                lines.append(f"{f.name} = [{', '.join(repr(float(x)) for x in value)}]")
            else:
                lines.append(f"{f.name} = {value!r}")
        lines.append("")
        lines.append("[mode_loads]")
        for action in MacroAction:
            lines.append(f"{action.name.lower()} = {self.mode_loads[action]!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        """Plain-value mirror of the TOML form (enum keys lowered to names)."""
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "mode_loads":
                out[f.name] = {a.name.lower(): float(value[a]) for a in MacroAction}
            elif isinstance(value, tuple):
                out[f.name] = [float(x) for x in value]
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SpacecraftConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown spacecraft config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "mode_loads" in kwargs:
            loads = {}
            for key, value in kwargs["mode_loads"].items():
                try:
                    loads[MacroAction[key.upper()]] = float(value)
                except KeyError:
                    raise ConfigError(f"unknown mode load key: {key!r}") from None
            kwargs["mode_loads"] = loads
        for key in ("panel_normal_body", "epoch_sun_direction", "disturbance_torque_body"):
            if key in kwargs:
                kwargs[key] = tuple(float(x) for x in kwargs[key])
        return cls(**kwargs).validate()

    @classmethod
    def from_toml(cls, text: str) -> "SpacecraftConfig":
        return cls.from_dict(tomllib.loads(text))


@dataclass(eq=False)
class SimState:
    """Complete twin state between decision steps."""

    t: float
    r: np.ndarray
    v: np.ndarray
    sigma_bn: np.ndarray
    omega_bn_body: np.ndarray
    battery_energy: float
    wheel_speeds: np.ndarray
    active_action: MacroAction
    rng_state: dict


@dataclass(eq=False)
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict


def harden(config: SpacecraftConfig, battery_factor: float, wheel_factor: float) -> SpacecraftConfig:
    """Scale down battery capacity and wheel limits to raise difficulty."""
    for name, factor in (("battery_factor", battery_factor), ("wheel_factor", wheel_factor)):
        if not (0.0 < factor <= 1.0):
            raise ValueError(f"{name} must lie in (0, 1], got {factor!r}")
    return dataclasses.replace(
        config,
        battery_capacity=config.battery_capacity * battery_factor,
        wheel_max_speed=config.wheel_max_speed * wheel_factor,
        wheel_momentum_max=config.wheel_momentum_max * wheel_factor,
    )


def sun_direction(t: float, config: SpacecraftConfig) -> np.ndarray:
    """Unit sun vector at time t: epoch direction rotated about inertial z."""
    return fswactions._sun_direction(t, config)


def eclipse(r: np.ndarray, s_hat: np.ndarray, earth_radius: float) -> bool:
    """Cylindrical shadow test: behind the planet and inside the cylinder."""
    r = np.asarray(r, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    along = float(r @ s_hat)
    if along >= 0.0:
        return False
    perp = r - along * s_hat
    return float(np.linalg.norm(perp)) < earth_radius


def _solar_power_bn(bn: np.ndarray, r: np.ndarray, t: float, config: SpacecraftConfig) -> float:
    s_hat = sun_direction(t, config)
    if eclipse(r, s_hat, config.earth_radius):
        return 0.0
    n_body = np.asarray(config.panel_normal_body, dtype=float)
    cosang = float(n_body @ (bn @ s_hat))
    if cosang <= 0.0:
        return 0.0
    return config.panel_efficiency * config.panel_area * config.solar_flux * cosang


def solar_power(state: SimState, config: SpacecraftConfig) -> float:
    """Panel power in watts for the state's attitude, orbit point, and time."""
    bn = attmath.dcm_from_mrp(state.sigma_bn)
    return _solar_power_bn(bn, state.r, state.t, config)


def propagate_orbit(r: np.ndarray, v: np.ndarray, dt: float, mu: float,
                    max_step: float = 60.0) -> tuple[np.ndarray, np.ndarray]:
    """Two-body propagation via fixed-step RK4 on r_ddot = -mu r / |r|^3.

    dt is split into equal substeps no longer than max_step seconds.
    """
    r = np.asarray(r, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    if dt == 0.0:
        return r, v
    n_steps = max(1, int(math.ceil(abs(dt) / max_step)))
    h = dt / n_steps
    # Scalar inner loop: this runs hot and small arrays pay heavy overhead.
    rx, ry, rz = float(r[0]), float(r[1]), float(r[2])
    vx, vy, vz = float(v[0]), float(v[1]), float(v[2])
    for _ in range(n_steps):
        ax1, ay1, az1 = _accel(rx, ry, rz, mu)
        r2x, r2y, r2z = rx + 0.5 * h * vx, ry + 0.5 * h * vy, rz + 0.5 * h * vz
        v2x, v2y, v2z = vx + 0.5 * h * ax1, vy + 0.5 * h * ay1, vz + 0.5 * h * az1
        ax2, ay2, az2 = _accel(r2x, r2y, r2z, mu)
        r3x, r3y, r3z = rx + 0.5 * h * v2x, ry + 0.5 * h * v2y, rz + 0.5 * h * v2z
        v3x, v3y, v3z = vx + 0.5 * h * ax2, vy + 0.5 * h * ay2, vz + 0.5 * h * az2
        ax3, ay3, az3 = _accel(r3x, r3y, r3z, mu)
        r4x, r4y, r4z = rx + h * v3x, ry + h * v3y, rz + h * v3z
        v4x, v4y, v4z = vx + h * ax3, vy + h * ay3, vz + h * az3
        ax4, ay4, az4 = _accel(r4x, r4y, r4z, mu)
        rx += h / 6.0 * (vx + 2.0 * v2x + 2.0 * v3x + v4x)
        ry += h / 6.0 * (vy + 2.0 * v2y + 2.0 * v3y + v4y)
        rz += h / 6.0 * (vz + 2.0 * v2z + 2.0 * v3z + v4z)
        vx += h / 6.0 * (ax1 + 2.0 * ax2 + 2.0 * ax3 + ax4)
        vy += h / 6.0 * (ay1 + 2.0 * ay2 + 2.0 * ay3 + ay4)
        vz += h / 6.0 * (az1 + 2.0 * az2 + 2.0 * az3 + az4)
    return np.array([rx, ry, rz]), np.array([vx, vy, vz])


def _accel(x: float, y: float, z: float, mu: float) -> tuple[float, float, float]:
    r3 = (x * x + y * y + z * z) ** 1.5
    k = -mu / r3
    return k * x, k * y, k * z


def observe(state: SimState, config: SpacecraftConfig) -> np.ndarray:
    """Assemble the fixed 16-element normalized observation vector."""
    obs = np.empty(OBS_SIZE)
    obs[0:3] = state.sigma_bn
    obs[3:6] = state.omega_bn_body / (2.0 * config.slew_rate_max)
    obs[6:9] = state.r / config.orbit_radius
    v_circ = math.sqrt(config.earth_mu / config.orbit_radius)
    obs[9:12] = state.v / v_circ
    obs[12] = min(max(state.battery_energy / config.battery_capacity, 0.0), 1.0)
    obs[13:16] = state.wheel_speeds / config.wheel_max_speed
    return obs


def reset(config: SpacecraftConfig, seed: int) -> tuple[SimState, np.ndarray]:
    """Start a fresh episode: seeded orbit phase, attitude, wheels, battery.

    The body starts at rest relative to the orbit (Hill) frame, so the
    inertial rate equals the orbit rate mapped into the body frame.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    cp, sp = math.cos(phase), math.sin(phase)
    r = config.orbit_radius * np.array([cp, sp, 0.0])
    v_circ = math.sqrt(config.earth_mu / config.orbit_radius)
    v = v_circ * np.array([-sp, cp, 0.0])

    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    sigma = q[1:] / (1.0 + q[0])

    wheel_speeds = rng.uniform(-0.1, 0.1, size=3) * config.wheel_max_speed
    battery = rng.uniform(0.6, 1.0) * config.battery_capacity

    bn = attmath.dcm_from_mrp(sigma)
    on = attmath.hill_frame(r, v)
    bo = bn @ on.T
    omega = attmath.omega_bn(np.zeros(3), r, v, bo)

    state = SimState(
        t=0.0, r=r, v=v, sigma_bn=sigma, omega_bn_body=omega,
        battery_energy=battery, wheel_speeds=wheel_speeds,
        active_action=MacroAction.DRIFT,
        rng_state=rng.bit_generator.state,
    )
    return state, observe(state, config)


def _finished(state: SimState, config: SpacecraftConfig) -> bool:
    if state.battery_energy <= 0.0:
        return True
    if np.any(np.abs(state.wheel_speeds) >= config.wheel_max_speed):
        return True
    return state.t >= config.episode_horizon - 1e-9


def _rotate_constant_rate(bn: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    wn = float(np.linalg.norm(omega))
    if wn * dt < 1e-15:
        return bn
    return attmath.rotation_about(omega / wn, wn * dt) @ bn


def _slew_substep(bn: np.ndarray, target_bn: np.ndarray, rate: float,
                  dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Advance a rate-limited principal-axis slew by one substep."""
    rel = target_bn @ bn.T
    axis, ang = attmath.principal_rotation(rel)
    budget = rate * dt
    if ang <= budget:
        return target_bn.copy(), axis * (ang / dt)
    return attmath.rotation_about(axis, budget) @ bn, axis * rate


def _unload_wheels(wheel_speeds: np.ndarray, speed_drop: float) -> np.ndarray:
    norm = float(np.linalg.norm(wheel_speeds))
    if norm <= speed_drop:
        return np.zeros(3)
    return wheel_speeds * (1.0 - speed_drop / norm)


def step(state: SimState, action: MacroAction, config: SpacecraftConfig,
         substeps: int = DEFAULT_SUBSTEPS) -> tuple[SimState, StepResult]:
    """Advance one decision interval under a macro action.

    The interval is integrated in `substeps` equal kinematic substeps.
    Failure (battery empty or any wheel at its speed limit) is checked at
    every substep and ends the episode immediately with reward -1.5.
    """
    if _finished(state, config):
        raise EpisodeOverError("step() called on a finished episode")
    action = MacroAction(action)

    program = fswactions.expand(action, state, config)
    target_bn = None
    rate_limit = config.slew_rate_max
    unload_rate = 0.0
    for prim in program.primitives:
        if isinstance(prim, fswactions.SetRate):
            rate_limit = prim.rate
        elif isinstance(prim, fswactions.SlewTo):
            target_bn = attmath.dcm_from_mrp(prim.target)
        elif isinstance(prim, fswactions.UnloadMomentum):
            unload_rate = prim.rate

    dt = config.decision_interval / substeps
    bn = attmath.dcm_from_mrp(state.sigma_bn)
    omega = state.omega_bn_body.copy()
    wheels = state.wheel_speeds.copy()
    energy = state.battery_energy
    r, v = state.r, state.v
    t = state.t

    i_wheel = config.wheel_momentum_max / config.wheel_max_speed
    i_body = _INERTIA_PER_KG * config.mass
    disturbance = np.asarray(config.disturbance_torque_body, dtype=float)
    load = config.base_load + config.mode_loads[action]
    unload_speed_per_s = unload_rate / i_wheel

    failure = None
    power_in_sum = 0.0
    in_eclipse = False
    for k in range(substeps):
        r, v = propagate_orbit(r, v, dt, config.earth_mu)
        t = state.t + (k + 1) * dt
        if target_bn is None:
            bn = _rotate_constant_rate(bn, omega, dt)
            new_omega = omega
        else:
            bn, new_omega = _slew_substep(bn, target_bn, rate_limit, dt)
        wheels = wheels + (disturbance * dt + i_body * (omega - new_omega)) / i_wheel
        omega = new_omega
        if unload_rate > 0.0:
            wheels = _unload_wheels(wheels, unload_speed_per_s * dt)

        s_hat = sun_direction(t, config)
        in_eclipse = eclipse(r, s_hat, config.earth_radius)
        if in_eclipse:
            p_in = 0.0
        else:
            n_body = np.asarray(config.panel_normal_body, dtype=float)
            cosang = float(n_body @ (bn @ s_hat))
            p_in = (config.panel_efficiency * config.panel_area
                    * config.solar_flux * cosang) if cosang > 0.0 else 0.0
        energy = min(energy + (p_in - load) * dt, config.battery_capacity)
        power_in_sum += p_in

        if energy <= 0.0:
            energy = 0.0
            failure = "battery_depleted"
            break
        if np.any(np.abs(wheels) >= config.wheel_max_speed):
            failure = "wheel_saturation"
            break

    substeps_run = k + 1
    if failure is None:
        t = state.t + config.decision_interval

    new_state = SimState(
        t=t, r=r, v=v,
        sigma_bn=attmath.mrp_from_dcm(bn),
        omega_bn_body=omega,
        battery_energy=energy,
        wheel_speeds=wheels,
        active_action=action,
        rng_state=state.rng_state,
    )

    terminated = failure is not None
    truncated = (not terminated) and t >= config.episode_horizon - 1e-9
    reward = TERMINAL_REWARD if terminated else config.decision_interval / config.episode_horizon
    info = {
        "eclipse": in_eclipse,
        "power_in": power_in_sum / substeps_run,
        "power_out": load,
        "failure": failure,
    }
    return new_state, StepResult(observe(new_state, config), reward, terminated, truncated, info)
