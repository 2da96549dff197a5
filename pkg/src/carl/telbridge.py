"""Telemetry-to-observation bridge and integration safeguards.

Everything that sits between raw satellite telemetry and the policy
lives here:

  * keyed, unit-tagged telemetry parsing (CSV with header or JSON lines)
    where fields are bound strictly by name, never by column position;
  * dimension-checked quantities, so a voltage can never silently be
    added to a length or fed where an angular rate belongs;
  * observation derivation that reproduces the twin's normalized layout
    from telemetry (frame matrix first, then everything derived from it);
  * shadow inference over a telemetry stream, logging recommendations
    without any command authority, plus an agreement rate against the
    modes the satellite actually flew;
  * downlink packing (whitelist pruning + DEFLATE framing) and named-file
    hot reload of policy/config between cycles.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import attmath, fswactions, policy, twinsim
from .fswactions import ACTION_NAMES, MacroAction
from .twinsim import SimState, SpacecraftConfig

try:
    import tomllib
except ModuleNotFoundError:  # py310
    import tomli as tomllib


class UnitError(ValueError):
    """Dimension or unit mismatch in telemetry handling."""


class MissingFieldError(ValueError):
    """Required telemetry keys are absent; the message lists them."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"telemetry record is missing required fields: {', '.join(self.missing)}")


class TelemetryParseError(ValueError):
    """A telemetry value could not be parsed."""


class OrderingError(ValueError):
    """Telemetry timestamps went backwards."""


class BudgetError(ValueError):
    """Framed downlink packet exceeds the byte budget."""

    def __init__(self, actual: int, allowed: int):
        self.actual = actual
        self.allowed = allowed
        super().__init__(f"downlink packet is {actual} bytes, budget allows {allowed}")


class IntegrityError(ValueError):
    """Downlink packet framing or length check failed."""


# Unit tables: conversion factor to the internal (SI-ish) unit of each
# dimension. Factors are exact by definition.
UNITS = {
    "angle": {"rad": 1.0, "deg": math.pi / 180.0},
    "angular_rate": {"rad_s": 1.0, "deg_s": math.pi / 180.0, "rpm": 2.0 * math.pi / 60.0},
    "length": {"m": 1.0, "km": 1000.0},
    "velocity": {"m_s": 1.0, "km_s": 1000.0},
    "voltage": {"v": 1.0, "mv": 1e-3},
    "current": {"a": 1.0, "ma": 1e-3},
    "time": {"s": 1.0, "ms": 1e-3},
    "dimensionless": {"unitless": 1.0},
}

BASE_UNIT = {dim: next(iter(table)) for dim, table in UNITS.items()}


@dataclass(frozen=True)
class Quantity:
    """A magnitude tagged with its dimension and unit.

    Arithmetic refuses to mix dimensions; conversions use the exact
    factors above. `si` gives the magnitude in the dimension's internal
    unit (rad, rad/s, m, m/s, V, A, s).
    """

    magnitude: float
    dimension: str
    unit: str

    def __post_init__(self):
        if self.dimension not in UNITS:
            raise UnitError(f"unknown dimension: {self.dimension!r}")
        if self.unit not in UNITS[self.dimension]:
            raise UnitError(f"unit {self.unit!r} does not belong to dimension {self.dimension!r}")

    @property
    def si(self) -> float:
        return self.magnitude * UNITS[self.dimension][self.unit]

    def to(self, unit: str) -> "Quantity":
        if unit not in UNITS[self.dimension]:
            raise UnitError(f"cannot convert {self.dimension} to unit {unit!r}")
        return Quantity(self.si / UNITS[self.dimension][unit], self.dimension, unit)

    def _check_same(self, other):
        if not isinstance(other, Quantity):
            raise UnitError(f"expected a Quantity, got {type(other).__name__}")
        if other.dimension != self.dimension:
            raise UnitError(f"cannot combine {self.dimension} with {other.dimension}")

    def __add__(self, other: "Quantity") -> "Quantity":
        self._check_same(other)
        return Quantity(self.si + other.si, self.dimension, BASE_UNIT[self.dimension])

    def __sub__(self, other: "Quantity") -> "Quantity":
        self._check_same(other)
        return Quantity(self.si - other.si, self.dimension, BASE_UNIT[self.dimension])

    def __mul__(self, scalar) -> "Quantity":
        if isinstance(scalar, Quantity):
            raise UnitError("quantity-by-quantity products are not defined; use .si values")
        return Quantity(self.magnitude * float(scalar), self.dimension, self.unit)

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Quantity":
        if isinstance(scalar, Quantity):
            raise UnitError("quantity-by-quantity division is not defined; use .si values")
        return Quantity(self.magnitude / float(scalar), self.dimension, self.unit)


# Canonical telemetry schema: field name -> dimension. Every record must
# carry all of these; `mode` is an optional extra text field.
SCHEMA = {
    "timestamp": "time",
    "est_roll": "angle", "est_pitch": "angle", "est_yaw": "angle",
    "pos_x": "length", "pos_y": "length", "pos_z": "length",
    "vel_x": "velocity", "vel_y": "velocity", "vel_z": "velocity",
    "rate_x": "angular_rate", "rate_y": "angular_rate", "rate_z": "angular_rate",
    "batt_voltage": "voltage",
    "batt_current": "current",
    "batt_current_dir": "dimensionless",
    "wheel_speed_x": "angular_rate", "wheel_speed_y": "angular_rate", "wheel_speed_z": "angular_rate",
}

FORMATS = ("csv_with_header", "json_lines")


@dataclass(eq=False)
class TelemetryRecord:
    """One keyed, unit-tagged telemetry sample."""

    timestamp: float
    quantities: dict
    mode: str | None = None

    def si(self, key: str, dimension: str) -> float:
        """Dimension-checked access; the only way derivations read values."""
        q = self.quantities[key]
        if q.dimension != dimension:
            raise UnitError(f"{key} has dimension {q.dimension}, expected {dimension}")
        return q.si


def bind_columns(names) -> dict:
    """Map raw column/key names onto (canonical key, unit) pairs.

    A name matches a schema key either exactly (internal unit assumed) or
    with a unit suffix, e.g. wheel_speed_x_rpm. Unrelated names map to
    None and are ignored; a schema-key prefix with a bogus suffix is a
    unit error.
    """
    binding = {}
    for name in names:
        if name == "mode":
            binding[name] = ("mode", None)
            continue
        if name in SCHEMA:
            dim = SCHEMA[name]
            binding[name] = (name, BASE_UNIT[dim])
            continue
        matched = None
        for key, dim in SCHEMA.items():
            if name.startswith(key + "_"):
                suffix = name[len(key) + 1:]
                if suffix in UNITS[dim]:
                    matched = (key, suffix)
                    break
                raise UnitError(f"column {name!r}: unknown unit suffix {suffix!r} for {dim}")
        binding[name] = matched
    return binding


def _record_from_mapping(raw: dict, binding: dict) -> TelemetryRecord:
    quantities = {}
    mode = None
    for name, value in raw.items():
        bound = binding.get(name)
        if bound is None:
            continue
        key, unit = bound
        if key == "mode":
            mode = None if value is None else str(value)
            continue
        try:
            magnitude = float(value)
        except (TypeError, ValueError) as exc:
            raise TelemetryParseError(f"field {name!r} has non-numeric value {value!r}") from exc
        if not math.isfinite(magnitude):
            raise TelemetryParseError(f"field {name!r} is not finite: {value!r}")
        quantities[key] = Quantity(magnitude, SCHEMA[key], unit)
    missing = set(SCHEMA) - set(quantities)
    if missing:
        raise MissingFieldError(missing)
    if quantities["batt_current_dir"].magnitude not in (1.0, -1.0):
        raise TelemetryParseError("batt_current_dir must be +1 (charge) or -1 (discharge)")
    timestamp = quantities.pop("timestamp").si
    return TelemetryRecord(timestamp=timestamp, quantities=quantities, mode=mode)


def parse_telemetry(line: str, fmt: str, header: list | None = None) -> TelemetryRecord:
    """Parse one telemetry line; fields bind by name, never by position."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    if fmt == "json_lines":
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TelemetryParseError(f"invalid JSON line: {exc}") from exc
        if not isinstance(raw, dict):
            raise TelemetryParseError("JSON telemetry line must be an object")
        return _record_from_mapping(raw, bind_columns(raw.keys()))
    if header is None:
        raise ValueError("csv_with_header parsing needs the header column names")
    values = next(csv.reader([line]))
    if len(values) != len(header):
        raise TelemetryParseError(f"row has {len(values)} fields, header has {len(header)}")
    return _record_from_mapping(dict(zip(header, values)), bind_columns(header))


def read_telemetry(lines, fmt: str):
    """Generate TelemetryRecords from an iterable of text lines."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    header = None
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if fmt == "csv_with_header" and header is None:
            header = next(csv.reader([line]))
            continue
        yield parse_telemetry(line, fmt, header=header)


class BatteryTracker:
    """State-of-charge by energy counting: integrate V*I*direction over time."""

    def __init__(self, capacity_j: float, initial_energy_j: float):
        if capacity_j <= 0:
            raise ValueError("battery capacity must be positive")
        self.capacity = capacity_j
        self.energy = min(max(initial_energy_j, 0.0), capacity_j)
        self.last_timestamp = None

    def update(self, timestamp: float, voltage_v: float, current_a: float,
               direction: float) -> float:
        if self.last_timestamp is not None:
            dt = timestamp - self.last_timestamp
            if dt < 0:
                raise OrderingError(f"timestamp {timestamp} precedes {self.last_timestamp}")
            self.energy += voltage_v * current_a * direction * dt
            self.energy = min(max(self.energy, 0.0), self.capacity)
        self.last_timestamp = timestamp
        return self.energy / self.capacity


@dataclass
class BridgeConfig:
    """Operational knobs of the bridge around the spacecraft constants."""

    spacecraft: SpacecraftConfig = field(default_factory=SpacecraftConfig)
    # False: telemetry angular rates are relative to the orbit frame and
    # get composed with the orbit rate; True: rates are already inertial.
    rates_are_inertial: bool = False
    initial_charge_fraction: float = 1.0
    mode_map: dict = field(default_factory=lambda: {
        name: MacroAction(code) for code, name in enumerate(ACTION_NAMES)
    })

    def new_tracker(self) -> BatteryTracker:
        cap = self.spacecraft.battery_capacity
        return BatteryTracker(cap, self.initial_charge_fraction * cap)


def derive_state(record: TelemetryRecord, tracker: BatteryTracker,
                 config: BridgeConfig) -> SimState:
    """Rebuild a twin-shaped state from one telemetry record.

    The frame matrix comes first: orbit frame from position/velocity,
    body-from-orbit from the estimated Euler angles, and their product
    is the basis for the attitude MRP and the composed inertial rate.
    """
    sc = config.spacecraft
    r = np.array([record.si("pos_x", "length"), record.si("pos_y", "length"),
                  record.si("pos_z", "length")])
    v = np.array([record.si("vel_x", "velocity"), record.si("vel_y", "velocity"),
                  record.si("vel_z", "velocity")])
    on = attmath.hill_frame(r, v)
    euler = attmath.EulerYpr(
        yaw=record.si("est_yaw", "angle"),
        pitch=record.si("est_pitch", "angle"),
        roll=record.si("est_roll", "angle"),
    )
    bo = attmath.dcm_from_euler321(euler)
    bn = attmath.compose_bn(bo, on)
    sigma = attmath.mrp_from_dcm(bn)

    rates = np.array([record.si("rate_x", "angular_rate"), record.si("rate_y", "angular_rate"),
                      record.si("rate_z", "angular_rate")])
    if config.rates_are_inertial:
        omega = rates
    else:
        omega = attmath.omega_bn(rates, r, v, bo)

    tracker.update(
        record.timestamp,
        record.si("batt_voltage", "voltage"),
        record.si("batt_current", "current"),
        record.quantities["batt_current_dir"].magnitude,
    )
    wheels = np.array([record.si("wheel_speed_x", "angular_rate"),
                       record.si("wheel_speed_y", "angular_rate"),
                       record.si("wheel_speed_z", "angular_rate")])
    return SimState(
        t=record.timestamp, r=r, v=v, sigma_bn=sigma, omega_bn_body=omega,
        battery_energy=tracker.energy, wheel_speeds=wheels,
        active_action=MacroAction.DRIFT, rng_state={},
    )


def derive_observation(record: TelemetryRecord, tracker: BatteryTracker,
                       config: BridgeConfig) -> np.ndarray:
    """Telemetry record -> the policy's 16-element normalized observation."""
    state = derive_state(record, tracker, config)
    return twinsim.observe(state, config.spacecraft)


def synthesize_telemetry(states, config: SpacecraftConfig, voltage: float = 8.0,
                         actions=None) -> list:
    """Invert the derivation: emit telemetry rows from a sequence of twin
    states, with deliberately mixed units (degrees, rpm) so parsers and
    converters get exercised end to end.

    Battery current is chosen so that energy integration reproduces the
    states' battery trajectory from the first state's energy level.
    """
    rows = []
    previous = None
    rad2deg = 180.0 / math.pi
    rads2rpm = 60.0 / (2.0 * math.pi)
    for k, state in enumerate(states):
        bn = attmath.dcm_from_mrp(state.sigma_bn)
        on = attmath.hill_frame(state.r, state.v)
        bo = bn @ on.T
        euler = attmath.euler321_from_dcm(bo)
        h = np.cross(state.r, state.v)
        n = float(np.linalg.norm(h)) / float(state.r @ state.r)
        rate_bo = state.omega_bn_body - bo @ np.array([0.0, 0.0, n])
        if previous is None:
            current, direction = 0.0, 1.0
        else:
            de = state.battery_energy - previous.battery_energy
            dt = state.t - previous.t
            direction = 1.0 if de >= 0 else -1.0
            current = abs(de) / (voltage * dt) if dt > 0 else 0.0
        row = {
            "timestamp": float(state.t),
            "est_roll_deg": euler.roll * rad2deg,
            "est_pitch_deg": euler.pitch * rad2deg,
            "est_yaw_deg": euler.yaw * rad2deg,
            "pos_x": float(state.r[0]), "pos_y": float(state.r[1]), "pos_z": float(state.r[2]),
            "vel_x": float(state.v[0]), "vel_y": float(state.v[1]), "vel_z": float(state.v[2]),
            "rate_x": float(rate_bo[0]), "rate_y": float(rate_bo[1]), "rate_z": float(rate_bo[2]),
            "batt_voltage": float(voltage),
            "batt_current": float(current),
            "batt_current_dir": float(direction),
            "wheel_speed_x_rpm": float(state.wheel_speeds[0]) * rads2rpm,
            "wheel_speed_y_rpm": float(state.wheel_speeds[1]) * rads2rpm,
            "wheel_speed_z_rpm": float(state.wheel_speeds[2]) * rads2rpm,
        }
        if actions is not None:
            row["mode"] = ACTION_NAMES[int(actions[k])]
        rows.append(row)
        previous = state
    return rows


def rows_to_json_lines(rows) -> str:
    return "\n".join(json.dumps(row, sort_keys=True) for row in rows) + "\n"


def rows_to_csv(rows, column_order=None) -> str:
    if not rows:
        return ""
    columns = list(column_order) if column_order else list(rows[0].keys())
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in columns])
    return out.getvalue()


@dataclass(eq=False)
class ShadowLogEntry:
    """One shadow-inference cycle: what the policy would have commanded."""

    timestamp: float
    observation: np.ndarray
    action_probabilities: np.ndarray
    recommended_action: MacroAction
    operator_script: str
    actual_mode: str | None

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "observation": [float(x) for x in self.observation],
            "action_probabilities": [float(p) for p in self.action_probabilities],
            "recommended_action": ACTION_NAMES[self.recommended_action],
            "operator_script": self.operator_script,
            "actual_mode": self.actual_mode,
        }


@dataclass(eq=False)
class ShadowReport:
    entries: list
    skipped: list          # (record index, reason)
    agreement_rate: float | None


def shadow_run(records, params: policy.PolicyParams, config: BridgeConfig,
               drop_dir: str | None = None):
    """Run shadow inference over a telemetry stream.

    Malformed records are skipped with a reason and the run continues; a
    shadow experiment must never halt on bad telemetry. When drop_dir is
    given, the directory is polled for policy.update/config.update files
    between cycles, so swaps never happen mid-cycle.
    """
    tracker = config.new_tracker()
    entries = []
    skipped = []
    agree = 0
    mappable = 0
    for index, record in enumerate(records):
        if drop_dir is not None:
            result = hot_reload(drop_dir, params, config)
            params, config = result.params, result.config
        try:
            state = derive_state(record, tracker, config)
            obs = twinsim.observe(state, config.spacecraft)
            logits, _ = policy.forward(params, obs)
            dist = policy.distribution(logits)
            recommended = policy.argmax(dist)
            program = fswactions.expand(recommended, state, config.spacecraft)
            script = fswactions.render_operator_script(recommended, program)
        except ValueError as exc:
            skipped.append((index, str(exc)))
            continue
        entries.append(ShadowLogEntry(
            timestamp=record.timestamp, observation=obs,
            action_probabilities=dist, recommended_action=recommended,
            operator_script=script.text, actual_mode=record.mode,
        ))
        if record.mode is not None and record.mode in config.mode_map:
            mappable += 1
            if config.mode_map[record.mode] == recommended:
                agree += 1
    rate = agree / mappable if mappable else None
    return ShadowReport(entries=entries, skipped=skipped, agreement_rate=rate)


DOWNLINK_MAGIC = b"CARL"
DOWNLINK_VERSION = 1


def pack_downlink(entries, whitelist, budget: int) -> bytes:
    """Prune entries to the whitelist, serialize as JSON lines, DEFLATE,
    and frame; errors out when the framed packet exceeds the budget."""
    whitelist = sorted(set(whitelist))
    pruned = []
    for i, entry in enumerate(entries):
        if isinstance(entry, ShadowLogEntry):
            entry = entry.to_dict()
        missing = [k for k in whitelist if k not in entry]
        if missing:
            raise ValueError(f"entry {i} lacks whitelisted fields: {', '.join(missing)}")
        pruned.append({k: entry[k] for k in whitelist})
    payload = "\n".join(json.dumps(p, sort_keys=True, separators=(",", ":"))
                        for p in pruned).encode("utf-8")
    compressor = zlib.compressobj(level=9, wbits=-15)
    compressed = compressor.compress(payload) + compressor.flush()
    packet = DOWNLINK_MAGIC + bytes([DOWNLINK_VERSION]) + struct.pack("<I", len(payload)) + compressed
    if len(packet) > budget:
        raise BudgetError(len(packet), budget)
    return packet


def unpack_downlink(packet: bytes) -> list:
    """Invert pack_downlink, verifying framing and length."""
    if len(packet) < 9 or packet[:4] != DOWNLINK_MAGIC:
        raise IntegrityError("bad downlink magic")
    if packet[4] != DOWNLINK_VERSION:
        raise IntegrityError(f"unsupported downlink version {packet[4]}")
    (expected_length,) = struct.unpack("<I", packet[5:9])
    try:
        decompressor = zlib.decompressobj(wbits=-15)
        payload = decompressor.decompress(packet[9:]) + decompressor.flush()
    except zlib.error as exc:
        raise IntegrityError(f"payload does not inflate: {exc}") from exc
    if len(payload) != expected_length:
        raise IntegrityError(f"payload is {len(payload)} bytes, header claims {expected_length}")
    if not payload:
        return []
    return [json.loads(line) for line in payload.decode("utf-8").split("\n")]


POLICY_UPDATE_NAME = "policy.update"
CONFIG_UPDATE_NAME = "config.update"


@dataclass(eq=False)
class HotReloadResult:
    params: policy.PolicyParams
    config: BridgeConfig
    applied: list
    rejected: list     # (filename, reason)


def _quarantine(path: str, reason: str):
    os.replace(path, path + ".rejected")
    with open(path + ".reason", "w", encoding="utf-8") as fh:
        fh.write(reason + "\n")


def hot_reload(drop_dir: str, params: policy.PolicyParams,
               config: BridgeConfig) -> HotReloadResult:
    """Apply exactly-named update files dropped into a directory.

    policy.update must be a loadable checkpoint; config.update a TOML
    patch of spacecraft config keys. Updates are validated completely
    before anything is swapped; invalid files are quarantined with a
    reason file and the previous state stays in force.
    """
    applied = []
    rejected = []

    policy_path = os.path.join(drop_dir, POLICY_UPDATE_NAME)
    if os.path.isfile(policy_path):
        try:
            params, _ = policy.load(policy_path)
            os.replace(policy_path, policy_path + ".applied")
            applied.append(POLICY_UPDATE_NAME)
        except policy.CheckpointError as exc:
            _quarantine(policy_path, str(exc))
            rejected.append((POLICY_UPDATE_NAME, str(exc)))

    config_path = os.path.join(drop_dir, CONFIG_UPDATE_NAME)
    if os.path.isfile(config_path):
        try:
            with open(config_path, "rb") as fh:
                patch = tomllib.load(fh)
            merged = config.spacecraft.to_dict()
            if "mode_loads" in patch:
                merged["mode_loads"] = {**merged["mode_loads"], **patch.pop("mode_loads")}
            merged.update(patch)
            new_spacecraft = SpacecraftConfig.from_dict(merged)
            config = replace(config, spacecraft=new_spacecraft)
            os.replace(config_path, config_path + ".applied")
            applied.append(CONFIG_UPDATE_NAME)
        except (tomllib.TOMLDecodeError, twinsim.ConfigError, ValueError) as exc:
            _quarantine(config_path, str(exc))
            rejected.append((CONFIG_UPDATE_NAME, str(exc)))

    return HotReloadResult(params=params, config=config, applied=applied, rejected=rejected)
