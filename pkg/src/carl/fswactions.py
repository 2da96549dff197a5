"""Macro control actions and their expansion into primitive control
programs plus operator-readable scripts.

The three macro actions map one-to-one onto policy output logits:
drift = 0, charge = 1, desaturate = 2. Expansion is a pure function of
(action, state, config), so the twin and the shadow bridge always agree
on what a recommendation means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import attmath


class MacroAction(IntEnum):
    """High-level command options; integer code doubles as logit index."""

    DRIFT = 0
    CHARGE = 1
    DESATURATE = 2


ACTION_NAMES = ("drift", "charge", "desaturate")


@dataclass(frozen=True)
class ClearQueue:
    """Cancel all queued tasks; no further commanded motion."""


@dataclass(frozen=True)
class SetRate:
    """Bound the commanded slew rate, rad/s."""

    rate: float


@dataclass(eq=False)
class SlewTo:
    """Rate-limited slew to a target attitude (MRP relative to inertial)."""

    target: np.ndarray


@dataclass(frozen=True)
class UnloadMomentum:
    """Dump stored wheel momentum at a fixed rate, N*m*s per second."""

    rate: float


@dataclass(eq=False)
class ControlProgram:
    """Ordered primitive sequence realizing one macro action."""

    action: MacroAction
    primitives: tuple


@dataclass(frozen=True)
class OperatorScript:
    """Numbered human-readable lines mirroring the action's procedure."""

    action: MacroAction
    lines: tuple

    @property
    def text(self) -> str:
        return "\n".join(self.lines)


def _sun_direction(t: float, config) -> np.ndarray:
    # Same model as twinsim.sun_direction; kept inline to stay import-acyclic.
    angle = config.sun_angular_rate * t
    c, s = math.cos(angle), math.sin(angle)
    e = np.asarray(config.epoch_sun_direction, dtype=float)
    return np.array([c * e[0] - s * e[1], s * e[0] + c * e[1], e[2]])


def sun_target_attitude(state, config) -> np.ndarray:
    """Attitude (MRP) that points the panel normal at the sun.

    Applies the minimal rotation taking the current inertial panel normal
    onto the sun line. For the anti-parallel case the rotation axis is
    ambiguous; the first coordinate axis with a nonzero component
    orthogonal to the panel normal breaks the tie deterministically.
    """
    bn = attmath.dcm_from_mrp(state.sigma_bn)
    s_hat = _sun_direction(state.t, config)
    n_body = np.asarray(config.panel_normal_body, dtype=float)
    n_inertial = bn.T @ n_body
    cosang = float(np.clip(n_inertial @ s_hat, -1.0, 1.0))
    axis = np.cross(n_inertial, s_hat)
    axis_norm = float(np.linalg.norm(axis))
    if axis_norm < 1e-12:
        if cosang > 0.0:
            return np.asarray(state.sigma_bn, dtype=float).copy()
        for i in range(3):
            candidate = np.zeros(3)
            candidate[i] = 1.0
            candidate -= (candidate @ n_inertial) * n_inertial
            norm = float(np.linalg.norm(candidate))
            if norm > 1e-9:
                axis = candidate / norm
                break
        angle = math.pi
    else:
        axis = axis / axis_norm
        angle = math.atan2(axis_norm, cosang)
    target_bn = bn @ attmath.rotation_about(axis, angle)
    return attmath.mrp_from_dcm(target_bn)


def expand(action: MacroAction, state, config) -> ControlProgram:
    """Expand a macro action into its primitive control program."""
    if action == MacroAction.DRIFT:
        return ControlProgram(action, (ClearQueue(),))
    target = sun_target_attitude(state, config)
    if action == MacroAction.CHARGE:
        return ControlProgram(action, (
            SetRate(config.slew_rate_max),
            SlewTo(target),
        ))
    if action == MacroAction.DESATURATE:
        return ControlProgram(action, (
            SetRate(config.slew_rate_max),
            SlewTo(target),
            UnloadMomentum(config.desat_unload_rate),
        ))
    raise ValueError(f"unknown macro action: {action!r}")


def _fmt_vec(v: np.ndarray) -> str:
    return "[" + ", ".join(f"{float(x):.6f}" for x in v) + "]"


def render_operator_script(action: MacroAction, program: ControlProgram) -> OperatorScript:
    """Render the numbered operator instructions for an expanded program."""
    if action == MacroAction.DRIFT:
        return OperatorScript(action, ("1 task queue ← ∅",))

    rate = next(p.rate for p in program.primitives if isinstance(p, SetRate))
    target = next(p.target for p in program.primitives if isinstance(p, SlewTo))
    if action == MacroAction.CHARGE:
        return OperatorScript(action, (
            f"1 ω ← {rate:.6f} rad/s",
            "2 σ_BN ← determine(current attitude)",
            "3 ŝ_B ← determine(solar angle using sun sensor)",
            f"4 slew(σ_BN → {_fmt_vec(target)}) at {rate:.6f} rad/s",
        ))
    if action == MacroAction.DESATURATE:
        unload = next(p.rate for p in program.primitives if isinstance(p, UnloadMomentum))
        return OperatorScript(action, (
            f"1 ω ← {rate:.6f} rad/s",
            f"2 d̂ ← solar desaturation attitude {_fmt_vec(target)}",
            "3 σ_BN ← determine(current attitude)",
            f"4 slew(σ_BN → d̂) at {rate:.6f} rad/s",
            f"5 unload reaction wheel momentum at {unload:.3e} N·m·s/s",
        ))
    raise ValueError(f"unknown macro action: {action!r}")
