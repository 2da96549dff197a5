"""Stochastic macro-action policy: a small tanh MLP with a 3-logit action
head and a scalar value head, plus a portable self-describing checkpoint
format.

The checkpoint embeds the observation layout and action names so that a
stale or misassembled file is rejected at load time instead of silently
feeding misaligned inputs to the network.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .fswactions import ACTION_NAMES, MacroAction
from .twinsim import OBS_FIELDS, OBS_SIZE

HIDDEN = 64
N_ACTIONS = 3
FORMAT_VERSION = 1

_LAYER_SHAPES = {
    "hidden1": ((OBS_SIZE, HIDDEN), (HIDDEN,)),
    "hidden2": ((HIDDEN, HIDDEN), (HIDDEN,)),
    "action_head": ((HIDDEN, N_ACTIONS), (N_ACTIONS,)),
    "value_head": ((HIDDEN, 1), (1,)),
}


class CheckpointError(ValueError):
    """Checkpoint file rejected; the reason is in the message."""


@dataclass(eq=False)
class PolicyParams:
    """Network weights; x @ w + b convention, shapes fixed at 16-64-64."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_act: np.ndarray
    b_act: np.ndarray
    w_val: np.ndarray
    b_val: np.ndarray

    def arrays(self) -> dict:
        return {
            "hidden1": (self.w1, self.b1),
            "hidden2": (self.w2, self.b2),
            "action_head": (self.w_act, self.b_act),
            "value_head": (self.w_val, self.b_val),
        }

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(a.copy() for a in _param_list(self)))


def _param_list(params: PolicyParams) -> list:
    return [params.w1, params.b1, params.w2, params.b2,
            params.w_act, params.b_act, params.w_val, params.b_val]


def zero_params() -> PolicyParams:
    return PolicyParams(
        np.zeros((OBS_SIZE, HIDDEN)), np.zeros(HIDDEN),
        np.zeros((HIDDEN, HIDDEN)), np.zeros(HIDDEN),
        np.zeros((HIDDEN, N_ACTIONS)), np.zeros(N_ACTIONS),
        np.zeros((HIDDEN, 1)), np.zeros(1),
    )


def _orthogonal(rng: np.random.Generator, shape: tuple, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diagonal(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(seed: int) -> PolicyParams:
    """Orthogonal initialization; small action head keeps the start near-uniform."""
    rng = np.random.default_rng(seed)
    return PolicyParams(
        _orthogonal(rng, (OBS_SIZE, HIDDEN), math.sqrt(2.0)), np.zeros(HIDDEN),
        _orthogonal(rng, (HIDDEN, HIDDEN), math.sqrt(2.0)), np.zeros(HIDDEN),
        _orthogonal(rng, (HIDDEN, N_ACTIONS), 0.01), np.zeros(N_ACTIONS),
        _orthogonal(rng, (HIDDEN, 1), 1.0), np.zeros(1),
    )


def forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, float]:
    """Logits and value for one observation vector of length 16."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (OBS_SIZE,):
        raise ValueError(f"observation must have shape ({OBS_SIZE},), got {obs.shape}")
    h1 = np.tanh(obs @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    logits = h2 @ params.w_act + params.b_act
    value = float((h2 @ params.w_val)[0] + params.b_val[0])
    return logits, value


def forward_batch(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized forward pass over an (n, 16) observation matrix."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != OBS_SIZE:
        raise ValueError(f"observation batch must have shape (n, {OBS_SIZE}), got {obs.shape}")
    h1 = np.tanh(obs @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    logits = h2 @ params.w_act + params.b_act
    values = (h2 @ params.w_val + params.b_val)[:, 0]
    return logits, values


def distribution(logits: np.ndarray) -> np.ndarray:
    """Softmax with max subtraction; probabilities sum to 1."""
    shifted = np.asarray(logits, dtype=float) - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def sample(dist: np.ndarray, rng: np.random.Generator) -> MacroAction:
    """Draw an action according to the distribution (seeded generator)."""
    u = rng.random()
    acc = 0.0
    for i in range(N_ACTIONS - 1):
        acc += float(dist[i])
        if u < acc:
            return MacroAction(i)
    return MacroAction(N_ACTIONS - 1)


def argmax(dist: np.ndarray) -> MacroAction:
    """Deterministic mode; ties break toward the lowest action code."""
    return MacroAction(int(np.argmax(dist)))


def flatten(params: PolicyParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _param_list(params)])


def unflatten(vec: np.ndarray) -> PolicyParams:
    out = []
    offset = 0
    for name in ("hidden1", "hidden2", "action_head", "value_head"):
        for shape in _LAYER_SHAPES[name]:
            size = int(np.prod(shape))
            out.append(np.asarray(vec[offset:offset + size], dtype=float).reshape(shape))
            offset += size
    if offset != len(vec):
        raise ValueError(f"parameter vector length {len(vec)} does not match architecture")
    return PolicyParams(*out)


def n_params() -> int:
    return sum(int(np.prod(s)) for shapes in _LAYER_SHAPES.values() for s in shapes)


def save(params: PolicyParams, path: str, metadata: dict | None = None) -> None:
    """Write a checkpoint; floats round-trip bitwise through repr/JSON."""
    doc = {
        "format_version": FORMAT_VERSION,
        "obs_layout": list(OBS_FIELDS),
        "action_names": list(ACTION_NAMES),
        "layers": {
            name: {"weight": w.tolist(), "bias": b.tolist()}
            for name, (w, b) in params.arrays().items()
        },
        "metadata": metadata or {},
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"), allow_nan=False)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> tuple[PolicyParams, dict]:
    """Read and fully validate a checkpoint; raises CheckpointError on any defect."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version: {version!r}")
    if doc.get("obs_layout") != list(OBS_FIELDS):
        raise CheckpointError("observation layout does not match this build")
    if doc.get("action_names") != list(ACTION_NAMES):
        raise CheckpointError("action names do not match this build")
    layers = doc.get("layers")
    if not isinstance(layers, dict) or set(layers) != set(_LAYER_SHAPES):
        raise CheckpointError("layers must be exactly hidden1, hidden2, action_head, value_head")
    arrays = []
    for name in ("hidden1", "hidden2", "action_head", "value_head"):
        w_shape, b_shape = _LAYER_SHAPES[name]
        for key, shape in (("weight", w_shape), ("bias", b_shape)):
            try:
                arr = np.asarray(layers[name][key], dtype=float)
            except (KeyError, TypeError, ValueError) as exc:
                raise CheckpointError(f"layer {name}.{key} is malformed") from exc
            if arr.shape != shape:
                raise CheckpointError(f"layer {name}.{key} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"layer {name}.{key} contains non-finite values")
            arrays.append(arr)
    metadata = doc.get("metadata") or {}
    return PolicyParams(*arrays), metadata
