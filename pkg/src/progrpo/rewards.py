"""Reward functions over decoded samples, and the terminal-preview proxy.

Rewards are deterministic scalar functions of the decoded point y (and the
prompt context when targets are context conditioned):

    gaussian-bump     exp(-||y - target||^2 / (2 tau^2)), in (0, 1]
    ring-distance     -abs(||y|| - r0) with r0 = ||target||
    halfplane-margin  tanh(<target, y>)
    composite         convex combination of component rewards

The proxy reward evaluates the same reward on a one-step ODE terminal
preview of an in-progress trajectory, which is what pruning checkpoints rank
trajectories by.
"""

from dataclasses import dataclass

import numpy as np

from . import dynamics
from .policy import PolicyParams

__all__ = [
    "RewardSpec",
    "Decoder",
    "decode",
    "reward_eval",
    "composite_reward",
    "proxy_reward",
    "ring_mode_centers",
]

_KINDS = ("gaussian-bump", "ring-distance", "halfplane-margin", "composite")


@dataclass(frozen=True)
class RewardSpec:
    kind: str
    target: np.ndarray | None = None  # (d,) or (n_contexts, d) when context conditioned
    temperature: float = 1.0
    components: tuple = ()
    weights: tuple = ()
    context_conditioned: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown reward kind: {self.kind!r}")
        if self.kind == "composite":
            if not self.components:
                raise ValueError("composite reward needs components")
            if len(self.components) != len(self.weights):
                raise ValueError("component weights must align")
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise ValueError("composite weights must be non-negative and sum to 1")
        else:
            if self.target is None:
                raise ValueError("reward needs a target")
            target = np.asarray(self.target, dtype=np.float64)
            if self.context_conditioned and target.ndim != 2:
                raise ValueError("context-conditioned target must be (n_contexts, d)")
            if not self.context_conditioned and target.ndim != 1:
                raise ValueError("target must be a point")
            object.__setattr__(self, "target", target)
        if self.kind == "gaussian-bump" and self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class Decoder:
    kind: str = "identity"  # or "fixed-linear"
    matrix: np.ndarray | None = None  # (out, in), fixed

    def __post_init__(self):
        if self.kind not in ("identity", "fixed-linear"):
            raise ValueError("decoder kind must be 'identity' or 'fixed-linear'")
        if self.kind == "fixed-linear":
            if self.matrix is None:
                raise ValueError("fixed-linear decoder needs a matrix")
            m = np.ascontiguousarray(self.matrix, dtype=np.float64)
            if m.ndim != 2:
                raise ValueError("decoder matrix must be 2-d")
            object.__setattr__(self, "matrix", m)


def decode(decoder: Decoder, z):
    z = np.asarray(z, dtype=np.float64)
    if decoder.kind == "identity":
        return z
    return z @ decoder.matrix.T


def _target_for(spec: RewardSpec, context: int) -> np.ndarray:
    if spec.context_conditioned:
        if not 0 <= context < spec.target.shape[0]:
            raise ValueError("context id out of range")
        return spec.target[context]
    return spec.target


def reward_eval(x, context: int, spec: RewardSpec, decoder: Decoder):
    """Decode x and score it: a float for one point, a vector for a batch (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("reward input must be finite")
    single = x.ndim == 1
    y = decode(decoder, x[None, :] if single else x)
    if spec.kind == "gaussian-bump":
        diff = y - _target_for(spec, context)
        r = np.exp(-np.sum(diff**2, axis=1) / (2.0 * spec.temperature**2))
    elif spec.kind == "ring-distance":
        r0 = float(np.linalg.norm(_target_for(spec, context)))
        r = -np.abs(np.linalg.norm(y, axis=1) - r0)
    elif spec.kind == "halfplane-margin":
        r = np.tanh(y @ _target_for(spec, context))
    else:  # composite; components see the already-decoded point
        passthrough = Decoder()
        r = np.zeros(y.shape[0])
        for w, comp in zip(spec.weights, spec.components):
            r = r + w * np.asarray(reward_eval(y, context, comp, passthrough))
    if not np.all(np.isfinite(r)):
        raise ValueError("reward must be finite")
    return float(r[0]) if single else r


def composite_reward(x, context: int, specs, weights, decoder: Decoder):
    """Weighted sum of component rewards; weights must pair off with specs."""
    if len(specs) != len(weights):
        raise ValueError("component weights must align")
    combined = RewardSpec(kind="composite", components=tuple(specs), weights=tuple(weights))
    return reward_eval(x, context, combined, decoder)


def proxy_reward(
    x,
    t: float,
    context: int,
    params: PolicyParams,
    schedule: dynamics.NoiseSchedule,
    spec: RewardSpec,
    decoder: Decoder,
    ledger=None,
):
    """Reward of the one-step ODE terminal preview from state x at time t.

    Charges the ledger one lookahead noise prediction (when a drift evaluation
    actually happens, i.e. t < t_end), one decode, and one reward evaluation
    per previewed state when a ledger is supplied.
    """
    x = np.asarray(x, dtype=np.float64)
    count = 1 if x.ndim == 1 else x.shape[0]
    preview = dynamics.ode_lookahead(x, t, params, schedule, context)
    r = reward_eval(preview, context, spec, decoder)
    if ledger is not None:
        if t < schedule.t_end:
            ledger.charge_noise_pred("lookahead", count)
        ledger.charge_decode(count)
        ledger.charge_reward(count)
    return r


def ring_mode_centers(n_modes: int, radius: float) -> np.ndarray:
    """Centers of the equally spaced 2-D ring mixture, mode 0 on the +x axis."""
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return np.stack((radius * np.cos(angles), radius * np.sin(angles)), axis=1)
