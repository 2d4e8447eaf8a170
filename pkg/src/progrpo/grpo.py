"""Group-relative policy optimization over survivor trajectories.

Advantages are normalized against the survivor group's own population
statistics, importance ratios are per-step Gaussian density ratios against the
stored sampling-time log-probabilities, and the loss is the negated clipped
surrogate with a mean-squared KL penalty toward a frozen reference policy:

    L = -(1/K)(1/T) sum_i sum_j min(r_ij A_i, clip(r_ij, 1-eps, 1+eps) A_i)
        + beta * mean_ij ||mean_theta - mean_ref||^2 / (2 scale^2)

Gradients flow only through the new policy's per-step log density (and the KL
term); the advantage and the old log-probability are constants. Accumulation
runs in fixed trajectory order so totals are bitwise reproducible.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import policy
from .dynamics import Group, TrajectoryStep, drift_from_net, drift_net_coeff, drift_sde, gaussian_step_logprob
from .policy import PolicyGrads, PolicyParams

__all__ = [
    "AdvantageSet",
    "LossConfig",
    "normalized_advantages",
    "step_logprob",
    "importance_ratio",
    "clipped_surrogate",
    "kl_penalty",
    "pro_grpo_loss_and_grad",
    "zero_grads",
]

# Exponent clamp guarding exp() in the importance ratio.
RATIO_EXP_CLAMP = 30.0


@dataclass(frozen=True)
class AdvantageSet:
    rewards: np.ndarray
    mean: float
    std: float  # population standard deviation
    epsilon: float
    advantages: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    clip_eps: float = 0.2
    kl_beta: float = 1e-3
    adv_epsilon: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (self.kl_beta >= 0.0 and math.isfinite(self.kl_beta)):
            raise ValueError("kl_beta must be finite and non-negative")
        if not (self.adv_epsilon > 0.0 and math.isfinite(self.adv_epsilon)):
            raise ValueError("adv_epsilon must be finite and positive")


def normalized_advantages(rewards, adv_epsilon: float) -> AdvantageSet:
    """A_i = (R_i - mu) / (sigma + epsilon) with population statistics."""
    values = np.asarray(rewards, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(values)):
        raise ValueError("rewards must be finite")
    if adv_epsilon <= 0.0:
        raise ValueError("adv_epsilon must be positive")
    mean = float(values.mean())
    dev = values - mean
    std = float(np.sqrt(np.mean(dev * dev)))
    advantages = dev / (std + adv_epsilon)
    return AdvantageSet(rewards=values, mean=mean, std=std, epsilon=float(adv_epsilon), advantages=advantages)


def step_logprob(step: TrajectoryStep, params: PolicyParams) -> float:
    """Log density of the recorded action under the current parameters' drift.

    Evaluates the drift net on the stored state through the same single-row
    path the sampler used, so at the sampling-time parameters the result
    equals the stored ``logprob_old`` bitwise.
    """
    if step.noise_scale <= 0.0:
        raise ValueError("degenerate policy density")
    if step.schedule is None:
        raise ValueError("step carries no schedule")
    b = drift_sde(step.x, step.t, params, step.schedule, step.context)
    return gaussian_step_logprob(step.action, b * step.dt, step.noise_scale)


def importance_ratio(logp_new: float, logp_old: float) -> float:
    """exp(logp_new - logp_old) with the exponent clamped to +/-30."""
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise ValueError("log-probabilities must be finite")
    z = logp_new - logp_old
    z = max(-RATIO_EXP_CLAMP, min(RATIO_EXP_CLAMP, z))
    return math.exp(z)


def clipped_surrogate(ratio: float, advantage: float, clip_eps: float) -> float:
    """min(r A, clip(r, 1-eps, 1+eps) A)."""
    if ratio < 0.0:
        raise ValueError("ratio must be non-negative")
    clipped = max(1.0 - clip_eps, min(1.0 + clip_eps, ratio))
    return min(ratio * advantage, clipped * advantage)


def kl_penalty(params: PolicyParams, ref_params: PolicyParams, steps) -> float:
    """Mean over steps of KL(N(m_theta, s^2 I) || N(m_ref, s^2 I)).

    Equal covariances reduce the Gaussian KL to ||m_theta - m_ref||^2 / (2 s^2)
    per step.
    """
    steps = list(steps)
    if not steps:
        raise ValueError("empty step list")
    total = 0.0
    for step in steps:
        s = step.noise_scale
        if s <= 0.0:
            raise ValueError("degenerate policy density")
        if step.schedule is None:
            raise ValueError("step carries no schedule")
        b_new = drift_sde(step.x, step.t, params, step.schedule, step.context)
        b_ref = drift_sde(step.x, step.t, ref_params, step.schedule, step.context)
        dmean = (b_new - b_ref) * step.dt
        total += float(dmean @ dmean) / (2.0 * s * s)
    return total / len(steps)


def zero_grads(params: PolicyParams) -> PolicyGrads:
    return PolicyGrads(
        weights=tuple(np.zeros_like(w) for w in params.weights),
        biases=tuple(np.zeros_like(b) for b in params.biases),
    )


def pro_grpo_loss_and_grad(
    group: Group,
    params: PolicyParams,
    old_params: PolicyParams,
    ref_params: PolicyParams,
    config: LossConfig,
):
    """Loss and exact parameter gradients over the group's survivors.

    Survivor terminal rewards feed the group-normalized advantages; each
    survivor contributes T clipped per-step surrogate terms weighted 1/(K T),
    and the KL penalty (also averaged over the K T steps) pulls the policy
    toward the frozen reference. Survivors with all-equal rewards carry no
    learning signal: the call warns "zero-signal group" and returns a zero
    loss with zero gradients.
    """
    del old_params  # old log-probs are the stored sampling-time values
    survivors = [tr for tr in group.trajectories if tr.active]
    if len(survivors) < 2:
        raise ValueError("degenerate group")
    n_steps = len(group.times) - 1
    for tr in survivors:
        if tr.final_reward is None or len(tr.steps) != n_steps:
            raise ValueError("survivor lacks a complete rewarded trajectory")
    rewards = np.array([tr.final_reward for tr in survivors], dtype=np.float64)
    if float(rewards.max()) == float(rewards.min()):
        warnings.warn("zero-signal group")
        return 0.0, zero_grads(params)

    adv = normalized_advantages(rewards, config.adv_epsilon)
    K = len(survivors)
    inv = 1.0 / (K * n_steps)
    spec = params.spec

    surrogate_sum = 0.0
    kl_sum = 0.0
    grads = zero_grads(params)
    for i, tr in enumerate(survivors):
        a_i = float(adv.advantages[i])
        for step in tr.steps:
            s = step.noise_scale
            if s <= 0.0:
                raise ValueError("degenerate policy density")
            feats = policy.features(spec, step.x, step.t, step.context)
            out, hiddens = policy.forward_cached(params, feats)
            net = out[0]
            b_new = drift_from_net(step.x, step.t, net, step.schedule)
            m_new = b_new * step.dt
            logp_new = gaussian_step_logprob(step.action, m_new, s)
            z = logp_new - step.logprob_old
            r = importance_ratio(logp_new, step.logprob_old)
            clipped = max(1.0 - config.clip_eps, min(1.0 + config.clip_eps, r))
            term_unclipped = r * a_i
            term_clipped = clipped * a_i
            surrogate_sum += min(term_unclipped, term_clipped)

            # d(term)/d(logp_new): the unclipped branch carries gradient r*A
            # when the min selects it (ties included) and the exponent clamp
            # is inactive; the clipped branch is flat in the parameters.
            g_lp = r * a_i if (term_unclipped <= term_clipped and abs(z) < RATIO_EXP_CLAMP) else 0.0

            b_ref = drift_sde(step.x, step.t, ref_params, step.schedule, step.context)
            dmean = m_new - b_ref * step.dt
            kl_sum += float(dmean @ dmean) / (2.0 * s * s)

            # Chain rule onto the drift mean: the loss is
            #   -inv * term + beta * inv * KL_step,
            # d(logp)/d(m) = (a - m)/s^2 and d(KL_step)/d(m) = dmean/s^2.
            dl_dm = (-inv * g_lp) * (step.action - m_new) / (s * s)
            if config.kl_beta != 0.0:
                dl_dm = dl_dm + (config.kl_beta * inv) * dmean / (s * s)
            # m = b * dt and the drift is affine in the net output with a
            # scalar per-time coefficient.
            coeff = step.dt * drift_net_coeff(step.schedule, step.t)
            upstream = (dl_dm * coeff)[None, :]
            g = policy.backward_cached(params, feats, hiddens, upstream)
            for acc, dw in zip(grads.weights, g.weights):
                acc += dw
            for acc, db in zip(grads.biases, g.biases):
                acc += db

    loss = -surrogate_sum * inv + config.kl_beta * (kl_sum * inv)
    return float(loss), grads
