"""Sampling dynamics shared by the rectified-flow and diffusion backbones.

Internal time s runs from 0 (noise) to 1 (data) for both backbones. The
sampler integrates dx = b(x, s) ds + c(s) dW with Euler-Maruyama on a fixed
grid, where the drift b specializes per backbone:

    SDE   rectified flow:  v_theta - (sigma_t^2 / 2) * score
          diffusion (VP):  -beta(t) x / 2 - ((1 + eta^2) / 2) * sigma_t^2 * score
    ODE   rectified flow:  v_theta
          diffusion (VP):  -beta(t) x / 2 - (sigma_t^2 / 2) * score

with sigma_t^2 = beta(t) for diffusion and the noise coefficient c(s) equal
to sigma_t for rectified flow and eta * sigma_t for diffusion. The score
comes from the network head: the interpolant identity -(x - t v) / (1 - t)
for rectified flow (x0 ~ N(0, I)) and -eps / sigma_bar(t) for diffusion,
where sigma_bar is the marginal noise scale of the forward corruption.

Each trajectory draws its Gaussian increments from its own spawned RNG
sub-stream, so a trajectory's path depends only on (group seed, its index),
never on group size or pruning decisions.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import policy
from .policy import PolicyParams

__all__ = [
    "NoiseSchedule",
    "TrajectoryStep",
    "Trajectory",
    "Group",
    "score_from_velocity",
    "eps_to_score",
    "drift_from_net",
    "drift_sde",
    "drift_ode",
    "drift_net_coeff",
    "em_step",
    "gaussian_step_logprob",
    "new_group",
    "advance",
    "finalize_group",
    "sample_group",
    "ode_lookahead",
    "ode_rollout",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    """Backbone choice plus every time-dependent coefficient the sampler needs."""

    backbone: str = "rectified-flow"  # or "diffusion"
    num_steps: int = 10
    sigma0: float = 0.3  # constant path stochasticity (rectified flow)
    beta_min: float = 0.1  # VP beta at the data end (s = 1)
    beta_max: float = 20.0  # VP beta at the noise end (s = 0)
    eta: float = 1.0  # diffusion stochasticity mixer
    t_clamp: float = 0.96  # rectified-flow grid stays at or below this

    def __post_init__(self):
        if self.backbone not in ("rectified-flow", "diffusion"):
            raise ValueError("backbone must be 'rectified-flow' or 'diffusion'")
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if self.sigma0 < 0 or self.eta < 0:
            raise ValueError("stochasticity coefficients must be non-negative")
        if not 0 < self.t_clamp < 1:
            raise ValueError("t_clamp must lie in (0, 1)")
        if self.beta_min <= 0 or self.beta_max <= 0:
            raise ValueError("beta endpoints must be positive")

    def beta(self, t):
        return self.beta_max + np.asarray(t, dtype=np.float64) * (self.beta_min - self.beta_max)

    def sigma(self, t):
        """Path stochasticity sigma_t entering the drift correction."""
        if self.backbone == "rectified-flow":
            t = np.asarray(t, dtype=np.float64)
            return np.full(t.shape, self.sigma0) if t.ndim else float(self.sigma0)
        return np.sqrt(self.beta(t))

    def noise_coeff(self, t):
        """Coefficient on dW in the sampler."""
        if self.backbone == "rectified-flow":
            return float(self.sigma0)
        return float(self.eta * np.sqrt(self.beta(t)))

    def marginal_coeffs(self, t):
        """Forward-corruption coefficients (alpha_bar, sigma_bar) at internal time t.

        x_t = alpha_bar * x_data + sigma_bar * eps for the diffusion backbone,
        with alpha_bar(1) = 1 at the data end.
        """
        if self.backbone != "diffusion":
            raise ValueError("marginal coefficients are a diffusion-backbone notion")
        t = np.asarray(t, dtype=np.float64)
        integral = self.beta_max * (1.0 - t) + 0.5 * (self.beta_min - self.beta_max) * (1.0 - t**2)
        alpha_bar = np.exp(-0.5 * integral)
        sigma_bar = np.sqrt(np.maximum(1.0 - alpha_bar**2, 0.0))
        return alpha_bar, sigma_bar

    def grid(self) -> np.ndarray:
        """Uniform time grid with num_steps intervals; rectified flow ends at t_clamp."""
        end = self.t_clamp if self.backbone == "rectified-flow" else 1.0
        return np.linspace(0.0, end, self.num_steps + 1)

    @property
    def t_end(self) -> float:
        return self.t_clamp if self.backbone == "rectified-flow" else 1.0


@dataclass
class TrajectoryStep:
    """One recorded sampler transition.

    Besides the core record (state, action, density), the step carries the
    step width, context id, and a reference to the shared schedule so its
    log-density can be re-evaluated under new parameters from the step alone.
    """

    t: float
    x: np.ndarray
    action: np.ndarray
    drift_mean: np.ndarray  # b(x, t) * dt
    noise_scale: float  # noise coefficient * sqrt(dt)
    logprob_old: float
    dt: float = 0.0
    context: int = 0
    schedule: "NoiseSchedule | None" = None


@dataclass
class Trajectory:
    context: int
    seed: int  # stream id within the group
    steps: list = field(default_factory=list)
    active: bool = True
    prune_step: int | None = None
    terminal_state: np.ndarray | None = None
    final_reward: float | None = None
    state: np.ndarray | None = None  # current latent while sampling


@dataclass
class Group:
    context: int
    times: np.ndarray
    trajectories: list
    survivor_history: list = field(default_factory=list)  # (step index, kept trajectory ids)
    proxy_rewards: dict = field(default_factory=dict)  # step index -> list of proxies
    checkpoint_active_ids: dict = field(default_factory=dict)  # step index -> ids the proxies align with
    rngs: list = field(default_factory=list)  # runtime-only per-trajectory streams

    @property
    def active_ids(self) -> list:
        return [i for i, tr in enumerate(self.trajectories) if tr.active]


def score_from_velocity(x, t, v, t_clamp: float = 0.96):
    """Interpolant score -(x - t v) / (1 - t) for the linear path with x0 ~ N(0, I)."""
    if np.any(np.asarray(t) > t_clamp + 1e-12):
        raise ValueError("time clamp violated")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim and x.ndim == t.ndim + 1:
        t = t[..., None]
    return -(x - t * v) / (1.0 - t)


def eps_to_score(eps_pred, t, schedule: NoiseSchedule):
    """Score from a noise prediction: -eps / sigma_bar(t)."""
    _, sigma_bar = schedule.marginal_coeffs(t)
    if np.any(np.asarray(sigma_bar) <= 0.0):
        raise ValueError("score undefined")
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    sb = np.asarray(sigma_bar)
    if eps_pred.ndim > sb.ndim:
        sb = sb[..., None]
    return -eps_pred / sb


def _score(x, t, net_out, schedule: NoiseSchedule):
    if schedule.backbone == "rectified-flow":
        return score_from_velocity(x, t, net_out, schedule.t_clamp)
    return eps_to_score(net_out, t, schedule)


def drift_from_net(x, t, net, schedule: NoiseSchedule):
    """SDE drift given an already-computed network output.

    Factored out so the sampler and the loss share one arithmetic path: the
    loss re-evaluates stored steps under new parameters and, at the
    sampling-time parameters, must reproduce the stored densities bitwise.
    """
    score = _score(x, t, net, schedule)
    sigma_sq = np.asarray(schedule.sigma(t)) ** 2
    if schedule.backbone == "rectified-flow":
        return net - 0.5 * sigma_sq * score
    x = np.asarray(x, dtype=np.float64)
    f = -0.5 * np.asarray(schedule.beta(t)) * x
    return f - 0.5 * (1.0 + schedule.eta**2) * sigma_sq * score


def drift_sde(x, t, params: PolicyParams, schedule: NoiseSchedule, context: int = 0):
    """SDE drift at scalar time t for a batch (or single point) of latents."""
    net = policy.forward(params, x, t, context)
    return drift_from_net(x, t, net, schedule)


def drift_ode(x, t, params: PolicyParams, schedule: NoiseSchedule, context: int = 0):
    """Probability-flow drift: plain velocity for rectified flow, half-score
    correction for diffusion."""
    net = policy.forward(params, x, t, context)
    if schedule.backbone == "rectified-flow":
        return net
    x = np.asarray(x, dtype=np.float64)
    score = eps_to_score(net, t, schedule)
    sigma_sq = np.asarray(schedule.sigma(t)) ** 2
    return -0.5 * np.asarray(schedule.beta(t)) * x - 0.5 * sigma_sq * score


def drift_net_coeff(schedule: NoiseSchedule, t: float) -> float:
    """d(drift_sde)/d(net output), a scalar: the SDE drift is affine in the
    network head for both backbones, which is what lets loss gradients flow
    through a single backward call."""
    if schedule.backbone == "rectified-flow":
        sigma_sq = float(schedule.sigma(t)) ** 2
        return 1.0 - 0.5 * sigma_sq * t / (1.0 - t)
    _, sigma_bar = schedule.marginal_coeffs(t)
    sigma_sq = float(schedule.beta(t))
    return 0.5 * (1.0 + schedule.eta**2) * sigma_sq / float(sigma_bar)


def gaussian_step_logprob(action, mean, scale: float) -> float:
    """Log density of an isotropic Gaussian step N(mean, scale^2 I)."""
    if scale <= 0.0:
        raise ValueError("degenerate policy density")
    diff = np.asarray(action, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    d = diff.size
    return float(-0.5 * d * _LOG_2PI - d * math.log(scale) - float(diff @ diff) / (2.0 * scale * scale))


def em_step(x, t: float, dt: float, params: PolicyParams, schedule: NoiseSchedule, rng: np.random.Generator, context: int = 0) -> TrajectoryStep:
    """One Euler-Maruyama step; returns the recorded step (next state = x + action)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.ascontiguousarray(x, dtype=np.float64)
    b = drift_sde(x, t, params, schedule, context)
    drift_mean = b * dt
    scale = schedule.noise_coeff(t) * math.sqrt(dt)
    if scale > 0.0:
        action = drift_mean + scale * rng.standard_normal(x.size)
        logprob = gaussian_step_logprob(action, drift_mean, scale)
    else:
        action = drift_mean.copy()
        logprob = math.nan
    if not (np.all(np.isfinite(action)) and np.all(np.isfinite(x + action))):
        raise FloatingPointError("sampler diverged")
    return TrajectoryStep(
        t=float(t),
        x=x,
        action=action,
        drift_mean=drift_mean,
        noise_scale=scale,
        logprob_old=logprob,
        dt=float(dt),
        context=context,
        schedule=schedule,
    )


def new_group(context: int, g_count: int, schedule: NoiseSchedule, seed) -> Group:
    """Fresh group with per-trajectory RNG sub-streams.

    seed may be an int or a numpy SeedSequence; trajectory i always receives
    child stream i, so paths are invariant to group size and pruning. Initial
    latents are drawn lazily from each trajectory's own stream.
    """
    if g_count < 1:
        raise ValueError("empty group")
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = base.spawn(g_count)
    trajectories = []
    rngs = []
    for i, child in enumerate(children):
        trajectories.append(Trajectory(context=context, seed=i))
        rngs.append(np.random.Generator(np.random.PCG64(child)))
    return Group(context=context, times=schedule.grid(), trajectories=trajectories, rngs=rngs)


def _ensure_started(group: Group, latent_dim: int) -> None:
    for tr, rng in zip(group.trajectories, group.rngs):
        if tr.state is None:
            tr.state = rng.standard_normal(latent_dim)


def advance(group: Group, params: PolicyParams, schedule: NoiseSchedule, j_from: int, j_to: int, ledger=None) -> None:
    """Advance every active trajectory from step index j_from to j_to.

    The drift net is evaluated one trajectory at a time. Batched BLAS calls
    are not bitwise-reproducible row by row across batch sizes, and the loss
    later recomputes each stored step's log density with the sampling-time
    parameters expecting an exact match, so every density-bearing evaluation
    here and in the loss goes through the same single-row code path.
    """
    d = params.spec.latent_dim
    _ensure_started(group, d)
    times = group.times
    if not 0 <= j_from <= j_to <= len(times) - 1:
        raise ValueError("step range out of bounds")
    for j in range(j_from, j_to):
        ids = group.active_ids
        if not ids:
            raise ValueError("degenerate group")
        t = float(times[j])
        dt = float(times[j + 1] - times[j])
        scale = schedule.noise_coeff(t) * math.sqrt(dt)
        if ledger is not None:
            ledger.charge_noise_pred("sampling", len(ids))
        for i in ids:
            tr = group.trajectories[i]
            b = drift_sde(tr.state, t, params, schedule, group.context)
            drift_mean = b * dt
            if scale > 0.0:
                action = drift_mean + scale * group.rngs[i].standard_normal(d)
                logprob = gaussian_step_logprob(action, drift_mean, scale)
            else:
                action = drift_mean.copy()
                logprob = math.nan
            nxt = tr.state + action
            if not np.all(np.isfinite(nxt)):
                raise FloatingPointError(f"sampler diverged (trajectory {i})")
            tr.steps.append(
                TrajectoryStep(
                    t=t,
                    x=tr.state,
                    action=action,
                    drift_mean=drift_mean,
                    noise_scale=scale,
                    logprob_old=logprob,
                    dt=dt,
                    context=group.context,
                    schedule=schedule,
                )
            )
            tr.state = nxt


def finalize_group(group: Group) -> None:
    """Record terminal states for trajectories that reached the end of the grid."""
    n_steps = len(group.times) - 1
    for tr in group.trajectories:
        if tr.active:
            if len(tr.steps) != n_steps:
                raise ValueError("trajectory did not reach the terminal time")
            tr.terminal_state = tr.state


def sample_group(context: int, g_count: int, params: PolicyParams, schedule: NoiseSchedule, seed, ledger=None) -> Group:
    """Roll a full group to the terminal time with no pruning."""
    group = new_group(context, g_count, schedule, seed)
    advance(group, params, schedule, 0, schedule.num_steps, ledger=ledger)
    finalize_group(group)
    return group


def ode_lookahead(x, t: float, params: PolicyParams, schedule: NoiseSchedule, context: int = 0):
    """Single-Euler-step terminal preview: x + (t_end - t) * drift_ode(x, t).

    At t = t_end the preview is x itself and no drift evaluation happens.
    """
    t_end = schedule.t_end
    if t > t_end:
        raise ValueError("lookahead start time beyond the terminal time")
    x = np.asarray(x, dtype=np.float64)
    if t == t_end:
        return x.copy()
    return x + (t_end - t) * drift_ode(x, t, params, schedule, context)


def ode_rollout(x, j_from: int, params: PolicyParams, schedule: NoiseSchedule, context: int = 0):
    """Multi-step Euler integration of the probability-flow ODE from grid index
    j_from to the terminal time. Reference dynamics for lookahead fidelity."""
    x = np.asarray(x, dtype=np.float64)
    times = schedule.grid()
    for j in range(j_from, len(times) - 1):
        t = float(times[j])
        dt = float(times[j + 1] - times[j])
        x = x + dt * drift_ode(x, t, params, schedule, context)
    return x
