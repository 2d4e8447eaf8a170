"""Experiment orchestration: training loops, pruning schedule, FLOPs ledger.

One engine drives all four run modes. Pro-GRPO samples an enlarged group and
shrinks it at in-process checkpoints via proxy-reward variance filtering;
baseline GRPO is literally the same engine with the checkpoint list stripped;
the post-hoc arms sample the full group to the terminal step and only then
filter the trainee set (paying full sampling cost, which is the point of the
comparison). All stochastic choices derive from the master seed, so runs are
reproducible and the baseline/pro-grpo degeneracy is bitwise.
"""

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import dynamics, grpo, ovf, policy
from .dynamics import Group, NoiseSchedule
from .grpo import LossConfig
from .policy import MlpSpec, PolicyParams
from .rewards import Decoder, RewardSpec, proxy_reward, reward_eval

__all__ = [
    "PruneSchedule",
    "FlopsLedger",
    "FlopsBreakdown",
    "MetricsRow",
    "RunConfig",
    "METRICS_HEADER",
    "RUN_MODES",
    "apply_prune_checkpoint",
    "run_pro_grpo",
    "run_baseline_grpo",
    "run_post_hoc_ovf",
    "run",
    "flops_total",
    "emit_metrics",
    "write_ledger_summary",
]

RUN_MODES = ("pro-grpo", "baseline", "post-hoc-ovf", "uniform-subsample")
METRICS_HEADER = (
    "iteration",
    "mean_reward",
    "reward_std",
    "clustered_frac",
    "survivor_variance",
    "loss",
    "kl",
    "cum_tflops",
    "wall_ms",
)


@dataclass(frozen=True)
class PruneSchedule:
    """Monotone funnel of survivor counts: g_max -> ... -> final_k.

    checkpoints is an ordered tuple of (step_index, survivor_count) pairs with
    strictly increasing interior step indices and strictly decreasing counts;
    the last count equals final_k. An empty checkpoint list describes a
    fixed-size group: final_k = g_max is the plain baseline, while
    final_k < g_max leaves the trainee subset to be chosen after terminal
    rewards (the post-hoc arms).
    """

    g_max: int
    checkpoints: tuple = ()
    final_k: int = 2

    def __post_init__(self):
        object.__setattr__(
            self, "checkpoints", tuple((int(s), int(k)) for s, k in self.checkpoints)
        )
        if self.g_max < 1:
            raise ValueError("g_max must be positive")
        if self.final_k < 2:
            raise ValueError("final_k must be at least 2")
        steps = [s for s, _ in self.checkpoints]
        counts = [k for _, k in self.checkpoints]
        if any(s < 1 for s in steps):
            raise ValueError("checkpoint steps must be interior (>= 1)")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint steps must be strictly increasing")
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError("survivor counts must be strictly decreasing")
        if any(k < 1 for k in counts):
            raise ValueError("survivor counts must be positive")
        if self.checkpoints:
            if self.g_max <= counts[0]:
                raise ValueError("g_max must exceed the first survivor count")
            if counts[-1] != self.final_k:
                raise ValueError("last survivor count must equal final_k")
        elif self.final_k > self.g_max:
            raise ValueError("final_k cannot exceed g_max")

    def segments(self, T: int):
        """Sampling segments as (j_from, j_to, active_count) covering [0, T]."""
        if T < 1:
            raise ValueError("T must be positive")
        if self.checkpoints and self.checkpoints[-1][0] >= T:
            raise ValueError("checkpoint step beyond the sampling horizon")
        out = []
        pos, active = 0, self.g_max
        for step, count in self.checkpoints:
            out.append((pos, step, active))
            pos, active = step, count
        out.append((pos, T, active))
        return out

    def checkpoint_actives(self, T: int):
        """(step, active_before, survivor_count) per checkpoint."""
        if self.checkpoints and self.checkpoints[-1][0] >= T:
            raise ValueError("checkpoint step beyond the sampling horizon")
        out = []
        active = self.g_max
        for step, count in self.checkpoints:
            out.append((step, active, count))
            active = count
        return out


@dataclass
class FlopsLedger:
    """Analytic cost model: atomic per-call TFLOPs and call counters.

    Default atomic costs follow the reference profile for one noise-prediction
    forward, one decode, and one reward evaluation; a training step is charged
    as train_multiplier noise-prediction forwards. Counters count calls, never
    TFLOPs, so totals are always reconstructable from the price sheet.
    """

    cost_noise_pred: float = 3.88
    cost_decode: float = 2.49
    cost_reward: float = 0.34
    train_multiplier: float = 3.0
    n_sampling: int = 0
    n_lookahead: int = 0
    n_decode: int = 0
    n_reward: int = 0
    n_training: int = 0

    def __post_init__(self):
        for name in ("cost_noise_pred", "cost_decode", "cost_reward", "train_multiplier"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")

    @staticmethod
    def _check(n: int) -> int:
        n = int(n)
        if n < 0:
            raise ValueError("counter increments must be non-negative")
        return n

    def charge_noise_pred(self, call_class: str, n: int) -> None:
        n = self._check(n)
        if call_class == "sampling":
            self.n_sampling += n
        elif call_class == "lookahead":
            self.n_lookahead += n
        else:
            raise ValueError(f"unknown noise-prediction call class: {call_class!r}")

    def charge_decode(self, n: int) -> None:
        self.n_decode += self._check(n)

    def charge_reward(self, n: int) -> None:
        self.n_reward += self._check(n)

    def charge_training(self, n: int) -> None:
        """n counts noise-prediction equivalents before the train multiplier."""
        self.n_training += self._check(n)

    def counters(self) -> dict:
        return {
            "sampling": self.n_sampling,
            "lookahead": self.n_lookahead,
            "decode": self.n_decode,
            "reward": self.n_reward,
            "training": self.n_training,
        }

    def total_tflops(self) -> float:
        return (
            (self.n_sampling + self.n_lookahead) * self.cost_noise_pred
            + self.n_decode * self.cost_decode
            + self.n_reward * self.cost_reward
            + self.n_training * self.train_multiplier * self.cost_noise_pred
        )


@dataclass(frozen=True)
class FlopsBreakdown:
    """Closed-form per-group cost of one schedule, by phase, in TFLOPs.

    The n_* fields are the call counts the closed form implies, for exact
    cross-checks against a live ledger's counters.
    """

    sampling: float
    checkpoint: float
    terminal: float
    training: float
    total: float
    speedup: float | None = None
    n_sampling: int = 0
    n_lookahead: int = 0
    n_decode: int = 0
    n_reward: int = 0
    n_training: int = 0


def flops_total(
    schedule: PruneSchedule,
    T: int,
    ledger: FlopsLedger,
    train_multiplier: float | None = None,
    baseline: FlopsBreakdown | None = None,
    rewarded_count: int | None = None,
    trained_count: int | None = None,
) -> FlopsBreakdown:
    """Closed-form per-group totals for one prune schedule.

    sampling: sum over segments of active_count * segment_steps noise
    predictions; checkpoint: one lookahead + decode + reward per trajectory
    active at each checkpoint; terminal: decode + reward per rewarded
    trajectory (final_k unless overridden, e.g. post-hoc arms reward the full
    group); training: trained_count * T noise-prediction equivalents at
    train_multiplier times the forward cost. speedup is baseline.total /
    total when a baseline breakdown is supplied.
    """
    mult = ledger.train_multiplier if train_multiplier is None else float(train_multiplier)
    if mult < 0.0:
        raise ValueError("train_multiplier must be non-negative")
    rewarded = schedule.final_k if rewarded_count is None else int(rewarded_count)
    trained = schedule.final_k if trained_count is None else int(trained_count)
    n_sampling = sum(active * (hi - lo) for lo, hi, active in schedule.segments(T))
    n_lookahead = sum(active for _, active, _ in schedule.checkpoint_actives(T))
    sampling = n_sampling * ledger.cost_noise_pred
    checkpoint = n_lookahead * (ledger.cost_noise_pred + ledger.cost_decode + ledger.cost_reward)
    terminal = rewarded * (ledger.cost_decode + ledger.cost_reward)
    n_training = trained * T
    training = n_training * mult * ledger.cost_noise_pred
    total = sampling + checkpoint + terminal + training
    speedup = None if baseline is None else baseline.total / total
    return FlopsBreakdown(
        sampling=sampling,
        checkpoint=checkpoint,
        terminal=terminal,
        training=training,
        total=total,
        speedup=speedup,
        n_sampling=n_sampling,
        n_lookahead=n_lookahead,
        n_decode=n_lookahead + rewarded,
        n_reward=n_lookahead + rewarded,
        n_training=n_training,
    )


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    mean_reward: float
    reward_std: float
    clustered_frac: float
    survivor_variance: float
    loss: float
    kl: float
    cum_tflops: float
    wall_ms: float


@dataclass(frozen=True)
class RunConfig:
    schedule: NoiseSchedule
    policy: MlpSpec
    reward: RewardSpec
    decoder: Decoder
    prune: PruneSchedule
    loss: LossConfig
    mode: str = "pro-grpo"
    learning_rate: float = 3e-4
    iterations: int = 100
    prompts: int = 1
    seed: int = 0
    cluster_delta: float = 0.5
    epochs: int = 1
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ValueError(f"unknown run mode: {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 1 <= self.prompts <= self.policy.n_contexts:
            raise ValueError("prompts must lie in [1, n_contexts]")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.cluster_delta < 0.0:
            raise ValueError("cluster_delta must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.mode == "pro-grpo":
            # validate checkpoint placement against the sampling horizon
            self.prune.segments(self.schedule.num_steps)
        elif self.mode == "baseline":
            if self.prune.checkpoints or self.prune.final_k != self.prune.g_max:
                raise ValueError("baseline runs use a fixed-size group (no checkpoints, final_k = g_max)")
        else:
            if self.prune.checkpoints:
                raise ValueError("post-hoc arms sample the full group (no checkpoints)")


def apply_prune_checkpoint(
    group: Group,
    survivor_count: int,
    params: PolicyParams,
    schedule: NoiseSchedule,
    spec: RewardSpec,
    decoder: Decoder,
    ledger: FlopsLedger | None,
):
    """Score every active trajectory by its lookahead proxy reward and keep
    the maximum-variance subset of the requested size; the rest are
    terminated in place. Returns the kept trajectory ids (ascending)."""
    active = group.active_ids
    if len(active) <= survivor_count:
        raise ValueError("nothing to prune")
    j = len(group.trajectories[active[0]].steps)
    t = float(group.times[j])
    proxies = [
        proxy_reward(
            group.trajectories[i].state, t, group.context, params, schedule, spec, decoder, ledger=ledger
        )
        for i in active
    ]
    sel = ovf.ovf_select(ovf.as_reward_list(proxies), survivor_count)
    kept = tuple(active[p] for p in sel.kept)
    kept_set = set(kept)
    for i in active:
        if i not in kept_set:
            tr = group.trajectories[i]
            tr.active = False
            tr.prune_step = j
    group.proxy_rewards[j] = list(proxies)
    group.checkpoint_active_ids[j] = list(active)
    group.survivor_history.append((j, kept))
    return kept


def _population_std(values: np.ndarray) -> float:
    dev = values - values.mean()
    return float(np.sqrt(np.mean(dev * dev)))


def _resolve_params(config: RunConfig, params: PolicyParams | None) -> PolicyParams:
    if params is None:
        if config.init_checkpoint is None:
            raise ValueError("no initial parameters: pass params or set init_checkpoint")
        params = policy.load_checkpoint(config.init_checkpoint)
    if params.spec != config.policy:
        raise ValueError("initial parameters do not match the configured policy spec")
    return params


def _dump_group(fh, iteration: int, group: Group) -> None:
    for idx, tr in enumerate(group.trajectories):
        record = {
            "iteration": iteration,
            "context": group.context,
            "trajectory": idx,
            "active": bool(tr.active),
            "prune_step": tr.prune_step,
            "final_reward": tr.final_reward,
            "terminal_state": None if tr.terminal_state is None else tr.terminal_state.tolist(),
            "steps": [
                {
                    "t": st.t,
                    "x": st.x.tolist(),
                    "action": st.action.tolist(),
                    "logprob": st.logprob_old,
                }
                for st in tr.steps
            ],
        }
        fh.write(json.dumps(record) + "\n")


def _run(config, params, ledger, dump_path, params_history):
    params = _resolve_params(config, params)
    if ledger is None:
        ledger = FlopsLedger()
    nsched = config.schedule
    T = nsched.num_steps
    checkpoints = config.prune.checkpoints if config.mode == "pro-grpo" else ()
    ref_params = policy.snapshot(params)
    adam = policy.init_adam(params, lr=config.learning_rate)
    rows = []
    dump_fh = open(dump_path, "w") if dump_path is not None else None
    try:
        for it in range(config.iterations):
            t_start = time.perf_counter()
            context = it % config.prompts
            old_params = policy.snapshot(params)
            group = dynamics.new_group(
                context, config.prune.g_max, nsched, np.random.SeedSequence(entropy=(config.seed, it))
            )
            pos = 0
            for step, count in checkpoints:
                dynamics.advance(group, old_params, nsched, pos, step, ledger=ledger)
                apply_prune_checkpoint(
                    group, count, old_params, nsched, config.reward, config.decoder, ledger
                )
                pos = step
            dynamics.advance(group, old_params, nsched, pos, T, ledger=ledger)
            dynamics.finalize_group(group)

            rewarded = group.active_ids
            for i in rewarded:
                tr = group.trajectories[i]
                tr.final_reward = reward_eval(tr.terminal_state, group.context, config.reward, config.decoder)
            ledger.charge_decode(len(rewarded))
            ledger.charge_reward(len(rewarded))
            reward_vals = np.array(
                [group.trajectories[i].final_reward for i in rewarded], dtype=np.float64
            )

            if config.mode in ("post-hoc-ovf", "uniform-subsample"):
                reward_list = ovf.as_reward_list(reward_vals)
                if config.mode == "post-hoc-ovf":
                    kept_pos = ovf.ovf_select(reward_list, config.prune.final_k).kept
                else:
                    sub_rng = np.random.Generator(
                        np.random.PCG64(np.random.SeedSequence(entropy=(config.seed, it, 1)))
                    )
                    kept_pos = ovf.uniform_subsample(reward_list, config.prune.final_k, sub_rng)
                kept_ids = {rewarded[p] for p in kept_pos}
                for i in rewarded:
                    if i not in kept_ids:
                        group.trajectories[i].active = False

            trainees = group.active_ids
            trainee_vals = np.array(
                [group.trajectories[i].final_reward for i in trainees], dtype=np.float64
            )

            mean_reward = float(reward_vals.mean())
            reward_std = _population_std(reward_vals)
            clustered = ovf.clustered_indices(ovf.as_reward_list(reward_vals), config.cluster_delta)
            clustered_frac = len(clustered) / len(reward_vals)
            survivor_variance = float(np.mean((trainee_vals - trainee_vals.mean()) ** 2))

            degenerate = len(trainees) < 2 or float(trainee_vals.max()) == float(trainee_vals.min())
            if degenerate:
                warnings.warn(f"iteration {it}: zero-signal group, update skipped")
                loss_value = math.nan
                kl_value = math.nan
            else:
                all_steps = [st for i in trainees for st in group.trajectories[i].steps]
                kl_value = grpo.kl_penalty(params, ref_params, all_steps)
                loss_value = None
                for _ in range(config.epochs):
                    loss, grads = grpo.pro_grpo_loss_and_grad(
                        group, params, old_params, ref_params, config.loss
                    )
                    if loss_value is None:
                        loss_value = loss
                    params, adam = policy.adam_update(params, grads, adam)
                    ledger.charge_training(len(trainees) * T)

            rows.append(
                MetricsRow(
                    iteration=it,
                    mean_reward=mean_reward,
                    reward_std=reward_std,
                    clustered_frac=clustered_frac,
                    survivor_variance=survivor_variance,
                    loss=loss_value,
                    kl=kl_value,
                    cum_tflops=ledger.total_tflops(),
                    wall_ms=(time.perf_counter() - t_start) * 1e3,
                )
            )
            if params_history is not None:
                params_history.append(policy.snapshot(params))
            if dump_fh is not None:
                _dump_group(dump_fh, it, group)
    finally:
        if dump_fh is not None:
            dump_fh.close()
    return rows


def run_pro_grpo(config: RunConfig, params=None, ledger=None, dump_path=None, params_history=None):
    if config.mode != "pro-grpo":
        raise ValueError("config mode must be 'pro-grpo'")
    return _run(config, params, ledger, dump_path, params_history)


def run_baseline_grpo(config: RunConfig, params=None, ledger=None, dump_path=None, params_history=None):
    if config.mode != "baseline":
        raise ValueError("config mode must be 'baseline'")
    return _run(config, params, ledger, dump_path, params_history)


def run_post_hoc_ovf(config: RunConfig, params=None, ledger=None, dump_path=None, params_history=None):
    if config.mode not in ("post-hoc-ovf", "uniform-subsample"):
        raise ValueError("config mode must be 'post-hoc-ovf' or 'uniform-subsample'")
    return _run(config, params, ledger, dump_path, params_history)


def run(config: RunConfig, params=None, ledger=None, dump_path=None, params_history=None):
    """Dispatch on config.mode."""
    if config.mode == "pro-grpo":
        return run_pro_grpo(config, params, ledger, dump_path, params_history)
    if config.mode == "baseline":
        return run_baseline_grpo(config, params, ledger, dump_path, params_history)
    return run_post_hoc_ovf(config, params, ledger, dump_path, params_history)


def emit_metrics(rows, path) -> None:
    """Metrics CSV with a fixed header and full-precision (repr) numbers."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for row in rows:
                writer.writerow(
                    [str(row.iteration)]
                    + [
                        repr(float(getattr(row, name)))
                        for name in METRICS_HEADER[1:]
                    ]
                )
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def write_ledger_summary(ledger: FlopsLedger, path) -> None:
    """Per-call-class counts, unit costs, and TFLOPs, plus a total row."""
    unit = {
        "sampling": ledger.cost_noise_pred,
        "lookahead": ledger.cost_noise_pred,
        "decode": ledger.cost_decode,
        "reward": ledger.cost_reward,
        "training": ledger.train_multiplier * ledger.cost_noise_pred,
    }
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("call_class", "count", "unit_cost_tflops", "tflops"))
            for name, count in ledger.counters().items():
                writer.writerow((name, count, repr(unit[name]), repr(count * unit[name])))
            writer.writerow(("total", "", "", repr(ledger.total_tflops())))
    except OSError as exc:
        raise OSError(f"cannot write ledger summary to {path}: {exc}") from exc
