"""Supervised pretraining of the toy generator.

The rectified-flow backbone regresses the straight-path velocity x1 - x0 at
interpolated points x_t = (1 - t) x0 + t x1; the diffusion backbone regresses
the injected noise at forward-corrupted points x_t = alpha_bar x1 +
sigma_bar eps. Both draw fresh i.i.d. batches from a synthetic 2D dataset, so
training sees the data distribution directly rather than a finite shard.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import policy
from .dynamics import NoiseSchedule
from .policy import MlpSpec, PolicyParams
from .rewards import ring_mode_centers

__all__ = [
    "DatasetSpec",
    "PretrainConfig",
    "sample_dataset",
    "flow_matching_loss",
    "ddpm_loss",
    "pretrain_run",
]

DATASET_KINDS = ("gaussian-mixture-ring", "two-moons-like", "single-gaussian")


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic 2D data distribution.

    prompt_modes assigns one mixture component to each prompt id; when set,
    sampled points carry the prompt they were drawn for, which makes the
    conditional generator learnable through its context input. When unset all
    points carry context 0 and the full mixture is sampled unconditionally.
    """

    kind: str = "gaussian-mixture-ring"
    n_modes: int = 8
    radius: float = 4.0
    std: float = 0.3
    prompt_modes: tuple | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind: {self.kind!r}")
        if self.n_modes < 1:
            raise ValueError("mode count must be >= 1")
        if self.std < 0.0:
            raise ValueError("component std must be non-negative")
        if self.radius < 0.0:
            raise ValueError("radius must be non-negative")
        if self.prompt_modes is not None:
            object.__setattr__(self, "prompt_modes", tuple(int(m) for m in self.prompt_modes))
            if not self.prompt_modes:
                raise ValueError("prompt_modes must name at least one mode")
            if any(not 0 <= m < self.n_modes for m in self.prompt_modes):
                raise ValueError("prompt mode index out of range")


def dataset_centers(spec: DatasetSpec) -> np.ndarray:
    """Component means of the mixture, shape (n_modes, 2)."""
    if spec.kind == "gaussian-mixture-ring":
        return ring_mode_centers(spec.n_modes, spec.radius)
    if spec.kind == "single-gaussian":
        return np.zeros((1, 2))
    # two-moons-like: upper arc centered at origin, lower arc shifted right
    # and up, both scaled by the radius; centers summarize the two arcs.
    return np.array([[0.0, 0.5], [1.0, 0.0]]) * spec.radius


def sample_dataset(spec: DatasetSpec, n: int, rng: np.random.Generator) -> list:
    """n i.i.d. draws as (point, context) pairs, deterministic given the rng."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.kind == "single-gaussian":
        points = spec.std * rng.standard_normal((n, 2))
        contexts = np.zeros(n, dtype=int)
    elif spec.kind == "gaussian-mixture-ring":
        centers = ring_mode_centers(spec.n_modes, spec.radius)
        if spec.prompt_modes is None:
            contexts = np.zeros(n, dtype=int)
            comp = rng.integers(0, spec.n_modes, size=n)
        else:
            contexts = rng.integers(0, len(spec.prompt_modes), size=n)
            comp = np.asarray(spec.prompt_modes)[contexts]
        points = centers[comp] + spec.std * rng.standard_normal((n, 2))
    else:  # two-moons-like
        if spec.prompt_modes is None:
            contexts = np.zeros(n, dtype=int)
            comp = rng.integers(0, 2, size=n)
        else:
            contexts = rng.integers(0, len(spec.prompt_modes), size=n)
            comp = np.asarray(spec.prompt_modes)[contexts] % 2
        theta = math.pi * rng.random(n)
        upper = np.stack([np.cos(theta), np.sin(theta) - 0.25], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.25 - np.sin(theta)], axis=1)
        points = np.where(comp[:, None] == 0, upper, lower) * spec.radius
        points = points + spec.std * rng.standard_normal((n, 2))
    return [(points[i], int(contexts[i])) for i in range(n)]


def _stack(batch):
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    xs = np.stack([np.asarray(p, dtype=np.float64) for p, _ in batch])
    cs = np.array([c for _, c in batch], dtype=int)
    return xs, cs


def flow_matching_loss(params: PolicyParams, batch, rng: np.random.Generator):
    """Velocity-regression loss and exact gradients on one batch.

    Per item: x0 ~ N(0, I), t ~ U(0,1), x_t = (1-t) x0 + t x1, and the net
    regresses v = x1 - x0. Loss is the mean squared error summed over
    coordinates.
    """
    xs, cs = _stack(batch)
    n = xs.shape[0]
    x0 = rng.standard_normal(xs.shape)
    t = rng.random(n)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * xs
    target = xs - x0
    feats = policy.features(params.spec, xt, t, cs)
    out, hiddens = policy.forward_cached(params, feats)
    diff = out - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads = policy.backward_cached(params, feats, hiddens, (2.0 / n) * diff)
    return loss, grads


def ddpm_loss(params: PolicyParams, batch, schedule: NoiseSchedule, rng: np.random.Generator):
    """Noise-prediction loss and exact gradients on one batch.

    Per item: eps ~ N(0, I), t ~ U(0,1), x_t = alpha_bar(t) x1 +
    sigma_bar(t) eps, and the net regresses eps.
    """
    if schedule.backbone != "diffusion":
        raise ValueError("ddpm loss requires a diffusion schedule")
    xs, cs = _stack(batch)
    n = xs.shape[0]
    eps = rng.standard_normal(xs.shape)
    t = rng.random(n)
    alpha_bar, sigma_bar = schedule.marginal_coeffs(t)
    xt = alpha_bar[:, None] * xs + sigma_bar[:, None] * eps
    feats = policy.features(params.spec, xt, t, cs)
    out, hiddens = policy.forward_cached(params, feats)
    diff = out - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads = policy.backward_cached(params, feats, hiddens, (2.0 / n) * diff)
    return loss, grads


@dataclass(frozen=True)
class PretrainConfig:
    dataset: DatasetSpec
    policy: MlpSpec
    schedule: NoiseSchedule
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    val_size: int = 2048
    val_every: int = 250
    target_val_loss: float | None = None
    curve_path: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.val_size < 1 or self.val_every < 1:
            raise ValueError("validation settings must be positive")


def _frozen_val_set(config: PretrainConfig, rng: np.random.Generator):
    """Fixed corrupted inputs and regression targets for the held-out set.

    The corruption draw happens once, so successive validation losses are
    directly comparable and the curve is free of evaluation noise.
    """
    batch = sample_dataset(config.dataset, config.val_size, rng)
    xs, cs = _stack(batch)
    n = xs.shape[0]
    t = rng.random(n)
    if config.schedule.backbone == "rectified-flow":
        x0 = rng.standard_normal(xs.shape)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * xs
        target = xs - x0
    else:
        eps = rng.standard_normal(xs.shape)
        alpha_bar, sigma_bar = config.schedule.marginal_coeffs(t)
        xt = alpha_bar[:, None] * xs + sigma_bar[:, None] * eps
        target = eps
    feats = policy.features(config.policy, xt, t, cs)
    return feats, target


def _val_loss(params: PolicyParams, feats: np.ndarray, target: np.ndarray) -> float:
    out, _ = policy.forward_cached(params, feats)
    diff = out - target
    return float(np.mean(np.sum(diff * diff, axis=1)))


def pretrain_run(config: PretrainConfig) -> PolicyParams:
    """Train to the target validation loss or the step budget, whichever first.

    Writes a loss-curve CSV (step, train_loss, val_loss) if curve_path is set;
    train_loss is the mean batch loss over the window since the previous row,
    val_loss the frozen-set loss at that step. A non-finite training loss
    aborts with "divergence detected".
    """
    root = np.random.SeedSequence(config.seed)
    data_seq, val_seq = root.spawn(2)
    data_rng = np.random.Generator(np.random.PCG64(data_seq))
    val_rng = np.random.Generator(np.random.PCG64(val_seq))

    params = policy.init_policy(config.policy, seed=config.seed)
    adam = policy.init_adam(params, lr=config.learning_rate)
    val_feats, val_target = _frozen_val_set(config, val_rng)

    rows = []
    window = []
    for step in range(1, config.steps + 1):
        batch = sample_dataset(config.dataset, config.batch_size, data_rng)
        if config.schedule.backbone == "rectified-flow":
            loss, grads = flow_matching_loss(params, batch, data_rng)
        else:
            loss, grads = ddpm_loss(params, batch, config.schedule, data_rng)
        if not math.isfinite(loss):
            _write_curve(config.curve_path, rows)
            raise FloatingPointError(f"divergence detected at step {step} (loss {loss})")
        window.append(loss)
        params, adam = policy.adam_update(params, grads, adam)
        if step % config.val_every == 0 or step == config.steps:
            val = _val_loss(params, val_feats, val_target)
            rows.append((step, float(np.mean(window)), val))
            window = []
            if config.target_val_loss is not None and val < config.target_val_loss:
                break
    _write_curve(config.curve_path, rows)
    return params


def _write_curve(path, rows) -> None:
    if path is None:
        return
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step", "train_loss", "val_loss"))
            for step, train_loss, val_loss in rows:
                writer.writerow((step, repr(float(train_loss)), repr(float(val_loss))))
    except OSError as exc:
        raise OSError(f"cannot write loss curve to {path}: {exc}") from exc
