"""Plain-text run configuration.

INI files parsed with configparser. Every RunConfig, PretrainConfig, and
FlopsLedger field has a key; sections and keys outside the known set are hard
errors, as are malformed values. All sections are optional and fall back to
the package defaults, so a config file only states what it overrides.

Composite rewards reference component sections by name:

    [reward]
    kind = composite
    components = bump, margin
    weights = 0.7, 0.3

    [reward.bump]
    kind = gaussian-bump
    target = 4.0, 0.0
    temperature = 0.5
"""

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NoiseSchedule
from .grpo import LossConfig
from .harness import FlopsLedger, PruneSchedule, RunConfig
from .policy import MlpSpec
from .pretrain import DatasetSpec, PretrainConfig
from .rewards import Decoder, RewardSpec

__all__ = ["ConfigBundle", "load_config"]

_KNOWN_KEYS = {
    "run": (
        "mode",
        "iterations",
        "prompts",
        "seed",
        "learning_rate",
        "cluster_delta",
        "epochs",
        "init_checkpoint",
    ),
    "schedule": ("backbone", "num_steps", "sigma0", "beta_min", "beta_max", "eta", "t_clamp"),
    "policy": (
        "latent_dim",
        "hidden",
        "n_contexts",
        "time_embedding",
        "time_frequencies",
        "zero_init_final",
    ),
    "prune": ("g_max", "checkpoints", "final_k"),
    "loss": ("clip_eps", "kl_beta", "adv_epsilon"),
    "reward": ("kind", "target", "temperature", "context_conditioned", "components", "weights"),
    "decoder": ("kind", "matrix"),
    "dataset": ("kind", "n_modes", "radius", "std", "prompt_modes"),
    "pretrain": (
        "steps",
        "batch_size",
        "learning_rate",
        "seed",
        "val_size",
        "val_every",
        "target_val_loss",
        "curve_path",
    ),
    "flops": ("cost_noise_pred", "cost_decode", "cost_reward", "train_multiplier"),
}

_BOOLEANS = {
    "true": True,
    "false": False,
    "yes": True,
    "no": False,
    "on": True,
    "off": False,
    "1": True,
    "0": False,
}


@dataclass(frozen=True)
class ConfigBundle:
    """Everything a CLI invocation needs, parsed and validated."""

    run: RunConfig
    pretrain: PretrainConfig
    flops: dict = field(default_factory=dict)

    def new_ledger(self) -> FlopsLedger:
        return FlopsLedger(**self.flops)


def _check_layout(parser: configparser.ConfigParser) -> None:
    for sec in parser.sections():
        base = "reward" if sec.startswith("reward.") else sec
        if base not in _KNOWN_KEYS:
            raise ValueError(f"unknown config section [{sec}]")
        for key in parser[sec]:
            if key not in _KNOWN_KEYS[base]:
                raise ValueError(f"unknown config key {sec}.{key}")


def _raw(parser, section, key):
    if parser.has_section(section) and key in parser[section]:
        value = parser[section][key].strip()
        return value if value != "" else None
    return None


def _get(parser, section, key, conv, default):
    raw = _raw(parser, section, key)
    if raw is None:
        return default
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"invalid value for {section}.{key}: {raw!r}") from exc


def _bool(raw: str) -> bool:
    try:
        return _BOOLEANS[raw.lower()]
    except KeyError:
        raise ValueError(raw)


def _int_tuple(raw: str) -> tuple:
    return tuple(int(p.strip()) for p in raw.split(",") if p.strip() != "")


def _float_tuple(raw: str) -> tuple:
    return tuple(float(p.strip()) for p in raw.split(",") if p.strip() != "")


def _str_tuple(raw: str) -> tuple:
    return tuple(p.strip() for p in raw.split(",") if p.strip() != "")


def _checkpoints(raw: str) -> tuple:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        step, count = part.split(":")
        out.append((int(step.strip()), int(count.strip())))
    return tuple(out)


def _vector(raw: str) -> np.ndarray:
    return np.array([float(p.strip()) for p in raw.split(",")], dtype=np.float64)


def _matrix(raw: str) -> np.ndarray:
    rows = [r.strip() for r in raw.split(";") if r.strip() != ""]
    return np.stack([_vector(r) for r in rows])


def _path(base_dir: str, raw: str) -> str:
    return raw if os.path.isabs(raw) else os.path.join(base_dir, raw)


def _reward_spec(parser, section: str, seen=()) -> RewardSpec:
    if section in seen:
        raise ValueError(f"composite reward cycle through [{section}]")
    kind = _get(parser, section, "kind", str, "gaussian-bump")
    conditioned = _get(parser, section, "context_conditioned", _bool, False)
    if kind == "composite":
        names = _get(parser, section, "components", _str_tuple, ())
        weights = _get(parser, section, "weights", _float_tuple, ())
        if not names:
            raise ValueError(f"{section}.components must name at least one component")
        components = tuple(
            _reward_spec(parser, f"reward.{name}", seen + (section,)) for name in names
        )
        return RewardSpec(
            kind="composite",
            components=components,
            weights=weights,
            context_conditioned=conditioned,
        )
    target = _get(parser, section, "target", _matrix if conditioned else _vector, None)
    temperature = _get(parser, section, "temperature", float, 0.5)
    if target is None:
        raise ValueError(f"{section}.target is required for kind {kind!r}")
    return RewardSpec(
        kind=kind, target=target, temperature=temperature, context_conditioned=conditioned
    )


def load_config(path) -> ConfigBundle:
    """Parse and validate one INI file into a ConfigBundle.

    Relative paths inside the file (init_checkpoint, curve_path) resolve
    against the file's own directory.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ValueError(f"malformed config {path}: {exc}") from exc
    _check_layout(parser)
    base_dir = os.path.dirname(os.path.abspath(path))

    schedule = NoiseSchedule(
        backbone=_get(parser, "schedule", "backbone", str, "rectified-flow"),
        num_steps=_get(parser, "schedule", "num_steps", int, 10),
        sigma0=_get(parser, "schedule", "sigma0", float, 0.3),
        beta_min=_get(parser, "schedule", "beta_min", float, 0.1),
        beta_max=_get(parser, "schedule", "beta_max", float, 20.0),
        eta=_get(parser, "schedule", "eta", float, 1.0),
        t_clamp=_get(parser, "schedule", "t_clamp", float, 0.96),
    )
    policy_spec = MlpSpec(
        latent_dim=_get(parser, "policy", "latent_dim", int, 2),
        hidden=_get(parser, "policy", "hidden", _int_tuple, (128, 128)),
        n_contexts=_get(parser, "policy", "n_contexts", int, 1),
        time_embedding=_get(parser, "policy", "time_embedding", str, "sinusoidal"),
        time_frequencies=_get(parser, "policy", "time_frequencies", int, 8),
        zero_init_final=_get(parser, "policy", "zero_init_final", _bool, True),
    )
    prune = PruneSchedule(
        g_max=_get(parser, "prune", "g_max", int, 8),
        checkpoints=_get(parser, "prune", "checkpoints", _checkpoints, ()),
        final_k=_get(parser, "prune", "final_k", int, 8),
    )
    loss = LossConfig(
        clip_eps=_get(parser, "loss", "clip_eps", float, 0.2),
        kl_beta=_get(parser, "loss", "kl_beta", float, 1e-3),
        adv_epsilon=_get(parser, "loss", "adv_epsilon", float, 1e-4),
    )
    reward = _reward_spec(parser, "reward") if parser.has_section("reward") else RewardSpec(
        kind="gaussian-bump", target=np.array([4.0, 0.0]), temperature=0.5
    )
    decoder_kind = _get(parser, "decoder", "kind", str, "identity")
    decoder = Decoder(
        kind=decoder_kind,
        matrix=_get(parser, "decoder", "matrix", _matrix, None),
    )
    init_checkpoint = _raw(parser, "run", "init_checkpoint")
    run = RunConfig(
        schedule=schedule,
        policy=policy_spec,
        reward=reward,
        decoder=decoder,
        prune=prune,
        loss=loss,
        mode=_get(parser, "run", "mode", str, "pro-grpo"),
        learning_rate=_get(parser, "run", "learning_rate", float, 3e-4),
        iterations=_get(parser, "run", "iterations", int, 100),
        prompts=_get(parser, "run", "prompts", int, 1),
        seed=_get(parser, "run", "seed", int, 0),
        cluster_delta=_get(parser, "run", "cluster_delta", float, 0.5),
        epochs=_get(parser, "run", "epochs", int, 1),
        init_checkpoint=None if init_checkpoint is None else _path(base_dir, init_checkpoint),
    )
    dataset = DatasetSpec(
        kind=_get(parser, "dataset", "kind", str, "gaussian-mixture-ring"),
        n_modes=_get(parser, "dataset", "n_modes", int, 8),
        radius=_get(parser, "dataset", "radius", float, 4.0),
        std=_get(parser, "dataset", "std", float, 0.3),
        prompt_modes=_get(parser, "dataset", "prompt_modes", _int_tuple, None),
    )
    curve_path = _raw(parser, "pretrain", "curve_path")
    pretrain = PretrainConfig(
        dataset=dataset,
        policy=policy_spec,
        schedule=schedule,
        steps=_get(parser, "pretrain", "steps", int, 20000),
        batch_size=_get(parser, "pretrain", "batch_size", int, 256),
        learning_rate=_get(parser, "pretrain", "learning_rate", float, 1e-3),
        seed=_get(parser, "pretrain", "seed", int, 0),
        val_size=_get(parser, "pretrain", "val_size", int, 2048),
        val_every=_get(parser, "pretrain", "val_every", int, 250),
        target_val_loss=_get(parser, "pretrain", "target_val_loss", float, None),
        curve_path=None if curve_path is None else _path(base_dir, curve_path),
    )
    flops = {}
    for key in _KNOWN_KEYS["flops"]:
        value = _get(parser, "flops", key, float, None)
        if value is not None:
            flops[key] = value
    return ConfigBundle(run=run, pretrain=pretrain, flops=flops)
