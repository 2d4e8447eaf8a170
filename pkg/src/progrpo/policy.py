"""Conditional MLP policy network with exact analytic gradients.

The network maps (latent x, time t, prompt context c) to a d-dimensional
output (velocity or noise prediction depending on the backbone). Everything
is float64; the batched forward/backward kernels live in the selected backend
(compiled extension or numpy fallback) and this module owns feature assembly,
parameter handling, Adam, and checkpoint serialization.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import backend

__all__ = [
    "MlpSpec",
    "PolicyParams",
    "PolicyGrads",
    "AdamState",
    "init_policy",
    "forward",
    "backward",
    "adam_update",
    "init_adam",
    "snapshot",
    "save_checkpoint",
    "load_checkpoint",
]

MAX_CONTEXTS = 16

CHECKPOINT_FORMAT = "progrpo-policy"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    latent_dim: int = 2
    hidden: tuple = (128, 128)
    n_contexts: int = 1
    time_embedding: str = "sinusoidal"  # or "scalar"
    time_frequencies: int = 8
    zero_init_final: bool = True

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        if not 1 <= self.n_contexts <= MAX_CONTEXTS:
            raise ValueError(f"context vocab must be in [1, {MAX_CONTEXTS}]")
        if self.time_embedding not in ("sinusoidal", "scalar"):
            raise ValueError("time_embedding must be 'sinusoidal' or 'scalar'")
        if self.time_embedding == "sinusoidal" and self.time_frequencies < 1:
            raise ValueError("time_frequencies must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def time_dim(self) -> int:
        return 2 * self.time_frequencies if self.time_embedding == "sinusoidal" else 1

    @property
    def input_dim(self) -> int:
        return self.latent_dim + self.time_dim + self.n_contexts

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim,) + self.hidden + (self.latent_dim,)


@dataclass(frozen=True)
class PolicyParams:
    spec: MlpSpec
    weights: tuple  # of (out, in) float64 arrays
    biases: tuple  # of (out,) float64 arrays
    version: int = 0


@dataclass(frozen=True)
class PolicyGrads:
    weights: tuple
    biases: tuple


@dataclass(frozen=True)
class AdamState:
    m_weights: tuple
    m_biases: tuple
    v_weights: tuple
    v_biases: tuple
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_policy(spec: MlpSpec, seed: int) -> PolicyParams:
    """Seeded init: hidden layers N(0, 1/fan_in), final layer zeroed by default."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = spec.layer_dims
    weights = []
    biases = []
    last = len(dims) - 2
    for l in range(len(dims) - 1):
        fan_in, fan_out = dims[l], dims[l + 1]
        if l == last and spec.zero_init_final:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        weights.append(np.ascontiguousarray(w, dtype=np.float64))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return PolicyParams(spec=spec, weights=tuple(weights), biases=tuple(biases), version=0)


def _as_batch(spec: MlpSpec, x, t, context):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.latent_dim:
        raise ValueError("spec violation: latent batch must have shape (B, latent_dim)")
    b = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    context = np.broadcast_to(np.asarray(context, dtype=np.int64), (b,))
    if np.any((context < 0) | (context >= spec.n_contexts)):
        raise ValueError("spec violation: context id out of range")
    return x, t, context, squeeze


def features(spec: MlpSpec, x, t, context) -> np.ndarray:
    """Assemble the (B, input_dim) feature block: latent, time embedding, one-hot."""
    x, t, context, _ = _as_batch(spec, x, t, context)
    if spec.time_embedding == "sinusoidal":
        freqs = 2.0 ** np.arange(spec.time_frequencies)
        ang = 2.0 * np.pi * t[:, None] * freqs[None, :]
        time_feats = np.concatenate((np.sin(ang), np.cos(ang)), axis=1)
    else:
        time_feats = t[:, None]
    onehot = np.zeros((x.shape[0], spec.n_contexts))
    onehot[np.arange(x.shape[0]), context] = 1.0
    return np.ascontiguousarray(np.concatenate((x, time_feats, onehot), axis=1))


def forward_cached(params: PolicyParams, feats: np.ndarray):
    """Kernel forward on pre-assembled features; returns (out, hidden cache)."""
    return backend.mlp_forward(feats, params.weights, params.biases)


def backward_cached(params: PolicyParams, feats, hiddens, upstream) -> PolicyGrads:
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    gw, gb = backend.mlp_backward(feats, hiddens, params.weights, upstream)
    return PolicyGrads(weights=tuple(gw), biases=tuple(gb))


def forward(params: PolicyParams, x, t, context) -> np.ndarray:
    """Network output for a batch or a single (x, t, c) triple."""
    _, _, _, squeeze = _as_batch(params.spec, x, t, context)
    feats = features(params.spec, x, t, context)
    out, _ = forward_cached(params, feats)
    return out[0] if squeeze else out


def backward(params: PolicyParams, x, t, context, upstream) -> PolicyGrads:
    """Exact gradient of sum_i <upstream[i], forward(x_i, t_i, c_i)> in the parameters."""
    feats = features(params.spec, x, t, context)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != (feats.shape[0], params.spec.latent_dim):
        raise ValueError("spec violation: upstream must align with the batched output")
    out, hiddens = forward_cached(params, feats)
    del out
    return backward_cached(params, feats, hiddens, upstream)


def init_adam(
    params: PolicyParams,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    zw = tuple(np.zeros_like(w) for w in params.weights)
    zb = tuple(np.zeros_like(b) for b in params.biases)
    return AdamState(
        m_weights=zw,
        m_biases=zb,
        v_weights=tuple(np.zeros_like(w) for w in params.weights),
        v_biases=tuple(np.zeros_like(b) for b in params.biases),
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_update(params: PolicyParams, grads: PolicyGrads, state: AdamState):
    """Bias-corrected Adam step; returns fresh (params, state), inputs untouched."""
    for g in (*grads.weights, *grads.biases):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("divergence detected")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def step_one(p, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        p_new = p - state.lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.weights, state.m_weights, state.v_weights):
        pn, mn, vn = step_one(p, g, m, v)
        new_w.append(pn)
        new_mw.append(mn)
        new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.biases, state.m_biases, state.v_biases):
        pn, mn, vn = step_one(p, g, m, v)
        new_b.append(pn)
        new_mb.append(mn)
        new_vb.append(vn)

    new_params = PolicyParams(
        spec=params.spec,
        weights=tuple(np.ascontiguousarray(w) for w in new_w),
        biases=tuple(np.ascontiguousarray(b) for b in new_b),
        version=params.version + 1,
    )
    new_state = replace(
        state,
        m_weights=tuple(new_mw),
        m_biases=tuple(new_mb),
        v_weights=tuple(new_vw),
        v_biases=tuple(new_vb),
        step=t,
    )
    return new_params, new_state


def snapshot(params: PolicyParams) -> PolicyParams:
    """Deep, read-only copy for use as a frozen old/reference policy."""

    def freeze(a):
        c = np.ascontiguousarray(a.copy())
        c.setflags(write=False)
        return c

    return PolicyParams(
        spec=params.spec,
        weights=tuple(freeze(w) for w in params.weights),
        biases=tuple(freeze(b) for b in params.biases),
        version=params.version,
    )


def save_checkpoint(params: PolicyParams, path) -> None:
    """Self-describing container: JSON header plus row-major float64 arrays."""
    spec = params.spec
    header = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "param_version": params.version,
        "n_layers": len(params.weights),
        "shapes": [list(w.shape) for w in params.weights],
        "mlp_spec": {
            "latent_dim": spec.latent_dim,
            "hidden": list(spec.hidden),
            "n_contexts": spec.n_contexts,
            "time_embedding": spec.time_embedding,
            "time_frequencies": spec.time_frequencies,
            "zero_init_final": spec.zero_init_final,
        },
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"weight_{l}"] = np.ascontiguousarray(w, dtype=np.float64)
        arrays[f"bias_{l}"] = np.ascontiguousarray(b, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> PolicyParams:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a policy checkpoint")
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError("unsupported checkpoint version")
        s = header["mlp_spec"]
        spec = MlpSpec(
            latent_dim=s["latent_dim"],
            hidden=tuple(s["hidden"]),
            n_contexts=s["n_contexts"],
            time_embedding=s["time_embedding"],
            time_frequencies=s["time_frequencies"],
            zero_init_final=s["zero_init_final"],
        )
        weights, biases = [], []
        for l in range(header["n_layers"]):
            weights.append(np.ascontiguousarray(data[f"weight_{l}"], dtype=np.float64))
            biases.append(np.ascontiguousarray(data[f"bias_{l}"], dtype=np.float64))
    params = PolicyParams(
        spec=spec,
        weights=tuple(weights),
        biases=tuple(biases),
        version=int(header["param_version"]),
    )
    expected = spec.layer_dims
    for l, w in enumerate(params.weights):
        if w.shape != (expected[l + 1], expected[l]):
            raise ValueError("checkpoint shape mismatch")
    return params
