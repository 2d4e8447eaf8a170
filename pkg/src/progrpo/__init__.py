"""Desk-scale group-relative policy optimization for toy flow/diffusion models.

The package trains a small MLP generator on synthetic 2D data (rectified-flow
or DDPM objectives), then fine-tunes it with group-normalized policy gradients
where low-value trajectories are pruned mid-sampling: a single-step ODE
lookahead previews each trajectory's terminal state, a synthetic reward scores
the preview, and the maximum-variance subset of the group survives. An
analytic FLOPs ledger accounts for every network call so pruning schedules can
be compared at equal cost.
"""

from .backend import BACKEND
from .dynamics import (
    Group,
    NoiseSchedule,
    Trajectory,
    TrajectoryStep,
    advance,
    drift_ode,
    drift_sde,
    em_step,
    finalize_group,
    gaussian_step_logprob,
    new_group,
    ode_lookahead,
    ode_rollout,
    sample_group,
)
from .grpo import (
    AdvantageSet,
    LossConfig,
    clipped_surrogate,
    importance_ratio,
    kl_penalty,
    normalized_advantages,
    pro_grpo_loss_and_grad,
    step_logprob,
)
from .harness import (
    FlopsBreakdown,
    FlopsLedger,
    MetricsRow,
    PruneSchedule,
    RunConfig,
    apply_prune_checkpoint,
    emit_metrics,
    flops_total,
    run,
    run_baseline_grpo,
    run_post_hoc_ovf,
    run_pro_grpo,
)
from .config import ConfigBundle, load_config
from .ovf import (
    GroupStats,
    RewardList,
    SelectionResult,
    as_reward_list,
    clustered_indices,
    group_stats,
    ovf_brute_force,
    ovf_select,
    uniform_subsample,
)
from .policy import (
    AdamState,
    MlpSpec,
    PolicyGrads,
    PolicyParams,
    adam_update,
    backward,
    forward,
    init_adam,
    init_policy,
    load_checkpoint,
    save_checkpoint,
    snapshot,
)
from .pretrain import (
    DatasetSpec,
    PretrainConfig,
    ddpm_loss,
    flow_matching_loss,
    pretrain_run,
    sample_dataset,
)
from .rewards import (
    Decoder,
    RewardSpec,
    composite_reward,
    decode,
    proxy_reward,
    reward_eval,
    ring_mode_centers,
)

__version__ = "0.1.0"
