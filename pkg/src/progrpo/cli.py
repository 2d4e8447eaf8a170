"""Command-line interface.

Subcommands: pretrain (supervised generator training), train (any of the four
RL run modes), ovf (max-variance subset selection on a reward file), flops
(closed-form cost breakdown for the configured schedule), diag (checkpoint
diagnostics: mode occupancy, reward statistics, proxy fidelity).
"""

import argparse
import csv
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import dynamics, harness, ovf, policy
from .config import load_config
from .harness import PruneSchedule, emit_metrics, flops_total, write_ledger_summary
from .pretrain import dataset_centers, pretrain_run
from .rewards import proxy_reward, reward_eval

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progrpo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dump=False):
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=".", help="directory for output artifacts")
        if dump:
            p.add_argument(
                "--dump-trajectories",
                action="store_true",
                help="write per-trajectory JSONL next to the metrics",
            )

    common(sub.add_parser("pretrain", help="supervised pretraining of the generator"))
    common(sub.add_parser("train", help="run the configured training mode"), dump=True)

    p_ovf = sub.add_parser("ovf", help="max-variance subset selection on a reward CSV")
    p_ovf.add_argument("--input", required=True, help="one reward value per line")
    p_ovf.add_argument("--k", type=int, required=True, help="subset size")
    p_ovf.add_argument("--delta", type=float, default=0.5, help="clustering half-width in sigmas")

    p_flops = sub.add_parser("flops", help="closed-form cost breakdown for the schedule")
    p_flops.add_argument("--config", required=True)
    p_flops.add_argument("--train-multiplier", type=float, default=None)
    p_flops.add_argument(
        "--baseline-g",
        type=int,
        default=None,
        help="also report speedup versus an unpruned group of this size",
    )

    p_diag = sub.add_parser("diag", help="diagnostics for a pretrained checkpoint")
    common(p_diag)
    p_diag.add_argument("--samples", type=int, default=200, help="trajectories to sample")
    return parser


def _cmd_pretrain(args) -> int:
    bundle = load_config(args.config)
    cfg = bundle.pretrain
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    if cfg.curve_path is None:
        cfg = replace(cfg, curve_path=os.path.join(args.out_dir, "pretrain_curve.csv"))
    params = pretrain_run(cfg)
    ckpt = os.path.join(args.out_dir, "pretrained.npz")
    policy.save_checkpoint(params, ckpt)
    print(f"checkpoint: {ckpt}")
    print(f"loss curve: {cfg.curve_path}")
    return 0


def _cmd_train(args) -> int:
    bundle = load_config(args.config)
    cfg = bundle.run
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if cfg.init_checkpoint is None:
        raise ValueError("config run.init_checkpoint must point at a pretrained checkpoint")
    os.makedirs(args.out_dir, exist_ok=True)
    ledger = bundle.new_ledger()
    dump_path = (
        os.path.join(args.out_dir, "trajectories.jsonl") if args.dump_trajectories else None
    )
    history = []
    rows = harness.run(cfg, ledger=ledger, dump_path=dump_path, params_history=history)
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    emit_metrics(rows, metrics_path)
    ledger_path = os.path.join(args.out_dir, "ledger.csv")
    write_ledger_summary(ledger, ledger_path)
    if history:
        policy.save_checkpoint(history[-1], os.path.join(args.out_dir, "policy_final.npz"))
    print(f"mode: {cfg.mode}")
    print(f"metrics: {metrics_path}")
    print(f"ledger: {ledger_path}")
    if rows:
        print(f"final mean reward: {rows[-1].mean_reward!r}")
        print(f"total tflops: {ledger.total_tflops()!r}")
    return 0


def _cmd_ovf(args) -> int:
    values = []
    with open(args.input) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text.split(",")[0]))
            except ValueError:
                if line_no == 1:  # tolerate a header line
                    continue
                raise ValueError(f"{args.input}:{line_no}: not a number: {text!r}")
    rewards = ovf.as_reward_list(values)
    sel = ovf.ovf_select(rewards, args.k)
    clustered = ovf.clustered_indices(rewards, args.delta)
    writer = csv.writer(sys.stdout)
    writer.writerow(("kept", "variance", "clustered_frac"))
    writer.writerow(
        (
            ";".join(str(i) for i in sel.kept),
            repr(sel.variance),
            repr(len(clustered) / len(values)),
        )
    )
    return 0


def _cmd_flops(args) -> int:
    bundle = load_config(args.config)
    ledger = bundle.new_ledger()
    schedule = bundle.run.prune
    T = bundle.run.schedule.num_steps
    baseline = None
    if args.baseline_g is not None:
        base_schedule = PruneSchedule(g_max=args.baseline_g, checkpoints=(), final_k=args.baseline_g)
        baseline = flops_total(base_schedule, T, ledger, train_multiplier=args.train_multiplier)
    breakdown = flops_total(
        schedule, T, ledger, train_multiplier=args.train_multiplier, baseline=baseline
    )
    writer = csv.writer(sys.stdout)
    writer.writerow(("component", "tflops"))
    for name in ("sampling", "checkpoint", "terminal", "training", "total"):
        writer.writerow((name, repr(getattr(breakdown, name))))
    if breakdown.speedup is not None:
        writer.writerow(("speedup", repr(breakdown.speedup)))
    return 0


def _spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


def _cmd_diag(args) -> int:
    bundle = load_config(args.config)
    cfg = bundle.run
    seed = cfg.seed if args.seed is None else args.seed
    if cfg.init_checkpoint is None:
        raise ValueError("config run.init_checkpoint must point at a pretrained checkpoint")
    params = policy.load_checkpoint(cfg.init_checkpoint)
    if args.samples < 2:
        raise ValueError("--samples must be at least 2")
    schedule = cfg.schedule
    group = dynamics.new_group(0, args.samples, schedule, np.random.SeedSequence(entropy=(seed, 0)))
    proxies = {}
    pos = 0
    for step, _count in cfg.prune.checkpoints:
        dynamics.advance(group, params, schedule, pos, step)
        t = float(group.times[step])
        proxies[step] = [
            proxy_reward(tr.state, t, 0, params, schedule, cfg.reward, cfg.decoder)
            for tr in group.trajectories
        ]
        pos = step
    dynamics.advance(group, params, schedule, pos, schedule.num_steps)
    dynamics.finalize_group(group)
    terminal = np.stack([tr.terminal_state for tr in group.trajectories])
    rewards = np.array(
        [reward_eval(tr.terminal_state, 0, cfg.reward, cfg.decoder) for tr in group.trajectories]
    )

    centers = dataset_centers(bundle.pretrain.dataset)
    nearest = np.argmin(
        np.sum((terminal[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1
    )
    writer = csv.writer(sys.stdout)
    writer.writerow(("metric", "value"))
    for m in range(centers.shape[0]):
        writer.writerow((f"mode_occupancy_{m}", repr(float(np.mean(nearest == m)))))
    writer.writerow(("reward_mean", repr(float(rewards.mean()))))
    dev = rewards - rewards.mean()
    writer.writerow(("reward_std", repr(float(np.sqrt(np.mean(dev * dev))))))
    clustered = ovf.clustered_indices(ovf.as_reward_list(rewards), cfg.cluster_delta)
    writer.writerow(("clustered_frac", repr(len(clustered) / len(rewards))))
    for step, vals in proxies.items():
        writer.writerow((f"spearman_step{step}", repr(_spearman(vals, rewards))))
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "ovf": _cmd_ovf,
    "flops": _cmd_flops,
    "diag": _cmd_diag,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
