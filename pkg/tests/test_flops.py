"""Analytic FLOPs accounting: the closed-form per-group breakdown against an
independent step-by-step walk, the pinned price-sheet arithmetic for the
two pruning schedules, and counter exactness on a live training run."""

import csv

import numpy as np
import pytest

from conftest import generic_params
from progrpo.dynamics import NoiseSchedule
from progrpo.grpo import LossConfig
from progrpo.harness import (
    FlopsLedger,
    PruneSchedule,
    RunConfig,
    flops_total,
    run,
    write_ledger_summary,
)
from progrpo.policy import MlpSpec
from progrpo.rewards import Decoder, RewardSpec

REL = 1e-12


def walk_costs(schedule, T, costs, mult, rewarded=None, trained=None):
    """Step-at-a-time cost accumulation, sharing no code with the closed form.

    Walks the sampling steps one by one with the live trajectory count,
    applying each prune checkpoint when its step arrives.
    """
    c_np, c_d, c_r = costs
    at = dict(schedule.checkpoints)
    active = schedule.g_max
    n_samp = 0
    n_look = 0
    for j in range(T):
        if j in at and j > 0:
            n_look += active
            active = at[j]
        n_samp += active
    rewarded = schedule.final_k if rewarded is None else rewarded
    trained = schedule.final_k if trained is None else trained
    return {
        "sampling": n_samp * c_np,
        "checkpoint": n_look * (c_np + c_d + c_r),
        "terminal": rewarded * (c_d + c_r),
        "training": trained * T * mult * c_np,
        "n_sampling": n_samp,
        "n_lookahead": n_look,
        "n_decode": n_look + rewarded,
        "n_reward": n_look + rewarded,
        "n_training": trained * T,
    }


def assert_matches_walk(breakdown, expect):
    assert breakdown.sampling == pytest.approx(expect["sampling"], rel=REL)
    assert breakdown.checkpoint == pytest.approx(expect["checkpoint"], rel=REL)
    assert breakdown.terminal == pytest.approx(expect["terminal"], rel=REL)
    assert breakdown.training == pytest.approx(expect["training"], rel=REL)
    total = sum(expect[k] for k in ("sampling", "checkpoint", "terminal", "training"))
    assert breakdown.total == pytest.approx(total, rel=REL)
    for name in ("n_sampling", "n_lookahead", "n_decode", "n_reward", "n_training"):
        assert getattr(breakdown, name) == expect[name]


def test_breakdown_matches_walk_on_random_schedules():
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(3, 17))
        g_max = int(rng.integers(4, 49))
        n_cp = int(rng.integers(0, min(3, T - 1, g_max - 2) + 1))
        steps = sorted(rng.choice(np.arange(1, T), size=n_cp, replace=False).tolist())
        counts = sorted(
            rng.choice(np.arange(2, g_max), size=n_cp, replace=False).tolist(), reverse=True
        )
        final_k = counts[-1] if counts else int(rng.integers(2, g_max + 1))
        schedule = PruneSchedule(g_max, tuple(zip(steps, counts)), final_k)
        costs = tuple(float(c) for c in rng.uniform(0.1, 5.0, size=3))
        mult = float(rng.uniform(0.5, 5.0))
        ledger = FlopsLedger(*costs)
        got = flops_total(schedule, T, ledger, train_multiplier=mult)
        assert_matches_walk(got, walk_costs(schedule, T, costs, mult))


# The three reference schedules of the efficiency analysis, at T=10 and the
# default atomic costs (3.88 noise prediction, 2.49 decode, 0.34 reward).
T10 = 10
PRICES = FlopsLedger(3.88, 2.49, 0.34)
BASELINE24 = PruneSchedule(24, (), 24)
FLASH = PruneSchedule(24, ((5, 16), (7, 12)), 12)
STANDARD = PruneSchedule(48, ((5, 24), (7, 12)), 12)


def reference_totals(m):
    base = flops_total(BASELINE24, T10, PRICES, train_multiplier=m)
    flash = flops_total(FLASH, T10, PRICES, train_multiplier=m, baseline=base)
    standard = flops_total(STANDARD, T10, PRICES, train_multiplier=m, baseline=base)
    return base, flash, standard


def test_reference_schedule_arithmetic():
    base, flash, standard = reference_totals(3.0)
    # baseline G=24: 240 sampling calls, 24 terminal reward evaluations
    assert base.n_sampling == 240 and base.n_lookahead == 0
    assert base.sampling == pytest.approx(931.2, rel=REL)
    assert base.terminal == pytest.approx(67.92, rel=REL)
    assert base.sampling + base.checkpoint + base.terminal == pytest.approx(999.12, rel=REL)
    # Flash 24->16->12 at {5,7}: 24*5 + 16*2 + 12*3 = 188 sampling calls,
    # 24 + 16 = 40 checkpoint lookaheads at 6.71 apiece
    assert flash.n_sampling == 188 and flash.n_lookahead == 40
    assert flash.sampling == pytest.approx(729.44, rel=REL)
    assert flash.checkpoint == pytest.approx(268.40, rel=REL)
    assert flash.terminal == pytest.approx(33.96, rel=REL)
    assert flash.sampling + flash.checkpoint + flash.terminal == pytest.approx(1031.80, rel=REL)
    # Standard 48->24->12 at {5,7}: 324 sampling calls, 72 lookaheads
    assert standard.n_sampling == 324 and standard.n_lookahead == 72
    assert standard.sampling == pytest.approx(1257.12, rel=REL)
    assert standard.checkpoint == pytest.approx(483.12, rel=REL)
    assert standard.sampling + standard.checkpoint + standard.terminal == pytest.approx(
        1774.20, rel=REL
    )
    # training scales as 465.6 m for the pruned arms, 931.2 m for the baseline
    assert base.training == pytest.approx(931.2 * 3.0, rel=REL)
    assert flash.training == pytest.approx(465.6 * 3.0, rel=REL)
    assert standard.training == pytest.approx(465.6 * 3.0, rel=REL)


def test_speedup_values_across_multiplier_grid():
    # totals are affine in the train multiplier m, so the speedup curves are
    # fixed rational functions; pin them at a spread of m values
    for m, flash_expect, standard_expect in [
        (1.0, 1930.32 / 1497.40, 1930.32 / 2239.80),
        (2.0, 2861.52 / 1963.00, 2861.52 / 2705.40),
        (3.0, 3792.72 / 2428.60, 3792.72 / 3171.00),
        (5.0, 5655.12 / 3359.80, 5655.12 / 4102.20),
    ]:
        _, flash, standard = reference_totals(m)
        assert flash.speedup == pytest.approx(flash_expect, rel=REL)
        assert standard.speedup == pytest.approx(standard_expect, rel=REL)
        assert flash.speedup > standard.speedup


def test_flash_speedup_band_over_full_multiplier_range():
    for m in np.linspace(1.0, 5.0, 41):
        _, flash, standard = reference_totals(float(m))
        assert 1.05 <= flash.speedup <= 1.8
        assert standard.speedup < flash.speedup
        assert standard.speedup <= 1.8


def test_standard_speedup_crossings():
    # Standard beats the baseline only once training dominates: its total
    # equals the baseline's at m = 775.08 / 465.6 and reaches the 1.05 floor
    # at m = 863.79 / 442.32.
    m_parity = 775.08 / 465.6
    m_floor = 863.79 / 442.32
    assert m_parity == pytest.approx(1.664691, abs=1e-6)
    assert m_floor == pytest.approx(1.952862, abs=1e-6)
    _, _, at_parity = reference_totals(m_parity)
    assert at_parity.speedup == pytest.approx(1.0, rel=1e-9)
    _, _, at_floor = reference_totals(m_floor)
    assert at_floor.speedup == pytest.approx(1.05, rel=1e-9)
    _, _, below = reference_totals(m_parity - 0.01)
    _, _, above = reference_totals(m_parity + 0.01)
    assert below.speedup < 1.0 < above.speedup


def test_single_checkpoint_delta():
    # dropping the second checkpoint removes exactly 16 lookahead bundles;
    # a lone 24->12 prune at step 5 books 24 * 6.71 of checkpoint cost
    lone = flops_total(PruneSchedule(24, ((5, 12),), 12), T10, PRICES, train_multiplier=3.0)
    assert lone.n_lookahead == 24
    assert lone.checkpoint == pytest.approx(161.04, rel=REL)
    _, flash, _ = reference_totals(3.0)
    assert flash.checkpoint - lone.checkpoint == pytest.approx(16 * 6.71, rel=1e-9)


def test_posthoc_overrides_reward_full_group():
    sched = PruneSchedule(16, (), 8)
    got = flops_total(sched, T10, PRICES, train_multiplier=3.0, rewarded_count=16, trained_count=8)
    assert got.n_sampling == 160
    assert got.n_decode == 16 and got.n_reward == 16
    assert got.n_training == 80
    assert got.terminal == pytest.approx(16 * 2.83, rel=REL)


def test_zero_cost_ledger_counts_but_charges_nothing():
    free = FlopsLedger(0.0, 0.0, 0.0, train_multiplier=0.0)
    got = flops_total(FLASH, T10, free)
    assert got.total == 0.0
    assert got.n_sampling == 188 and got.n_lookahead == 40
    free.charge_noise_pred("sampling", 7)
    free.charge_training(3)
    assert free.total_tflops() == 0.0
    assert free.counters()["sampling"] == 7


def test_ledger_validation():
    with pytest.raises(ValueError):
        FlopsLedger(cost_noise_pred=-0.1)
    with pytest.raises(ValueError):
        FlopsLedger(train_multiplier=-1.0)
    ledger = FlopsLedger()
    with pytest.raises(ValueError, match="unknown noise-prediction call class"):
        ledger.charge_noise_pred("gradient", 1)
    with pytest.raises(ValueError):
        ledger.charge_decode(-1)
    with pytest.raises(ValueError):
        flops_total(FLASH, T10, ledger, train_multiplier=-2.0)
    with pytest.raises(ValueError, match="horizon"):
        flops_total(FLASH, 6, ledger)


def test_ledger_totals_match_counter_arithmetic():
    ledger = FlopsLedger()
    ledger.charge_noise_pred("sampling", 188)
    ledger.charge_noise_pred("lookahead", 40)
    ledger.charge_decode(52)
    ledger.charge_reward(52)
    ledger.charge_training(120)
    expect = 228 * 3.88 + 52 * 2.49 + 52 * 0.34 + 120 * 3.0 * 3.88
    assert ledger.total_tflops() == expect
    assert ledger.counters() == {
        "sampling": 188,
        "lookahead": 40,
        "decode": 52,
        "reward": 52,
        "training": 120,
    }


def test_ledger_summary_round_trip(tmp_path):
    ledger = FlopsLedger()
    ledger.charge_noise_pred("sampling", 11)
    ledger.charge_noise_pred("lookahead", 4)
    ledger.charge_decode(9)
    ledger.charge_reward(9)
    ledger.charge_training(6)
    path = tmp_path / "ledger.csv"
    write_ledger_summary(ledger, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["call_class", "count", "unit_cost_tflops", "tflops"]
    body = {r[0]: r[1:] for r in rows[1:]}
    assert set(body) == {"sampling", "lookahead", "decode", "reward", "training", "total"}
    assert int(body["sampling"][0]) == 11
    assert float(body["lookahead"][2]) == 4 * 3.88
    assert float(body["training"][1]) == 3.0 * 3.88
    assert float(body["total"][2]) == ledger.total_tflops()
    recomputed = sum(
        float(body[name][2]) for name in ("sampling", "lookahead", "decode", "reward", "training")
    )
    assert recomputed == pytest.approx(ledger.total_tflops(), rel=REL)
    with pytest.raises(OSError, match="cannot write ledger summary"):
        write_ledger_summary(ledger, tmp_path / "missing" / "ledger.csv")


def test_live_run_counters_equal_closed_form():
    """A short pro-grpo run must book exactly the call counts the closed form
    predicts: iterations x per-group counts, training scaled by epochs."""
    sched = NoiseSchedule(num_steps=4)
    prune = PruneSchedule(6, ((2, 3),), 3)
    config = RunConfig(
        schedule=sched,
        policy=MlpSpec(hidden=(16, 16)),
        reward=RewardSpec(kind="gaussian-bump", target=np.array([1.0, 0.0]), temperature=1.0),
        decoder=Decoder(),
        prune=prune,
        loss=LossConfig(),
        mode="pro-grpo",
        iterations=4,
        epochs=2,
        seed=0,
    )
    params = generic_params(config.policy, seed=3)
    ledger = FlopsLedger()
    rows = run(config, params=params, ledger=ledger)
    assert all(np.isfinite(r.loss) for r in rows), "run hit a degenerate group"

    per_group = flops_total(prune, sched.num_steps, ledger)
    iters = config.iterations
    assert ledger.counters() == {
        "sampling": iters * per_group.n_sampling,
        "lookahead": iters * per_group.n_lookahead,
        "decode": iters * per_group.n_decode,
        "reward": iters * per_group.n_reward,
        "training": iters * config.epochs * per_group.n_training,
    }
    assert rows[-1].cum_tflops == ledger.total_tflops()
    expected_total = (
        iters * (per_group.sampling + per_group.checkpoint + per_group.terminal)
        + iters * config.epochs * per_group.training
    )
    assert rows[-1].cum_tflops == pytest.approx(expected_total, rel=REL)
    assert all(b.cum_tflops > a.cum_tflops for a, b in zip(rows, rows[1:]))
