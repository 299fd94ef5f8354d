import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibrl import agents
from ibrl.agents import TrainConfig
from ibrl.annealing import (AnnealSchedule, FamilyEntry, PolicyFamily, anneal_run, beta_at, bundle_from_entry,
                            select_checkpoint, snapshot_params)
from ibrl.envs import cartpole as cp
from ibrl.envs import grid as gw
from ibrl.evaluation import (EvalGrid, TransferCurve, critic_value_correlation, embeddings_csv, eval_grid,
                             evaluate_context, evaluate_scripted, export_embeddings, render_heatmap_svg,
                             success_count, transfer_curves_csv)
from ibrl.policy import make_bundle


# ------------------------------------------------------------------ schedule


def test_schedule_warmup_and_endpoints():
    s = AnnealSchedule(total=100, warmup=20)
    assert beta_at(s, 0) == 0.0 and beta_at(s, 19) == 0.0
    assert beta_at(s, 20) == pytest.approx(1e-7)
    assert beta_at(s, 100) == pytest.approx(1e-3)
    assert beta_at(s, 60) == pytest.approx(1e-5)  # geometric midpoint
    lin = AnnealSchedule(total=100, warmup=20, shape="linear")
    assert beta_at(lin, 60) == pytest.approx(0.5 * (1e-7 + 1e-3))
    with pytest.raises(ValueError):
        beta_at(s, 101)


def test_checkpoints_are_even_ramp_intervals():
    s = AnnealSchedule.from_total(500)
    marks = s.checkpoint_iterations()
    assert len(marks) == 10 and marks[-1] == 500
    assert np.all(np.diff([s.warmup] + marks) == s.interval)
    assert s.warmup == 100


def test_schedule_validation():
    with pytest.raises(ValueError):
        AnnealSchedule(total=100, warmup=20, n_checkpoints=7)
    with pytest.raises(ValueError):
        AnnealSchedule(total=100, warmup=20, beta_start=1e-2, beta_end=1e-3)
    with pytest.raises(ValueError):
        AnnealSchedule(total=100, warmup=20, shape="cosine")


@settings(max_examples=50, deadline=None)
@given(st.integers(40, 400), st.floats(0.0, 0.5))
def test_beta_is_monotone(total, frac):
    s = AnnealSchedule.from_total(total, frac)
    betas = [beta_at(s, i) for i in range(total + 1)]
    assert all(a <= b for a, b in zip(betas, betas[1:]))


def test_family_rejects_out_of_order_entries():
    fam = PolicyFamily()
    fam.add(FamilyEntry(10, 1e-6, {}))
    with pytest.raises(ValueError):
        fam.add(FamilyEntry(10, 1e-5, {}))
    with pytest.raises(ValueError):
        fam.add(FamilyEntry(20, 1e-7, {}))


def test_select_checkpoint_breaks_ties_towards_larger_beta():
    fam = PolicyFamily()
    for it, beta, succ in [(1, 1e-6, 5), (2, 1e-5, 9), (3, 1e-4, 9), (4, 1e-3, 2)]:
        fam.add(FamilyEntry(it, beta, {}, {"unseen_success": succ, "mean_test_reward": float(succ)}))
    assert select_checkpoint(fam).iteration == 3
    assert select_checkpoint(fam, "best-mean-test-reward").iteration == 3
    with pytest.raises(ValueError):
        select_checkpoint(fam, "latest")
    with pytest.raises(ValueError):
        select_checkpoint(PolicyFamily())


def test_short_anneal_run_produces_family():
    cfg = TrainConfig.cartpole_defaults(n_steps=32, minibatch_size=16, epochs=1, seed=0)
    sched = AnnealSchedule(total=30, warmup=10, n_checkpoints=10)
    fam, rows = anneal_run(cfg, sched, agents.make_envs(cfg), evaluate=lambda b: {"probe": 1.0})
    assert [e.iteration for e in fam] == sched.checkpoint_iterations()
    for e in fam:
        assert e.beta == pytest.approx(beta_at(sched, e.iteration))
        assert e.summary["probe"] == 1.0
    assert [r["beta"] for r in rows[:10]] == [0.0] * 9 + [beta_at(sched, 10)]
    assert all(r["mean_kl"] > 0 for r in rows[10:])
    # snapshots are copies, not views into the live network
    b = bundle_from_entry(make_bundle("cartpole", np.random.default_rng(0)), fam[0])
    assert not np.array_equal(snapshot_params(b)["actor.2.weight"], fam[-1].params["actor.2.weight"])


def test_anneal_refuses_deterministic_encoder():
    cfg = TrainConfig.cartpole_defaults(deterministic=True)
    with pytest.raises(ValueError):
        anneal_run(cfg, AnnealSchedule(total=20, warmup=10), agents.make_envs(cfg))


# ------------------------------------------------------------------ evaluation


def balance_policy(obs):
    """Push in the direction the pole leans, with some angular velocity lead."""
    return (obs[:, 2] + 0.5 * obs[:, 3] > 0).astype(int)


def test_scripted_controller_balances_nominal_pole():
    assert evaluate_scripted(balance_policy, cp.make_context(10.0, 0.5)) == 200.0
    always_left = lambda obs: np.zeros(len(obs), dtype=int)
    assert evaluate_scripted(always_left, cp.make_context(10.0, 0.5)) < 50


def test_eval_grid_is_pure_and_order_independent():
    bundle = make_bundle("cartpole", np.random.default_rng(0))
    before = snapshot_params(bundle)
    grid = eval_grid(bundle, "unseen", n_episodes=3, seed=4)
    for name, arr in snapshot_params(bundle).items():
        np.testing.assert_array_equal(arr, before[name])
    # any single cell can be recomputed on its own
    k = 7
    ctx = cp.context_grid("unseen")[k]
    alone = evaluate_context(bundle, ctx, 3, np.random.default_rng([4, k]))
    assert grid.cells[divmod(k, len(grid.lengths))] == alone


def test_success_count_is_monotone_in_threshold():
    rng = np.random.default_rng(1)
    forces, lengths = cp.grid_axes("test")
    grid = EvalGrid("test", forces, lengths, rng.uniform(0, 200, (9, 9)))
    counts = [success_count(grid, t) for t in np.linspace(0, 200, 21)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert success_count(grid, -1) == 20  # the unseen subset of the test grid


def test_eval_grid_csv_round_trip_and_mask():
    forces, lengths = cp.grid_axes("test")
    grid = EvalGrid("test", forces, lengths, np.arange(81.0).reshape(9, 9))
    text = grid.to_csv()
    assert len(text.strip().splitlines()) == 82
    assert "train_box" in text.splitlines()[0]
    back = EvalGrid.from_csv("test", text)
    np.testing.assert_array_equal(back.cells, grid.cells)
    assert grid.train_mask.sum() == 1  # only (10, 0.5) lies in the box on this grid


def test_heatmap_svg_is_standalone():
    forces, lengths = cp.grid_axes("extreme")
    svg = render_heatmap_svg(EvalGrid("extreme", forces, lengths, np.full((2, 3), 120.0)))
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<rect") >= 6


def test_transfer_curve_threshold_and_csv():
    c = TransferCurve("ib", 0.05, [80, 160, 240], [0.5, 0.95, 0.7])
    assert c.steps_to_threshold(0.9) == 160
    assert c.steps_to_threshold(0.99) is None
    assert transfer_curves_csv([c]).splitlines()[0] == "variant,beta,env_steps,mean_return"


def test_embedding_rows_cover_free_cells():
    layout = gw.generate_maze(0)
    bundle = make_bundle("grid", np.random.default_rng(0))
    rows = export_embeddings(bundle, layout)
    assert len(rows) == len(layout.free_cells())
    assert len({r.cell for r in rows}) == len(rows)
    again = export_embeddings(bundle, layout)
    assert all(np.array_equal(a.mu, b.mu) and a.value == b.value for a, b in zip(rows, again))
    text = embeddings_csv(rows)
    assert text.splitlines()[0].startswith("state_id,row,col,value,greedy_action,mu_0")
    with pytest.raises(ValueError):
        export_embeddings(make_bundle("cartpole", np.random.default_rng(0)), layout)


def test_critic_correlation_is_a_rank_statistic():
    layout = gw.generate_maze(0)
    rho = critic_value_correlation(make_bundle("grid", np.random.default_rng(0)), layout)
    assert -1.0 <= rho <= 1.0 and math.isfinite(rho)
