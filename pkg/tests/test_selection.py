import csv
import json

import numpy as np
import pytest

from irm import autodiff as ad
from irm import discriminators as D
from irm import epic
from irm import selection as S
from irm.planar import (
    ConstantReward, EnvConfig, ScriptedSkillPolicy, rollout_positions, shaped_goal_reward, skill_grid,
)
from irm.rng import stream

from tests.helpers import pretrained

GOAL = shaped_goal_reward((-64.0, 64.0))


@pytest.fixture(scope="module")
def disc():
    return pretrained(0)[0]


@pytest.fixture(scope="module")
def buffer():
    return pretrained(0)[1]


@pytest.fixture(scope="module")
def small_disc():
    return D.ContrastiveDiscriminator.init(2, 2, np.random.default_rng(5), embed_dim=8, hidden_dims=(16,))


@pytest.fixture(scope="module")
def predictive():
    return D.PredictiveDiscriminator.init(2, 2, np.random.default_rng(6), hidden_dims=(16,), delta_scale=10.0)


@pytest.fixture(scope="module")
def blind_disc():
    """Skill encoder with zero first-layer weights: the intrinsic reward ignores z."""
    rng = np.random.default_rng(7)
    return D.ContrastiveDiscriminator(ad.Mlp.init(4, 8, (16,), rng), ad.Mlp([np.zeros((2, 8))], [rng.normal(size=8)]))


def grid_losses(disc, reward, cfg, n=64):
    grid = skill_grid(n)
    return grid, S.matching_objective(disc, reward, cfg).losses(grid)[0]


# ------------------------------------------------------------------ config


def test_config_defaults_follow_published_settings():
    cfg = S.SelectionConfig()
    assert (cfg.cem_iterations, cfg.cem_samples, cfg.cem_elites) == (5, 1000, 100)
    assert (cfg.gd_steps, cfg.gd_lr, cfg.gd_init) == (5000, 5e-3, 0.5)
    assert cfg.n_random == 100 and cfg.grid_points == 10 and cfg.env_candidates == 10


@pytest.mark.parametrize("kw", [
    {"method": "bogus"}, {"metric": "L3"}, {"n_random": 0}, {"cem_elites": 1000},
    {"env_cem_elites": 32}, {"gd_lr": 0.0}, {"cem_init_std": -1.0}, {"eval_episodes": 0},
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        S.SelectionConfig(**kw)


# ------------------------------------------------------------ objective


def test_contrastive_values_match_brute_canonicalization(small_disc):
    cfg = S.SelectionConfig(sample_spec=epic.SampleSpec(n_pearson=40, n_canonical=60))
    obj = S.matching_objective(small_disc, GOAL, cfg)
    p, c = obj.samples.pearson, obj.samples.canonical
    zs = np.random.default_rng(1).random((3, 2))
    got = obj.intrinsic_values(zs)
    for k, z in enumerate(zs):
        want = epic.canonicalize(small_disc.reward_fn(z), p.states, p.next_states, c.states, c.next_states, obj.samples.gamma)
        assert np.allclose(got[:, k], want, atol=1e-10)


def test_predictive_closed_form_matches_brute_canonicalization(predictive):
    cfg = S.SelectionConfig(sample_spec=epic.SampleSpec(n_pearson=30, n_canonical=50))
    obj = S.matching_objective(predictive, GOAL, cfg)
    p, c = obj.samples.pearson, obj.samples.canonical
    for z in np.random.default_rng(2).random((3, 2)):
        want = epic.canonicalize(predictive.reward_fn(z), p.states, p.next_states, c.states, c.next_states, obj.samples.gamma)
        assert np.allclose(obj.intrinsic_values(z)[:, 0], want, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("which", ["small_disc", "predictive"])
def test_losses_agree_with_epic_distance(which, request):
    model = request.getfixturevalue(which)
    cfg = S.SelectionConfig(sample_spec=epic.SampleSpec(n_pearson=64, n_canonical=128))
    obj = S.matching_objective(model, GOAL, cfg)
    zs = np.random.default_rng(3).random((4, 2))
    batch, flags = obj.losses(zs)
    assert not flags.any()
    for z, got in zip(zs, batch):
        assert got == pytest.approx(obj.loss(z).distance, abs=1e-12)
        assert got == pytest.approx(epic.epic_distance(model.reward_fn(z), GOAL, obj.samples).distance, abs=1e-9)


@pytest.mark.parametrize("which", ["small_disc", "predictive"])
def test_loss_gradient_matches_finite_differences(which, request):
    model = request.getfixturevalue(which)
    obj = S.matching_objective(model, GOAL, S.SelectionConfig(sample_spec=epic.SampleSpec(n_pearson=64, n_canonical=128)))
    h = 1e-5
    for z in np.random.default_rng(4).uniform(0.1, 0.9, (5, 2)):
        loss, grad, _ = obj.loss_and_grad(z)
        assert loss == pytest.approx(obj.loss(z).distance, abs=1e-12)
        fd = np.array([(obj.loss(z + h * e).distance - obj.loss(z - h * e).distance) / (2 * h) for e in np.eye(2)])
        assert np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def test_ablation_metric_losses_match_reference(small_disc):
    for kind in epic.ABLATION_KINDS:
        cfg = S.SelectionConfig(metric=kind, sample_spec=epic.SampleSpec(n_pearson=50, n_canonical=50))
        obj = S.matching_objective(small_disc, GOAL, cfg)
        z = np.array([0.3, 0.6])
        want = epic.ablation_metric(kind, small_disc.reward_fn(z), GOAL, obj.samples)
        assert obj.losses(z)[0][0] == pytest.approx(want, rel=1e-9)
    with pytest.raises(ValueError):
        S.matching_objective(small_disc, GOAL, S.SelectionConfig(metric="L1")).loss_and_grad([0.5, 0.5])


def test_feature_cache_reuses_and_separates(small_disc):
    S.clear_feature_cache()
    cfg = S.SelectionConfig()
    a = S.matching_objective(small_disc, GOAL, cfg)
    b = S.matching_objective(small_disc, shaped_goal_reward((10.0, 10.0)), cfg)
    assert a.features is b.features
    other = small_disc.copy()
    other.skill_encoder.params[0].value += 1.0
    other.transition_encoder.params[0].value += 1.0
    c = S.matching_objective(other, GOAL, cfg)
    assert c.features is not a.features and not np.allclose(c.features, a.features)
    d = S.matching_objective(small_disc, GOAL, S.SelectionConfig(seed=1))
    assert d.features is not a.features
    S.clear_feature_cache()
    e = S.matching_objective(small_disc, GOAL, cfg)
    assert e.features is not a.features and np.array_equal(e.features, a.features)


# --------------------------------------------------------------- irm_random


def test_irm_random_returns_argmin_of_its_candidates(small_disc):
    cfg = S.SelectionConfig(n_random=50)
    rep = S.irm_random(small_disc, GOAL, cfg)
    cands = stream(0, "irm_random").random((50, 2))
    losses = S.matching_objective(small_disc, GOAL, cfg).losses(cands)[0]
    assert np.array_equal(rep.z, cands[np.argmin(losses)])
    assert rep.loss == losses.min() and rep.env_steps == 0


def test_irm_random_contains_grid_argmin(disc):
    cfg = S.SelectionConfig()
    grid, losses = grid_losses(disc, GOAL, cfg)
    best = grid[np.argmin(losses)]
    cands = np.vstack([np.random.default_rng(0).random((20, 2)), best, np.random.default_rng(1).random((20, 2))])
    assert np.array_equal(S.irm_random(disc, GOAL, cfg, candidates=cands).z, best)


def test_irm_random_single_candidate_and_ties(small_disc):
    cfg = S.SelectionConfig(n_random=1)
    only = stream(0, "irm_random").random((1, 2))[0]
    assert np.array_equal(S.irm_random(small_disc, GOAL, cfg).z, only)


def test_irm_random_ties_go_to_lowest_index(blind_disc):
    cands = np.array([[0.9, 0.1], [0.2, 0.4], [0.7, 0.7]])
    rep = S.irm_random(blind_disc, GOAL, S.SelectionConfig(), candidates=cands)
    assert np.array_equal(rep.z, cands[0])


def test_irm_random_1024_candidates_in_top_five_percent(disc):
    cfg = S.SelectionConfig(n_random=1024)
    _, losses = grid_losses(disc, GOAL, cfg)
    rep = S.irm_random(disc, GOAL, cfg)
    assert np.mean(losses < rep.loss) <= 0.05


def test_irm_random_budget_is_monotone(disc):
    best = [S.irm_random(disc, GOAL, S.SelectionConfig(n_random=n)).loss for n in (1, 3, 10, 30, 100, 300, 1000)]
    assert all(b <= a for a, b in zip(best, best[1:]))


def test_irm_random_all_degenerate_is_an_error(small_disc):
    with pytest.raises(ValueError, match="degenerate"):
        S.irm_random(small_disc, ConstantReward(1.0), S.SelectionConfig(n_random=5))


# ------------------------------------------------------------------ CEM


def test_cem_converges_on_quadratic():
    z0 = np.array([0.23, 0.71])
    z, val, trace = S.cem(lambda z: np.sum((z - z0) ** 2, axis=1), 2, np.random.default_rng(0), 5, 1000, 100)
    assert np.linalg.norm(z - z0) < 1e-2
    assert len(trace) == 5 and val == pytest.approx(np.sum((z - z0) ** 2))


def test_cem_maximize_and_best_ever():
    z0 = np.array([0.8, 0.3, 0.5])
    z, val, trace = S.cem(lambda z: -np.sum((z - z0) ** 2, axis=1), 3, np.random.default_rng(1), 5, 500, 50, maximize=True)
    assert np.linalg.norm(z - z0) < 2e-2
    assert val == max(t["best_loss"] for t in trace)


def test_cem_stops_early_when_elites_collapse():
    # every elite clips to the corner, so the elite variance is exactly zero
    z, val, trace = S.cem(lambda z: -np.sum(z, axis=1), 2, np.random.default_rng(2), 50, 200, 10)
    assert len(trace) < 50 and z.tolist() == [1.0, 1.0] and val == -2.0


def test_irm_cem_defaults_accounting(disc):
    rep = S.irm_cem(disc, GOAL, S.SelectionConfig())
    assert rep.env_steps == 0 and rep.loss_evaluations == 5 * 1000
    assert len(rep.trace) == 5 and np.all((rep.z >= 0) & (rep.z <= 1))
    elite = [t["elite_mean"] for t in rep.trace]
    assert all(b <= a + 1e-12 for a, b in zip(elite, elite[1:]))


def test_irm_cem_is_reproducible_and_resample_runs(disc):
    cfg = S.SelectionConfig(cem_samples=200, cem_elites=20)
    a, b = S.irm_cem(disc, GOAL, cfg), S.irm_cem(disc, GOAL, cfg)
    assert np.array_equal(a.z, b.z) and a.loss == b.loss
    c = S.irm_cem(disc, GOAL, S.SelectionConfig(cem_samples=200, cem_elites=20, resample=True))
    assert c.env_steps == 0 and np.isfinite(c.loss)


# ------------------------------------------------------------------- GD


def test_irm_gd_zero_gradient_leaves_z_unchanged(blind_disc):
    rep = S.irm_gd(blind_disc, GOAL, S.SelectionConfig(gd_steps=50))
    assert rep.z.tolist() == [0.5, 0.5]
    assert rep.trace[0]["best_loss"] == pytest.approx(rep.loss, abs=1e-12)


def test_irm_gd_descends_and_stays_feasible(disc):
    cfg = S.SelectionConfig(gd_steps=300)
    rep = S.irm_gd(disc, GOAL, cfg)
    init = S.matching_objective(disc, GOAL, cfg).loss([0.5, 0.5]).distance
    assert rep.env_steps == 0 and rep.loss <= init
    assert np.all((rep.z >= 0) & (rep.z <= 1))
    assert rep.trace[0]["best_loss"] == pytest.approx(init, abs=1e-12)


def test_irm_gd_aborts_on_non_finite_loss(disc, monkeypatch):
    monkeypatch.setattr(S.MatchingObjective, "loss_and_grad", lambda self, z: (np.nan, np.zeros(2), None))
    with pytest.raises(FloatingPointError, match="non-finite"):
        S.irm_gd(disc, GOAL, S.SelectionConfig(gd_steps=3))


# ------------------------------------------------------------ baselines


def test_grid_search_three_dim_candidates():
    pol, env = ScriptedSkillPolicy(skill_dim=3), EnvConfig()
    target = np.full(3, 7 / 9)
    rep = S.grid_search_baseline(pol, shaped_goal_reward(tuple(pol.goal_map(target))), env, S.SelectionConfig())
    assert np.allclose(rep.z, target) and rep.env_steps == 10 * env.horizon


def test_grid_search_constant_reward_picks_first():
    rep = S.grid_search_baseline(ScriptedSkillPolicy(), ConstantReward(0.0), EnvConfig(), S.SelectionConfig())
    assert rep.z.tolist() == [0.0, 0.0]


def test_grid_search_top_right_goal_lands_top_right():
    pol, env = ScriptedSkillPolicy(), EnvConfig()
    rep = S.grid_search_baseline(pol, shaped_goal_reward((100.0, 100.0)), env, S.SelectionConfig())
    final = rollout_positions(pol, rep.z[None], env)[0, -1]
    assert final[0] > 0 and final[1] > 0


def test_env_rollout_accounting_and_reproducibility():
    pol, env, cfg = ScriptedSkillPolicy(), EnvConfig(horizon=40), S.SelectionConfig(seed=3)
    a = S.env_rollout_baseline(pol, GOAL, env, cfg)
    b = S.env_rollout_baseline(pol, GOAL, env, cfg)
    assert np.array_equal(a.z, b.z) and a.env_steps == 10 * 40


def test_env_rollout_with_oracle_candidate_matches_its_return():
    pol, env, cfg = ScriptedSkillPolicy(), EnvConfig(), S.SelectionConfig()
    grid = skill_grid(16)
    rets = [S.zero_shot_eval(pol, z, GOAL, env) for z in grid]
    oracle = grid[int(np.argmax(rets))]
    cands = np.vstack([np.random.default_rng(0).random((9, 2)), oracle])
    rep = S.env_rollout_baseline(pol, GOAL, env, cfg, candidates=cands)
    assert rep.zero_shot_return >= max(rets) - 1e-12


def test_env_rollout_cem_accounting_and_elite_trace():
    pol, env = ScriptedSkillPolicy(), EnvConfig()
    rep = S.env_rollout_cem(pol, GOAL, env, S.SelectionConfig())
    assert rep.env_steps == len(rep.trace) * 32 * env.horizon
    elite = [t["elite_mean"] for t in rep.trace]
    assert all(b >= a - 1e-12 for a, b in zip(elite, elite[1:]))


def test_env_rollout_cem_published_budget_exceeds_100k():
    env = EnvConfig(horizon=200)
    cfg = S.SelectionConfig(env_cem_samples=1000, env_cem_elites=100)
    rep = S.env_rollout_cem(ScriptedSkillPolicy(), shaped_goal_reward((20.0, -30.0)), env, cfg)
    assert rep.env_steps == 5 * 1000 * 200 > 100_000


def test_random_skill_and_relabel(buffer):
    pol, env, cfg = ScriptedSkillPolicy(), EnvConfig(), S.SelectionConfig(seed=2)
    rep = S.random_skill(pol, GOAL, env, cfg)
    assert np.array_equal(rep.z, stream(2, "random_skill").random(2)) and rep.env_steps == 0
    rel = S.relabel(buffer, GOAL, cfg, pol, env)
    skills, _ = buffer.distinct_skills()
    assert rel.env_steps == 0 and any(np.array_equal(rel.z, s) for s in skills)
    assert rel.trace[0]["best_loss"] >= rel.trace[0]["mean_loss"]


# -------------------------------------------------------------- zero-shot


def test_zero_shot_trivial_rewards():
    pol, env = ScriptedSkillPolicy(), EnvConfig(horizon=17)
    assert S.zero_shot_eval(pol, [0.3, 0.3], ConstantReward(0.0), env) == 0.0
    assert S.zero_shot_eval(pol, [0.3, 0.3], ConstantReward(1.0), env, episodes=3) == 17.0
    with pytest.raises(ValueError):
        S.zero_shot_eval(pol, [0.3, 0.3], GOAL, env, episodes=0)


def test_zero_shot_matches_resimulation():
    pol, env = ScriptedSkillPolicy(), EnvConfig(horizon=12)
    z = np.array([0.1, 0.85])
    pos, goal, total = np.zeros(2), pol.goal_map(z), 0.0
    for _ in range(env.horizon):
        nxt = np.clip(pos + np.clip(pol.gain * (goal - pos), -10, 10), -128, 128)
        total += GOAL(pos[None], nxt[None])[0]
        pos = nxt
    assert S.zero_shot_eval(pol, z, GOAL, env) == pytest.approx(total, abs=1e-12)


def test_zero_shot_noisy_is_seeded():
    pol, env = ScriptedSkillPolicy(), EnvConfig(action_noise=2.0)
    a = S.zero_shot_eval(pol, [0.2, 0.7], GOAL, env, episodes=4, seed=9)
    b = S.zero_shot_eval(pol, [0.2, 0.7], GOAL, env, episodes=4, seed=9)
    c = S.zero_shot_eval(pol, [0.2, 0.7], GOAL, env, episodes=4, seed=10)
    assert a == b != c


# ---------------------------------------------------------- select / report


def test_select_dispatch_and_errors(small_disc, buffer):
    pol, env, cfg = ScriptedSkillPolicy(), EnvConfig(), S.SelectionConfig(n_random=10)
    assert S.select("irm_random", GOAL, cfg, small_disc).method == "irm_random"
    with pytest.raises(ValueError, match="discriminator"):
        S.select("irm_cem", GOAL, cfg)
    with pytest.raises(ValueError, match="policy"):
        S.select("grid_search", GOAL, cfg)
    with pytest.raises(ValueError, match="buffer"):
        S.select("relabel", GOAL, cfg, policy=pol, env=env)
    assert S.select("relabel", GOAL, cfg, policy=pol, env=env, buffer=buffer).zero_shot_return is not None


@pytest.mark.parametrize("method", S.IRM_METHODS)
def test_irm_methods_never_touch_the_environment(method, disc):
    cfg = S.SelectionConfig(gd_steps=20, cem_samples=100, cem_elites=10)
    rep = S.select(method, GOAL, cfg, disc, ScriptedSkillPolicy(), EnvConfig())
    assert rep.env_steps == 0 and rep.zero_shot_return is not None


def test_report_json_and_trace_csv(small_disc, tmp_path):
    rep = S.irm_cem(small_disc, GOAL, S.SelectionConfig(cem_samples=50, cem_elites=5))
    data = json.loads(rep.to_json())
    assert data["z"] == rep.z.tolist() and data["env_steps"] == 0 and "wall_time" in data
    assert "wall_time" not in rep.to_dict(timing=False)
    rep.write_trace_csv(tmp_path / "trace.csv")
    with (tmp_path / "trace.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iteration", "best_loss", "mean_loss"]
    assert [float(r["best_loss"]) for r in rows] == [t["best_loss"] for t in rep.trace]
