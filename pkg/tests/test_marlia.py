import json
from pathlib import Path

import numpy as np
import pytest

from conftest import random_instance
from impalloc.baselines import fp_policy
from impalloc.dual import solve_dual, solve_subproblem
from impalloc.market import Contracts, EpisodeState, run_episode
from impalloc.marlia import (
    OBS_DIM, MarliaConfig, MarliaPolicy, ReplayMemory, TrainingDivergence, action_gradient,
    actor_gradient, actor_update, apply_action, build_observation, critic_loss_grad,
    counterfactual_values, critic_update, load_checkpoint, rollout_value, save_checkpoint, train,
    write_log,
)
from impalloc.nets import MLP, Adam, SGD
from impalloc.traffic import TrafficConfig, generate_day, generate_pair

FIXTURES = Path(__file__).parent / "fixtures"


class TestObservation:
    def test_episode_start(self, rng):
        ds, cs = random_instance(rng, 200, 3, horizon=96)
        alphas = np.array([0.1, -0.2, 0.3])
        obs = build_observation(EpisodeState(ds, cs, alphas))
        d = cs.demand / cs.demand.sum()
        for j in range(3):
            expected = [1 / 96, 0, 0, 1 / 96, alphas[j] / cs.penalty[j], 0, 0, d[j]]
            assert obs[j] == pytest.approx(expected)
        assert np.array_equal(build_observation(EpisodeState(ds, cs, alphas), 1), obs[1])

    def test_fully_delivered_at_last_step(self, worked):
        ds, cs = worked
        s = EpisodeState(ds, cs, [0.3])
        s.delivered[:] = cs.demand
        s.t = ds.horizon
        assert build_observation(s)[0, 1] == 1.0

    def test_golden_mid_episode(self):
        gold = json.loads((FIXTURES / "observation_t41.json").read_text())
        ds, cs = generate_day(TrafficConfig(**gold["config"]))
        s = EpisodeState(ds, cs)
        for _ in range(gold["steps_played"]):
            s.play_step(np.array(gold["alphas"]))
        assert np.allclose(build_observation(s), gold["observation"], rtol=0, atol=1e-12)


class TestApplyAction:
    def test_examples(self):
        assert apply_action(0.5, 0.1, 1.0) == pytest.approx(0.6)
        assert apply_action(1.0, 0.1, 1.0) == 1.0
        assert apply_action(0.5, -0.1, 1.0) == pytest.approx(0.4)

    def test_vector(self):
        out = apply_action([0.0, 1.9], [0.1, 0.1], np.array([1.0, 2.0]))
        assert out.tolist() == pytest.approx([0.1, 2.0])

    def test_rejects_large_delta(self):
        with pytest.raises(ValueError):
            apply_action(0.5, 0.2, 1.0)


class TestRollout:
    def test_worked_instance(self, worked):
        ds, cs = worked
        assert rollout_value(EpisodeState(ds, cs), [0.3]) == pytest.approx(0.8)

    def test_terminal_is_pure_penalty(self, rng):
        ds, cs = random_instance(rng, 30, 2)
        s = EpisodeState(ds, cs)
        while not s.done:
            s.play_step()
        expected = -float(np.dot(cs.penalty, s.shortfalls()))
        assert rollout_value(s, s.alphas) == pytest.approx(expected)

    def test_zero_contracts(self, rng):
        ds, _ = random_instance(rng, 30, 0)
        s = EpisodeState(ds, Contracts([]))
        s.play_step()
        assert rollout_value(s, []) == pytest.approx(ds.from_step(2).b2.sum())

    def test_matches_replaying_the_rest(self, rng):
        ds, cs = random_instance(rng, 300, 3, horizon=10)
        s = EpisodeState(ds, cs, np.zeros(3))
        for _ in range(4):
            s.play_step()
        a = rng.uniform(-0.3, 0.3, 3)
        v = rollout_value(s, a)
        c = s.clone()
        while not c.done:
            c.play_step(a)
        assert v == pytest.approx(sum(c.rewards[4:]))

    def test_subproblem_consistency(self):
        ds, cs = generate_day(TrafficConfig(n_impressions=3000, m_contracts=4, seed=8))
        rng = np.random.default_rng(0)
        alphas = solve_dual(ds, cs).alphas
        for cut in rng.choice(np.arange(2, ds.horizon), size=5, replace=False):
            s = EpisodeState(ds, cs, alphas)
            while s.t < cut:
                s.play_step()
            sub = solve_subproblem(ds.from_step(s.t), cs, s.delivered)
            assert sub.general_position
            residual = cs.with_demand(np.maximum(cs.demand - s.delivered, 0))
            assert rollout_value(s, sub.alphas) == pytest.approx(sub.r_star - residual.prepaid, rel=1e-6)


class TestCounterfactual:
    def test_matches_explicit_rollouts(self):
        rng = np.random.default_rng(1)
        for _ in range(150):
            m = int(rng.integers(1, 5))
            ds, cs = random_instance(rng, int(rng.integers(0, 60)), m, horizon=6)
            s = EpisodeState(ds, cs, rng.uniform(-0.5, 0.5, m))
            for _ in range(int(rng.integers(0, 4))):
                s.play_step()
            a = rng.uniform(-0.5, 0.5, m)
            cf = counterfactual_values(s, a, s.alphas)
            for j in range(m):
                b = a.copy()
                b[j] = s.alphas[j]
                assert cf[j] == pytest.approx(rollout_value(s, a) - rollout_value(s, b), abs=1e-9)

    def test_unchanged_offsets_get_zero_credit(self, rng):
        ds, cs = random_instance(rng, 40, 3)
        s = EpisodeState(ds, cs, np.array([0.1, 0.2, 0.3]))
        assert np.all(counterfactual_values(s, s.alphas, s.alphas) == 0)

    def test_training_with_counterfactual_credit_runs(self, single_contract_day):
        ds, cs = single_contract_day
        res = train(ds, cs, MarliaConfig(episodes=2, credit="counterfactual"))
        assert len(res.log) == 3


class TestReplayMemory:
    def test_fifo_eviction(self):
        mem = ReplayMemory(3, obs_dim=1)
        for k in range(5):
            mem.add(np.array([[k]]), k, 10 * k)
        obs, act, val = mem.oldest()
        assert len(mem) == 3 and obs[:, 0].tolist() == [2, 3, 4] and val.tolist() == [20, 30, 40]

    def test_batch_add_broadcasts_value(self):
        mem = ReplayMemory(10)
        mem.add(np.zeros((4, OBS_DIM)), np.arange(4) * 0.01, 1.5)
        _, act, val = mem.oldest()
        assert act.tolist() == pytest.approx([0, 0.01, 0.02, 0.03]) and np.all(val == 1.5)

    def test_sample_shapes_and_determinism(self):
        mem = ReplayMemory(50)
        mem.add(np.random.default_rng(0).normal(size=(20, OBS_DIM)), 0.0, 0.0)
        a = mem.sample(8, np.random.default_rng(3))
        b = mem.sample(8, np.random.default_rng(3))
        assert a[0].shape == (8, OBS_DIM) and np.array_equal(a[0], b[0])


def _critic(seed=0):
    return MLP((OBS_DIM + 1, 16, 16, 1), rng=np.random.default_rng(seed))


class TestCritic:
    def test_perfect_critic_has_zero_loss_and_gradient(self):
        critic = _critic()
        obs = np.random.default_rng(1).normal(size=(32, OBS_DIM))
        act = np.zeros(32)
        val = critic(np.hstack([obs, act[:, None]]))[:, 0]
        loss, grads = critic_loss_grad(critic, obs, act, val)
        assert loss == 0.0 and all(np.all(g == 0) for g in grads)

    def test_overfit_one_batch(self):
        critic = _critic()
        rng = np.random.default_rng(2)
        obs, act = rng.normal(size=(32, OBS_DIM)), rng.uniform(-0.1, 0.1, 32)
        val = np.full(32, 0.7)
        opt = SGD(0.05)
        losses = [critic_update(critic, opt, obs, act, val) for _ in range(50)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.01 * losses[0]

    def test_empty_batch_is_noop(self):
        critic = _critic()
        before = [p.copy() for p in critic.params]
        assert critic_update(critic, SGD(0.1), np.zeros((0, OBS_DIM)), [], []) == 0.0
        assert all(np.array_equal(a, b) for a, b in zip(before, critic.params))


class PlantedCritic:
    """Q(o, a) = -(a - 0.05)^2, exposed through the MLP interface used by the learner."""

    def forward(self, x, cache=False):
        x = np.atleast_2d(x)
        out = -((x[:, -1:] - 0.05) ** 2)
        return (out, [x]) if cache else out

    __call__ = forward

    def backward(self, acts, grad_out):
        x = acts[0]
        g = np.zeros_like(x)
        g[:, -1] = (-2 * (x[:, -1] - 0.05)) * grad_out[:, 0]
        return [], g


class TestActor:
    def test_planted_critic_pulls_actor_to_target(self):
        rng = np.random.default_rng(5)
        actor = MLP((OBS_DIM, 16, 1), out_scale=0.1, rng=rng)
        opt = Adam(1e-2)
        obs = rng.normal(size=(64, OBS_DIM))
        for _ in range(600):
            actor_update(actor, PlantedCritic(), opt, obs)
        out = actor(rng.normal(size=(200, OBS_DIM)))[:, 0]
        assert np.all(np.abs(out - 0.05) < 0.01)

    def test_action_gradient_of_planted_critic(self):
        g = action_gradient(PlantedCritic(), np.zeros((2, OBS_DIM)), np.array([0.0, 0.1]))
        assert g.tolist() == pytest.approx([0.1, -0.1])

    def test_zero_critic_gives_zero_gradient(self):
        critic = _critic()
        for k in range(len(critic.params)):
            critic.params[k][:] = 0
        actor = MLP((OBS_DIM, 8, 1), out_scale=0.1, rng=np.random.default_rng(0))
        grads = actor_gradient(actor, critic, np.ones((4, OBS_DIM)))
        assert all(np.all(g == 0) for g in grads)


class TestPolicy:
    def test_shared_actor_for_all_contracts(self, rng):
        ds, cs = random_instance(rng, 200, 4, horizon=8)
        actor = MLP((OBS_DIM, 8, 1), out_scale=0.1, rng=rng)
        pol = MarliaPolicy(actor, np.zeros(4))
        s = EpisodeState(ds, cs, np.zeros(4))
        s.play_step()
        nxt = pol.next_alphas(s)
        obs = build_observation(s)
        assert nxt == pytest.approx(np.minimum(s.alphas + actor(obs)[:, 0] * cs.penalty, cs.penalty))

    def test_actions_bounded(self, rng):
        ds, cs = random_instance(rng, 200, 3, horizon=8)
        actor = MLP((OBS_DIM, 8, 1), out_scale=0.1, rng=rng)
        r = run_episode(ds, cs, MarliaPolicy(actor, np.zeros(3)))
        assert np.isfinite(r.total)


@pytest.fixture(scope="module")
def single_contract_day():
    return generate_day(TrafficConfig(n_impressions=4000, m_contracts=1, seed=6))


class TestTrain:
    def test_zero_contracts(self, rng):
        ds, _ = random_instance(rng, 100, 0, horizon=8)
        res = train(ds, Contracts([]), MarliaConfig(episodes=5))
        assert res.best_ratio == pytest.approx(1.0) and len(res.log) == 1

    def test_single_contract_converges(self, single_contract_day):
        ds, cs = single_contract_day
        res = train(ds, cs, MarliaConfig(episodes=300, seed=1, actor_lr=1e-5, select="last"))
        assert max(r["ratio"] for r in res.log) >= 0.95
        assert res.log[-1]["ratio"] >= 0.95

    def test_default_selection_keeps_a_good_actor(self, single_contract_day):
        ds, cs = single_contract_day
        res = train(ds, cs, MarliaConfig(episodes=300, seed=1))
        assert res.best_ratio >= max(0.95, res.log[0]["train_ratio"])
        assert res.best_episode > MarliaConfig().warmup_episodes

    def test_seeded_runs_identical(self, single_contract_day):
        ds, cs = single_contract_day
        a = train(ds, cs, MarliaConfig(episodes=5, seed=3))
        b = train(ds, cs, MarliaConfig(episodes=5, seed=3))
        assert [r["R"] for r in a.log] == [r["R"] for r in b.log]
        assert all(np.array_equal(x, y) for x, y in zip(a.actor.params, b.actor.params))

    def test_best_selection(self, single_contract_day):
        ds, cs = single_contract_day
        res = train(ds, cs, MarliaConfig(episodes=6, select="best"))
        assert res.best_ratio == max(r["train_ratio"] for r in res.log)
        assert res.log[res.best_episode]["train_ratio"] == res.best_ratio
        replay = run_episode(ds, cs, res.policy(solve_dual(ds, cs).alphas)).total
        assert replay / solve_dual(ds, cs).r_star == pytest.approx(res.best_ratio)

    def test_held_out_day_is_reported_not_selected_on(self):
        tr, te, cs = generate_pair(TrafficConfig(n_impressions=3000, m_contracts=2, seed=4), 0.95, 1.05)
        res = train(tr, cs, MarliaConfig(episodes=4, select="best"), eval_dataset=te)
        star = solve_dual(te, cs).r_star
        assert all(r["R_star"] == star for r in res.log)
        assert res.best_ratio == max(r["train_ratio"] for r in res.log)

    def test_callback_can_stop_training(self, single_contract_day):
        ds, cs = single_contract_day
        res = train(ds, cs, MarliaConfig(episodes=50), callback=lambda row: row["episode"] >= 2)
        assert len(res.log) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self, single_contract_day):
        ds, cs = single_contract_day
        with pytest.raises(TrainingDivergence):
            train(ds, cs, MarliaConfig(episodes=3, critic_lr=1e300, optimizer="sgd"))

    def test_beats_fixed_policy_on_drifted_day(self):
        tr, te, cs = generate_pair(TrafficConfig(n_impressions=20_000, m_contracts=5, seed=2), 0.95, 1.05)
        a = solve_dual(tr, cs).alphas
        res = train(tr, cs, MarliaConfig(episodes=300, seed=0), eval_dataset=te)
        fp = run_episode(te, cs, fp_policy(a)).total
        assert run_episode(te, cs, res.policy(a)).total > fp

    def test_checkpoint_and_log(self, tmp_path, single_contract_day):
        ds, cs = single_contract_day
        res = train(ds, cs, MarliaConfig(episodes=2))
        save_checkpoint(res, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        x = np.ones((1, OBS_DIM))
        assert np.array_equal(back.actor(x), res.actor(x))
        write_log(res.log, tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "episode,R,R_star,ratio,train_ratio,critic_loss,wall_ms" and len(lines) == 4

    @pytest.mark.parametrize("kw", [{"episodes": -1}, {"sample_fraction": 0.0},
                                    {"optimizer": "rmsprop"}, {"select": "median"},
                                    {"credit": "local"}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            MarliaConfig(**kw)
