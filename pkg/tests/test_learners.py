import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from rmlab.envs import ACTIONS, GridMap, GridState, make_env, office_map, two_box_map
from rmlab.learners import (
    INF, BufferEntry, EnvTransition, EtaTable, Experience, Hyperparams, Learner, ParameterError, QTable,
    RewardParams, TransitionBuffer, UsageError, corm_grounding_flush, corm_high_level_select,
    corm_low_level_step, crm_step, eta_update, final_reward, greedy_rollout, learner_from_dict,
    learner_to_dict, load_learner, qrm_step, reachable_states, run_episode, save_learner,
    subtask_universe,
)
from rmlab.core import TruthAssignment, rm_step
from rmlab.tasks import task_rm

HP = Hyperparams(alpha=0.5)


class TestQrm:
    def test_terminal_fixed_point(self):
        q = QTable(1.0)
        qrm_step(q, Experience((0, 0), "u0", 0, (0, 1), "u1", 1.0, True), Hyperparams(alpha=1.0))
        assert q.get(((0, 0), "u0"), 0) == 1.0

    def test_single_substitution(self):
        q = QTable(1.0)
        qrm_step(q, Experience((0, 0), "u0", 0, (0, 1), "u0", 0.0, False), HP)
        assert q.get(((0, 0), "u0"), 0) == pytest.approx(0.95, abs=1e-12)

    def test_sweeps_match_value_iteration(self):
        m = GridMap("delivery", 1, 3, (0, 0), boxes=((0, 1),), station=(0, 2))
        env, rm = make_env(m), task_rm("delivery", 1, "boolean")
        states = [GridState((0, c), None, frozenset({"b1"})) for c in (0, 2)]
        states += [GridState((0, c), "b1", frozenset()) for c in range(3)]
        hp = Hyperparams(alpha=1.0, observation="state")
        q = QTable(1.0)
        for _ in range(20):
            for s in states:
                u = "u0" if s.carried is None else "u1"
                for a in ACTIONS:
                    out = env.step(s, a)
                    u2, r, _ = rm_step(rm, u, out.assignment)
                    qrm_step(q, Experience(s, u, a, out.next_state, u2, float(r), rm.is_terminal(u2)), hp)
        for s in states:
            if s.carried is None:
                u = "u0"
                d = oracles.grid_distance(m, s.pos, m.boxes[0]) + oracles.grid_distance(m, m.boxes[0], m.station)
            else:
                u = "u1"
                d = oracles.grid_distance(m, s.pos, m.station)
            if d == 0:
                continue
            assert q.max((s, u)) == pytest.approx(0.9 ** (d - 1), abs=1e-12)


class TestCrm:
    def setup_method(self):
        self.rm = task_rm("delivery", 2, "boolean")
        self.t = TruthAssignment({"s": False, "b1": False, "b2": False})

    def test_all_non_terminal_states_before_pickup(self):
        reach = reachable_states(self.rm, frozenset())
        assert set(reach) == set(self.rm.states)
        q = QTable(1.0)
        n = crm_step(q, EnvTransition((0, 0), 1, (1, 0), self.t), self.rm, reach, HP)
        assert n == len(self.rm.states) == 7
        assert len(q) == 7

    def test_consumed_box_excludes_states(self):
        reach = reachable_states(self.rm, frozenset({"b1"}))
        assert "u0" not in reach and "u4" not in reach
        assert {"u1", "u3", "u5"} <= set(reach)

    def test_single_state_matches_qrm(self):
        a, b = QTable(1.0), QTable(1.0)
        crm_step(a, EnvTransition((0, 0), 1, (1, 0), self.t), self.rm, ("u0",), HP)
        qrm_step(b, Experience((0, 0), "u0", 1, (1, 0), "u0", 0.0, False), HP)
        assert a.values == b.values


class TestCormLowLevel:
    def setup_method(self):
        self.rm = task_rm("delivery", 2, "coupled")
        self.none = TruthAssignment({"s": False, "b1": False, "b2": False})

    def test_initial_group_updates_both_boxes(self):
        q = QTable(1.0)
        hp = Hyperparams(alpha=0.5, counterfactual=False)
        n = corm_low_level_step(q, (0, 0), 1, (1, 0), self.rm.initial_group, self.rm, hp, assignment=self.none)
        assert n == 2
        assert {k[1] for k in q.values} == {"b1", "b2"}

    def test_singleton_group(self):
        q = QTable(1.0)
        hp = Hyperparams(alpha=0.5, counterfactual=False)
        n = corm_low_level_step(q, (0, 0), 1, (1, 0), ("3{}s",), self.rm, hp, assignment=self.none)
        assert n == 1 and list(q.values) == [((0, 0), "s")]

    def test_counterfactual_bounded_by_subtasks(self):
        universe = subtask_universe(self.rm)
        assert set(universe) == {"b1", "b2", "s"}
        for group in self.rm.groups:
            if self.rm.is_terminal(group):
                continue
            q = QTable(1.0)
            n = corm_low_level_step(q, (0, 0), 1, (1, 0), group, self.rm, HP, assignment=self.none)
            assert n <= len(universe)

    def test_consumed_objective_skipped(self):
        q = QTable(1.0)
        n = corm_low_level_step(q, (0, 0), 1, (1, 0), ("1{b2}s",), self.rm, HP,
                                assignment=self.none, consumed=frozenset({"b1"}))
        assert n == 2 and {k[1] for k in q.values} == {"s", "b2"}


class TestFinalReward:
    def test_best_length(self):
        assert final_reward(10, 3, RewardParams(0.9, 80, 0, 0, 10)) == 1

    def test_inside_window(self):
        assert final_reward(13, 3, RewardParams(0.9, 80, 0, 0, 10)) == pytest.approx(0.6561, abs=1e-12)

    def test_no_window(self):
        assert final_reward(500, 3, RewardParams(0.9, -1, 0, 0, 10)) == 1

    def test_clamp(self):
        assert final_reward(110, 3, RewardParams(0.9, 80, 0, 0, 10)) == pytest.approx(0.9 ** 81, abs=1e-12)

    def test_bad_window(self):
        with pytest.raises(ParameterError):
            final_reward(10, 3, RewardParams(0.9, -2, 0, 0, 10))

    def test_exact_rationals(self):
        g = Fraction(9, 10)
        assert final_reward(12, 1, RewardParams(g, 5, 0, 0, 10)) == g ** 3

    @given(st.integers(0, 60), st.integers(0, 60), st.integers(1, 20))
    def test_non_increasing(self, dk, lam, kx):
        p = RewardParams(Fraction(9, 10), lam, 0, 0, 10)
        assert final_reward(10 + dk, kx, p) >= final_reward(11 + dk, kx, p)


def _entry(exploit, steps=3):
    return BufferEntry(((0, 0), "b1"), 0, "0{b1,b2}b1", "b1", steps, steps, exploit)


class TestFlush:
    def test_first_success(self):
        q, params = QTable(0.5), RewardParams(0.9, 80, 0, 0, INF)
        buf = TransitionBuffer([_entry(True), _entry(True, 5)], goal_reached=True)
        n = corm_grounding_flush(buf, q, 12, params, alpha=1.0)
        assert n == 2 and params.best_length == 12
        assert q.get(((0, 0), "b1"), 0) == 1.0
        assert buf.entries == []

    def test_failure_discards(self):
        q, params = QTable(0.5), RewardParams(0.9, 80, 0, 0, 20)
        buf = TransitionBuffer([_entry(True)], goal_reached=False)
        assert corm_grounding_flush(buf, q, 7, params, alpha=1.0) == 0
        assert params.best_length == 20 and len(q) == 0 and buf.entries == []

    def test_explore_only(self):
        q, params = QTable(0.5), RewardParams(0.9, 80, 0, 0, INF)
        buf = TransitionBuffer([_entry(False), _entry(False)], goal_reached=True)
        assert corm_grounding_flush(buf, q, 12, params, alpha=1.0) == 0 and len(q) == 0

    def test_unterminated(self):
        with pytest.raises(UsageError):
            corm_grounding_flush(TransitionBuffer([_entry(True)]), QTable(), 5, RewardParams(), 1.0)

    def test_best_length_only_decreases(self):
        params = RewardParams(0.9, -1, 0, 0, 10)
        corm_grounding_flush(TransitionBuffer([], True), QTable(), 14, params, 1.0)
        assert params.best_length == 10


class TestSelect:
    group = ("0{b1,b2}b1", "0{b1,b2}b2")

    def test_lower_eta_wins(self):
        eta = EtaTable({self.group[0]: 12, self.group[1]: 10})
        for seed in range(20):
            assert corm_high_level_select(self.group, eta, 0.0, set(), random.Random(seed)) == (self.group[1], True)

    def test_unvisited_uniform(self):
        rng = random.Random(0)
        picks = [corm_high_level_select(self.group, EtaTable(), 0.0, set(), rng)[0] for _ in range(2000)]
        assert 900 < picks.count(self.group[0]) < 1100

    def test_unvisited_loses(self):
        eta = EtaTable({self.group[1]: 40})
        assert corm_high_level_select(self.group, eta, 0.0, set(), random.Random(1))[0] == self.group[1]

    def test_singleton(self):
        rng = random.Random(0)
        flags = {corm_high_level_select(("3{}s",), EtaTable(), 0.5, set(), rng) for _ in range(50)}
        assert flags == {("3{}s", True), ("3{}s", False)}

    def test_explore_prefers_unused(self):
        rm = task_rm("delivery", 2, "coupled")
        used = {(self.group[0], tr.target) for tr in rm.progress_transitions(self.group[0])}
        rng = random.Random(3)
        for _ in range(50):
            assert corm_high_level_select(self.group, EtaTable(), 1.0, used, rng, rm) == (self.group[1], False)


class TestEta:
    def test_goal_and_last_subtask(self):
        eta = eta_update(EtaTable(), [("3{}s", 9), ("4{}", 10)], 10, True)
        assert eta["4{}"] == 0 and eta["3{}s"] == 1

    def test_failure_unchanged(self):
        eta = EtaTable({"3{}s": 4})
        eta_update(eta, [("3{}s", 1)], 5, False)
        assert dict(eta) == {"3{}s": 4}

    def test_never_increases(self):
        eta = EtaTable({"3{}s": 2})
        eta_update(eta, [("3{}s", 1)], 20, True)
        assert eta["3{}s"] == 2


class TestEpisodes:
    def test_corm_needs_coupled(self):
        learner = Learner.create("corm", HP, 0)
        with pytest.raises(ParameterError):
            run_episode(learner, make_env(two_box_map()), task_rm("delivery", 2, "agenda"), HP)

    def test_unknown_algo(self):
        with pytest.raises(ParameterError):
            Learner.create("sarsa", HP, 0)

    def test_step_limit_is_failure(self):
        learner = Learner.create("qrm", HP, 0)
        rec = run_episode(learner, make_env(two_box_map()), task_rm("delivery", 2, "boolean"), HP, max_steps=3)
        assert rec.length == 3 and not rec.success and rec.failure == "step_limit"

    def test_decoration_leaves_eta_and_best(self):
        m = GridMap("office", 2, 3, (0, 0), coffee=((1, 0),), offices=((1, 2),),
                    decorations=frozenset({(0, 1)}))
        env, rm = make_env(m), task_rm("office", 1, "coupled")
        hp = Hyperparams(alpha=0.5, epsilon=0.0)
        learner = Learner.create("corm", hp, 0)
        learner.q.values[((0, 0), "coffee")] = [0.0, 0.0, 0.0, 1.0]
        rec = run_episode(learner, env, rm, hp)
        assert rec.failure == "env_failure" and rec.length == 1
        assert dict(learner.eta) == {} and learner.params.best_length == INF

    @pytest.mark.parametrize("algo,variant", [("qrm", "boolean"), ("crm", "boolean"), ("corm", "coupled")])
    def test_checkpoint_resume_is_identical(self, tmp_path, algo, variant):
        env, rm = make_env(two_box_map()), task_rm("delivery", 2, variant)
        a = Learner.create(algo, HP, 7)
        for _ in range(5):
            run_episode(a, env, rm, HP)
        path = tmp_path / "ck.json"
        save_learner(a, path, {"note": "x"})
        b, extra = load_learner(path)
        assert extra == {"note": "x"}
        ra = [run_episode(a, env, rm, HP) for _ in range(5)]
        rb = [run_episode(b, env, rm, HP) for _ in range(5)]
        assert [r.rewards for r in ra] == [r.rewards for r in rb]
        assert json.dumps(learner_to_dict(a)) == json.dumps(learner_to_dict(b))

    def test_bad_checkpoint_version(self):
        data = learner_to_dict(Learner.create("qrm", HP, 0))
        data["version"] = 99
        with pytest.raises(UsageError):
            learner_from_dict(data)

    def test_state_keys_round_trip(self):
        hp = Hyperparams(alpha=0.5, observation="state")
        env, rm = make_env(two_box_map()), task_rm("delivery", 2, "boolean")
        a = Learner.create("qrm", hp, 1)
        run_episode(a, env, rm, hp)
        b = learner_from_dict(json.loads(json.dumps(learner_to_dict(a))))
        assert b.q.values == a.q.values

    def test_converged_greedy_is_deterministic(self):
        env, rm = make_env(two_box_map()), task_rm("delivery", 2, "coupled")
        learner = Learner.create("corm", HP, 0)
        while learner.steps < 20000:
            run_episode(learner, env, rm, HP)
        first = greedy_rollout(learner, env, rm)
        assert first.success and first.length == oracles.delivery_optimum(two_box_map())
        assert greedy_rollout(learner, env, rm).rewards == first.rewards


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([("qrm", "boolean"), ("crm", "agenda"), ("corm", "coupled")]),
       st.integers(0, 1000), st.sampled_from(["delivery", "office"]))
def test_q_values_stay_bounded(pair, seed, domain):
    algo, variant = pair
    m, n = (two_box_map(), 2) if domain == "delivery" else (office_map(1), 1)
    env, rm = make_env(m), task_rm(domain, n, variant)
    learner = Learner.create(algo, HP, seed)
    for _ in range(10):
        run_episode(learner, env, rm, HP)
    for row in learner.q.values.values():
        assert all(0.0 <= v <= 1.0 for v in row)
    assert learner.peak_step_updates <= max(len(rm.states), len(subtask_universe(rm)) if algo == "corm" else 0)
