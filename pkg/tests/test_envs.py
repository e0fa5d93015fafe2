import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairdice.data import behavior_table, rollout_tabular
from fairdice.envs.groupfair import (
    HORIZON,
    N_GROUPS,
    N_OPTIONS,
    GroupFairState,
    advantage,
    concentration,
    collect_groupfair,
    draw_options,
    group_sizes,
    groupfair_fixed_membership,
    groupfair_reset,
    groupfair_step,
    membership_counts,
    reference_policy,
    rollout_groupfair,
)
from fairdice.envs.tabular import (
    FOUR_ROOMS_GOALS,
    FOUR_ROOMS_START,
    TabularMOMDP,
    build_four_rooms,
    generate_random_momdp,
    greedy_policy,
    scalarized_value_iteration,
)


class TestFourRooms:
    env = build_four_rooms()

    def test_shape(self):
        assert self.env.n_actions == 4 and self.env.n_objectives == 3
        # 104 free cells in the classic 11x11 layout
        assert self.env.n_states == 104

    def test_goal_rewards_are_basis_vectors(self):
        cells = self.env.info["cells"]
        goal_rows = [self.env.arrival_rewards[cells.index(g)] for g in FOUR_ROOMS_GOALS]
        assert np.array_equal(np.array(goal_rows), np.eye(3))
        nongoal = np.ones(self.env.n_states, bool)
        nongoal[[cells.index(g) for g in FOUR_ROOMS_GOALS]] = False
        assert np.all(self.env.arrival_rewards[nongoal] == 0)

    def test_rows_stochastic(self):
        assert np.max(np.abs(self.env.transitions.sum(axis=2) - 1)) < 1e-9

    def test_start_is_top_left(self):
        cells = self.env.info["cells"]
        assert self.env.p0[cells.index(FOUR_ROOMS_START)] == 1.0

    def test_goals_absorbing_and_terminal(self):
        cells = self.env.info["cells"]
        for g in FOUR_ROOMS_GOALS:
            i = cells.index(g)
            assert self.env.terminal[i]
            assert np.all(self.env.transitions[i, :, i] == 1.0)

    def test_stochasticity(self):
        # interior cell away from walls: intended move gets 0.9 + 0.1/4
        cells = self.env.info["cells"]
        s = cells.index((2, 2))
        assert self.env.transitions[s, 1, cells.index((2, 3))] == pytest.approx(0.925)

    def test_uniform_rollouts_reach_every_goal(self):
        pi = behavior_table(self.env, "uniform")
        data = rollout_tabular(self.env, pi, 10_000, 500, np.random.default_rng(0))
        hits = data.trajectory_returns().sum(axis=0)
        assert np.all(hits > 0)


class TestRandomMomdp:
    def test_reproducible_bytes(self):
        a = generate_random_momdp(rng=np.random.default_rng(5))
        b = generate_random_momdp(rng=np.random.default_rng(5))
        assert a.transitions.tobytes() == b.transitions.tobytes()
        assert a.arrival_rewards.tobytes() == b.arrival_rewards.tobytes()

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_invariants(self, seed):
        env = generate_random_momdp(n_states=20, rng=np.random.default_rng(seed))
        assert env.n_objectives == 3
        assert np.max(np.abs(env.transitions.sum(axis=2) - 1)) < 1e-9
        assert abs(env.p0.sum() - 1) < 1e-9
        goals = env.info["goals"]
        assert env.terminal.sum() == 3 and 0 not in goals
        for k, g in enumerate(goals):
            assert np.all(env.transitions[g, :, g] == 1.0)
            assert np.array_equal(env.arrival_rewards[g], np.eye(3)[k])
        # every non-goal (s, a) has exactly `sparsity` successors
        live = ~env.terminal
        assert np.all((env.transitions[live] > 0).sum(axis=2) <= 4)

    @pytest.mark.parametrize("kw", [dict(n_goals=50), dict(sparsity=0), dict(sparsity=51), dict(n_actions=0)])
    def test_bad_parameters(self, kw):
        with pytest.raises(ValueError):
            generate_random_momdp(**kw)

    def test_validation(self):
        T = np.full((2, 1, 2), 0.6)
        with pytest.raises(ValueError):
            TabularMOMDP(T, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9, np.zeros(2, bool))


def three_state_chain():
    # s0 --a1--> s1 --a1--> s2 (goal, reward e1); a0 stays put
    T = np.zeros((3, 2, 3))
    T[0, 0, 0] = T[1, 0, 1] = 1.0
    T[0, 1, 1] = T[1, 1, 2] = 1.0
    T[2, :, 2] = 1.0
    R = np.zeros((3, 1))
    R[2, 0] = 1.0
    return TabularMOMDP(T, R, np.array([1.0, 0, 0]), 0.9, np.array([False, False, True]))


class TestOptimalityMix:
    def test_full_optimality_is_greedy(self):
        env = three_state_chain()
        Q, V = scalarized_value_iteration(env)
        assert V[0] == pytest.approx(0.9) and V[1] == pytest.approx(1.0)
        pi = behavior_table(env, "optimality", optimality=1.0)
        assert np.array_equal(pi, greedy_policy(Q))
        data = rollout_tabular(env, pi, 20, 10, np.random.default_rng(0))
        for tid in range(20):
            sel = data.traj_ids == tid
            assert data.states[sel].tolist() == [0, 1]
            assert data.actions[sel].tolist() == [1, 1]

    def test_half_mix(self):
        env = three_state_chain()
        pi = behavior_table(env, "optimality", optimality=0.5)
        assert np.allclose(pi[0], [0.25, 0.75])

    def test_unknown_behaviour(self):
        with pytest.raises(ValueError):
            behavior_table(three_state_chain(), "expert")


class TestGroupFair:
    def test_membership_sizes(self):
        m = groupfair_fixed_membership()
        assert group_sizes(m).tolist() == [69, 46, 63, 74, 48]
        assert m.shape == (100, 3)
        assert np.all(membership_counts(m).sum(axis=1) == 3)
        assert membership_counts(m).sum() == 300

    def test_membership_multiplicity(self):
        membership = np.array([[1, 1, 2]])
        opts = np.zeros((1, N_OPTIONS, N_GROUPS))
        opts[0, :] = [0.5, 0.1, 0.1, 0.1, 0.2]
        opts[0, 3] = [0.1, 0.5, 0.1, 0.1, 0.2]
        state = GroupFairState(membership, np.zeros((1, N_GROUPS)), opts)
        _, r = groupfair_step(state, np.array([3]), np.random.default_rng(0))
        assert r.shape == (1, 1) and r[0, 0] == pytest.approx(1.1)

    def test_equal_totals_give_unit_concentration(self):
        assert np.all(advantage(np.full((2, 5), 7.0)) == 0.0)
        assert np.all(concentration(np.full((2, 5), 7.0)) == 1.0)
        assert np.all(concentration(np.array([[1e3, 0, 0, 0, 0]])) > 0)
        t = np.random.default_rng(0).uniform(0, 100, size=(50, 5))
        assert np.allclose(concentration(t), 1 + advantage(t), atol=1e-15)

    def test_options_on_simplex(self):
        opts = draw_options(np.random.default_rng(1).uniform(0, 50, size=(4, 5)), np.random.default_rng(2))
        assert opts.shape == (4, 7, 5)
        assert np.allclose(opts.sum(-1), 1.0, atol=1e-12) and np.all(opts >= 0)

    @pytest.mark.parametrize("action", range(N_OPTIONS))
    def test_constant_policy_distributes_one_unit(self, action):
        rng = np.random.default_rng(action)
        state = groupfair_reset(3, rng)
        for _ in range(5):
            before = state.totals.sum(axis=1)
            state, _ = groupfair_step(state, action, rng)
            assert np.allclose(state.totals.sum(axis=1) - before, 1.0, atol=1e-12)

    def test_invalid_actions(self):
        rng = np.random.default_rng(0)
        state = groupfair_reset(2, rng)
        for bad in (7, -1, np.array([0.5, 1.0])):
            with pytest.raises(ValueError):
                groupfair_step(state, bad, rng)
        late = GroupFairState(state.membership, state.totals, state.options, HORIZON)
        with pytest.raises(ValueError):
            groupfair_step(late, 0, rng)

    def test_reference_policies(self):
        opts = np.full((7, 5), 0.2)
        for kind in ("biased", "util-optim", "fair"):
            assert reference_policy(kind, opts) == 0
        opts[2] = [0.6, 0.1, 0.1, 0.1, 0.1]
        assert reference_policy("biased", opts) == 2
        opts[4] = [0.1, 0.1, 0.1, 0.6, 0.1]
        assert reference_policy("util-optim", opts) == 4
        # uniform row 0 beats the skewed rows on sum of logs
        assert reference_policy("fair", opts) == 0
        with pytest.raises(ValueError):
            reference_policy("random", opts)
        assert 0 <= reference_policy("random", opts, np.random.default_rng(0)) < 7

    def test_biased_policy_compounds(self):
        rng = np.random.default_rng(3)
        state = groupfair_reset(100, rng)
        share = []
        for _ in range(200):
            state, _ = groupfair_step(state, reference_policy("biased", state.options), rng)
            share.append(np.mean(state.totals[:, 0] / state.totals.sum(axis=1)))
        # 10-step block means rise monotonically
        assert np.all(np.diff(np.reshape(share, (20, 10)).mean(axis=1)) > 0)

    def test_rollout_determinism_and_horizon(self):
        pol = lambda obs, rng: reference_policy("fair", obs.reshape(-1, 7, 5))
        a, _ = rollout_groupfair(pol, 4, np.random.default_rng(9), horizon=30)
        b, _ = rollout_groupfair(pol, 4, np.random.default_rng(9), horizon=30)
        assert np.array_equal(a, b)
        # each step splits one unit across groups, so the population gets
        # between the smallest and largest group size per step
        sizes = group_sizes(groupfair_fixed_membership())
        assert np.all(a.sum(axis=1) >= 30 * sizes.min()) and np.all(a.sum(axis=1) <= 30 * sizes.max())
        with pytest.raises(ValueError):
            rollout_groupfair(pol, 1, np.random.default_rng(0), horizon=HORIZON + 1)

    def test_collected_dataset_layout(self):
        d = collect_groupfair("random", 3, np.random.default_rng(4), horizon=HORIZON, seed=4)
        assert len(d) == 3 * HORIZON
        assert d.states.shape == (3 * HORIZON, 35) and d.rewards.shape == (3 * HORIZON, 100)
        assert d.dones.sum() == 3 and np.all(d.dones[HORIZON - 1::HORIZON])
        # next state of step t is the state of step t+1 within a trajectory
        assert np.array_equal(d.next_states[:HORIZON - 1], d.states[1:HORIZON])
        assert np.array_equal(d.initial_states[HORIZON + 5], d.states[HORIZON])
        e = collect_groupfair("random", 3, np.random.default_rng(4), horizon=HORIZON, seed=4)
        assert d.states.tobytes() == e.states.tobytes()
