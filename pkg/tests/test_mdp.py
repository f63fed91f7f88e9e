import json

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import mdps, random_mdp
from drselect.envs import build_chain, build_loop4
from drselect.errors import ValidationError
from drselect.mdp import (
    PolicyTable,
    QTable,
    TabularMdp,
    bellman_residual,
    enumerate_policies,
    greedy_policy,
    policy_q,
    policy_value,
    rollout,
    td_q,
    value_iteration,
)

LEFT, STAY, RIGHT = 0, 1, 2


def single_state(reward: float, gamma: float = 0.9) -> TabularMdp:
    return TabularMdp(np.ones((1, 1, 1)), np.array([[reward]]), gamma, np.ones(1))


# --- construction and validation


def test_rejects_non_stochastic_rows():
    p = np.ones((2, 1, 2)) * 0.5
    p[1, 0] = [0.5, 0.6]
    with pytest.raises(ValidationError):
        TabularMdp(p, np.zeros((2, 1)), 0.9, np.full(2, 0.5))


def test_rejects_negative_probability():
    p = np.array([[[1.5, -0.5]], [[0.0, 1.0]]])
    with pytest.raises(ValidationError):
        TabularMdp(p, np.zeros((2, 1)), 0.9, np.full(2, 0.5))


def test_rejects_bad_initial_dist():
    with pytest.raises(ValidationError):
        TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.9, np.array([0.5]))


def test_gamma_one_needs_terminals():
    with pytest.raises(ValidationError):
        single_state(1.0, gamma=1.0)
    mdp = TabularMdp(np.ones((1, 1, 1)), np.array([[2.0]]), 1.0, np.ones(1), terminals=(0,))
    assert value_iteration(mdp).q[0, 0] == pytest.approx(2.0)


def test_rejects_gamma_out_of_range():
    with pytest.raises(ValidationError):
        single_state(0.0, gamma=1.5)


def test_arrays_are_read_only(loop4):
    mdp, _ = loop4
    with pytest.raises(ValueError):
        mdp.transition[0, 0, 0] = 0.3


def test_serialization_round_trip(loop4):
    mdp, _ = loop4
    data = json.loads(json.dumps(mdp.to_dict()))
    assert set(data) == {"n_states", "n_actions", "gamma", "mu", "rewards", "transitions", "terminals"}
    back = TabularMdp.from_dict(data)
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma


def test_serialization_checks_declared_sizes(loop4):
    data = loop4[0].to_dict()
    data["n_states"] = 5
    with pytest.raises(ValidationError):
        TabularMdp.from_dict(data)


def test_policy_table_checks_range(loop4):
    mdp, _ = loop4
    with pytest.raises(ValidationError):
        PolicyTable(np.array([0, 1, 2, 3])).check(mdp)
    with pytest.raises(ValidationError):
        PolicyTable(np.array([0, 1])).check(mdp)


def test_qtable_rejects_non_finite():
    with pytest.raises(ValidationError):
        QTable(np.array([[np.nan]]), "exact")
    with pytest.raises(ValidationError):
        QTable(np.zeros((1, 1)), "guess")


# --- value iteration


def test_zero_reward_single_state():
    assert value_iteration(single_state(0.0)).q[0, 0] == 0.0


def test_unit_reward_geometric_series():
    tol = 1e-10
    q = value_iteration(single_state(1.0), tol=tol)
    assert abs(q.q[0, 0] - 10.0) <= tol


def test_loop4_optimal_values(loop4):
    q = value_iteration(loop4[0])
    assert q.source == "exact"
    np.testing.assert_allclose(q.values(), [10.0, 9.0, 10.0, 9.0], atol=1e-9)


@given(mdps())
@settings(max_examples=60, deadline=None)
def test_value_iteration_residual_within_tol(mdp):
    tol = 1e-9
    q = value_iteration(mdp, tol=tol)
    assert bellman_residual(mdp, q.q) <= tol
    assert q.meta["residual"] <= tol


def test_greedy_is_best_deterministic_policy():
    rng = np.random.default_rng(3)
    for _ in range(25):
        mdp = random_mdp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), float(rng.choice([0.5, 0.9])))
        best = policy_value(mdp, greedy_policy(value_iteration(mdp)))
        for pi in enumerate_policies(mdp):
            assert best >= policy_value(mdp, pi) - 1e-9


# --- greedy policy


def test_greedy_picks_max():
    assert greedy_policy(np.array([[0.0, 1.0]]))[0] == 1


def test_greedy_tie_breaks_to_smallest_index():
    assert greedy_policy(np.array([[1.0, 1.0]]))[0] == 0


def test_loop4_greedy_at_state_2_steps_left(loop4):
    pi = greedy_policy(value_iteration(loop4[0]))
    # left and right both lead to a rewarding state; the tie goes to "left"
    assert pi[1] == LEFT
    assert pi[0] == STAY and pi[2] == STAY


# --- policy evaluation


def test_policy_q_matches_optimal(loop4):
    mdp = loop4[0]
    tol = 1e-10
    q = value_iteration(mdp, tol=tol)
    qp = policy_q(mdp, greedy_policy(q), tol=tol)
    assert np.max(np.abs(qp.q - q.q)) <= 2 * tol


def test_policy_q_zero_reward():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 4, 2, 0.9)
    mdp = TabularMdp(mdp.transition, np.zeros((4, 2)), 0.9, mdp.initial_dist)
    assert np.all(policy_q(mdp, PolicyTable(np.array([0, 1, 0, 1]))).q == 0.0)


def test_always_stay(loop4):
    mdp = loop4[0]
    q = policy_q(mdp, PolicyTable(np.full(4, STAY)))
    assert q.q[0, STAY] == pytest.approx(10.0)
    assert q.q[1, STAY] == pytest.approx(0.0)


@given(mdps())
@settings(max_examples=40, deadline=None)
def test_policy_q_residual(mdp):
    pi = PolicyTable(np.arange(mdp.n_states) % mdp.n_actions)
    q = policy_q(mdp, pi, tol=1e-9)
    assert bellman_residual(mdp, q.q, pi) <= 1e-9


def test_policy_value_of_parity_policy(loop4):
    mdp = loop4[0]
    # stay on rewarding states, step left otherwise
    assert policy_value(mdp, PolicyTable(np.array([STAY, LEFT, STAY, LEFT]))) == pytest.approx(9.5)


def test_policy_value_zero_reward():
    mdp = single_state(0.0)
    assert policy_value(mdp, PolicyTable(np.zeros(1, dtype=int))) == 0.0


def test_policy_value_point_mass(loop4):
    mdp = loop4[0]
    pi = greedy_policy(value_iteration(mdp))
    v = policy_q(mdp, pi).values(pi)
    for s in range(4):
        mu = np.eye(4)[s]
        assert policy_value(mdp, pi, mu) == pytest.approx(v[s])


# --- td estimation


def test_td_rejects_zero_steps(loop4):
    mdp = loop4[0]
    with pytest.raises(ValidationError):
        td_q(mdp, PolicyTable(np.zeros(4, dtype=int)), 0, 0.1, 0)


def test_td_rejects_bad_step_size(loop4):
    mdp = loop4[0]
    with pytest.raises(ValidationError):
        td_q(mdp, PolicyTable(np.zeros(4, dtype=int)), 10, 1.0, 0)


@pytest.mark.slow
def test_td_converges_on_loop4(loop4):
    mdp = loop4[0]
    q = value_iteration(mdp)
    est = td_q(mdp, greedy_policy(q), 10**6, 0.1, 0, reference=q)
    assert est.source == "td-approximate"
    assert est.meta["max_error"] <= 0.1


def test_td_same_seed_identical(loop4):
    mdp = loop4[0]
    pi = greedy_policy(value_iteration(mdp))
    a = td_q(mdp, pi, 2000, 0.2, 7)
    b = td_q(mdp, pi, 2000, 0.2, 7)
    assert np.array_equal(a.q, b.q)
    assert not np.array_equal(a.q, td_q(mdp, pi, 2000, 0.2, 8).q)


def test_td_flags_unvisited_pairs():
    # state 1 is unreachable from state 0
    p = np.zeros((2, 1, 2))
    p[0, 0, 0] = p[1, 0, 1] = 1.0
    mdp = TabularMdp(p, np.ones((2, 1)), 0.5, np.array([1.0, 0.0]))
    est = td_q(mdp, PolicyTable(np.zeros(2, dtype=int)), 50, 0.5, 0)
    assert est.meta["unvisited"] == [(1, 0)]
    assert est.q[1, 0] == 0.0


def test_td_error_shrinks_with_steps():
    mdp, _ = build_chain(6)
    q = value_iteration(mdp)
    pi = greedy_policy(q)
    medians = []
    for steps in (10**3, 10**4, 10**5):
        errs = [
            td_q(mdp, pi, steps, 0.1, s, explore=0.3, reference=q, max_episode_steps=20).meta["max_error"]
            for s in range(6)
        ]
        medians.append(float(np.median(errs)))
    assert medians[0] > medians[1] > medians[2]


# --- rollouts


def test_rollout_single_state():
    roll = rollout(single_state(1.0), PolicyTable(np.zeros(1, dtype=int)), 37, 0)
    assert roll.visit_count == {0: 37}
    assert sum(roll.visit_count.values()) == len(roll)


def test_rollout_reproducible(loop4):
    mdp = loop4[0]
    pi = PolicyTable(np.array([0, 2, 1, 0]))
    a, b = rollout(mdp, pi, 500, 11), rollout(mdp, pi, 500, 11)
    assert a.visited == b.visited


def test_rollout_absorbs_into_reward_states(loop4):
    mdp = loop4[0]
    roll = rollout(mdp, greedy_policy(value_iteration(mdp)), 10**4, 0)
    tail = roll.states[10:]
    assert np.isin(tail, (0, 2)).mean() >= 0.99


def test_rollout_restarts_after_terminal():
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    mdp = TabularMdp(p, np.zeros((2, 1)), 0.9, np.array([1.0, 0.0]), terminals=(1,))
    roll = rollout(mdp, PolicyTable(np.zeros(2, dtype=int)), 6, 0)
    assert roll.states.tolist() == [0, 1, 0, 1, 0, 1]


def test_rollout_rejects_zero_steps(loop4):
    with pytest.raises(ValidationError):
        rollout(loop4[0], PolicyTable(np.zeros(4, dtype=int)), 0, 0)


def test_rollout_stochastic_frequencies():
    mdp, _ = build_chain(5)
    roll = rollout(mdp, PolicyTable(np.full(5, 1)), 20000, 3)
    # "stay" never moves, so the start state is drawn once: every state is the initial draw
    assert len(roll.observed) == 1
    roll = rollout(mdp, PolicyTable(np.full(5, 2)), 20000, 3, max_episode_steps=3)
    assert roll.visit_frequency().sum() == pytest.approx(1.0)
    assert set(roll.observed) == set(range(5))
