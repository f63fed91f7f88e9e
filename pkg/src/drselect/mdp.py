"""Finite MDPs: exact solvers, policy evaluation, rollouts and a tabular TD estimator."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from drselect.errors import ValidationError

_STOCHASTIC_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite discounted MDP.

    ``transition[s, a, t]`` is P(t | s, a) and ``reward[s, a]`` is R(s, a).
    States listed in ``terminals`` end the episode after their action is
    taken: their Q-values carry no continuation term and rollouts restart
    from ``initial_dist``. A discount of exactly 1 is only accepted for
    episodic MDPs (nonempty ``terminals``).
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    terminals: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        p = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        mu = np.array(self.initial_dist, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValidationError(f"transition must have shape (S, A, S), got {p.shape}")
        n_states, n_actions, _ = p.shape
        if r.shape != (n_states, n_actions):
            raise ValidationError(f"reward must have shape {(n_states, n_actions)}, got {r.shape}")
        if mu.shape != (n_states,):
            raise ValidationError(f"initial_dist must have shape ({n_states},), got {mu.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("transition probabilities must be finite and nonnegative")
        row_err = np.abs(p.sum(axis=2) - 1.0)
        if np.any(row_err > _STOCHASTIC_ATOL):
            s, a = np.unravel_index(np.argmax(row_err), row_err.shape)
            raise ValidationError(f"transition row ({s}, {a}) sums to {p[s, a].sum()!r}, not 1")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > _STOCHASTIC_ATOL:
            raise ValidationError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(r)):
            raise ValidationError("rewards must be finite")
        terminals = tuple(sorted({int(t) for t in self.terminals}))
        if any(t < 0 or t >= n_states for t in terminals):
            raise ValidationError("terminal state index out of range")
        gamma = float(self.gamma)
        if not 0.0 <= gamma <= 1.0:
            raise ValidationError(f"gamma must lie in [0, 1], got {gamma}")
        if gamma == 1.0 and not terminals:
            raise ValidationError("gamma = 1 requires an episodic MDP with terminal states")
        for arr in (p, r, mu):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", mu)
        object.__setattr__(self, "terminals", terminals)
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def continuation(self) -> np.ndarray:
        """Transition tensor with terminal rows zeroed (no bootstrapping past a terminal)."""
        c = self.transition.copy()
        if self.terminals:
            c[list(self.terminals)] = 0.0
        c.setflags(write=False)
        return c

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.n_states, dtype=bool)
        m[list(self.terminals)] = True
        return m

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "mu": self.initial_dist.tolist(),
            "rewards": self.reward.tolist(),
            "transitions": self.transition.tolist(),
            "terminals": list(self.terminals),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TabularMdp":
        mdp = cls(
            transition=np.asarray(data["transitions"], dtype=float),
            reward=np.asarray(data["rewards"], dtype=float),
            gamma=float(data["gamma"]),
            initial_dist=np.asarray(data["mu"], dtype=float),
            terminals=tuple(data.get("terminals", ())),
        )
        if mdp.n_states != int(data["n_states"]) or mdp.n_actions != int(data["n_actions"]):
            raise ValidationError("declared n_states/n_actions disagree with array shapes")
        return mdp


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Deterministic policy ``action_of[s]``.

    ``defaulted`` lists states whose action came from a fallback rather than
    a learned entry; ``construction`` records how the policy was obtained.
    """

    action_of: np.ndarray
    defaulted: tuple[int, ...] = ()
    construction: str = "direct"

    def __post_init__(self) -> None:
        a = np.array(self.action_of, dtype=np.int64)
        if a.ndim != 1:
            raise ValidationError("action_of must be one-dimensional")
        if np.any(a < 0):
            raise ValidationError("action indices must be nonnegative")
        a.setflags(write=False)
        object.__setattr__(self, "action_of", a)

    def __len__(self) -> int:
        return len(self.action_of)

    def __getitem__(self, s: int) -> int:
        return int(self.action_of[s])

    def check(self, mdp: TabularMdp) -> None:
        if len(self) != mdp.n_states:
            raise ValidationError("policy does not cover every state")
        if np.any(self.action_of >= mdp.n_actions):
            raise ValidationError("policy action index out of range")


@dataclass(frozen=True, eq=False)
class QTable:
    q: np.ndarray
    source: str = "exact"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        q = np.array(self.q, dtype=float)
        if q.ndim != 2:
            raise ValidationError("q must be a (states, actions) table")
        if not np.all(np.isfinite(q)):
            raise ValidationError("q entries must be finite")
        if self.source not in ("exact", "td-approximate"):
            raise ValidationError(f"unknown Q source {self.source!r}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def n_states(self) -> int:
        return self.q.shape[0]

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    def values(self, pi: PolicyTable | None = None) -> np.ndarray:
        """V(s) = Q(s, pi(s)); the greedy action when ``pi`` is omitted."""
        if pi is None:
            return self.q.max(axis=1)
        return self.q[np.arange(self.n_states), pi.action_of]


@dataclass(frozen=True, eq=False)
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    n_states: int
    seed: int

    @property
    def visited(self) -> list[tuple[int, int, float]]:
        return list(zip(self.states.tolist(), self.actions.tolist(), self.rewards.tolist()))

    @cached_property
    def visit_count(self) -> dict[int, int]:
        counts = np.bincount(self.states, minlength=self.n_states)
        return {int(s): int(c) for s, c in enumerate(counts) if c}

    def visit_frequency(self) -> np.ndarray:
        counts = np.bincount(self.states, minlength=self.n_states).astype(float)
        return counts / counts.sum()

    @property
    def observed(self) -> list[int]:
        return sorted(self.visit_count)

    def __len__(self) -> int:
        return len(self.states)


def bellman_residual(mdp: TabularMdp, q: np.ndarray, pi: PolicyTable | None = None) -> float:
    """Max-norm residual of the optimality (or, given ``pi``, evaluation) operator."""
    q = np.asarray(q, dtype=float)
    if pi is None:
        v = q.max(axis=1)
    else:
        v = q[np.arange(mdp.n_states), pi.action_of]
    tq = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.continuation, v)
    return float(np.max(np.abs(tq - q)))


def _evaluate_exact(mdp: TabularMdp, actions: np.ndarray) -> np.ndarray:
    idx = np.arange(mdp.n_states)
    c_pi = mdp.continuation[idx, actions, :]
    r_pi = mdp.reward[idx, actions]
    try:
        v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * c_pi, r_pi)
    except np.linalg.LinAlgError as exc:
        raise ValidationError("policy evaluation system is singular (policy never terminates)") from exc
    return mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.continuation, v)


def _argmax_first(q: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximizer
    return np.argmax(q, axis=1)


def q_iteration(
    reward: np.ndarray, continuation: np.ndarray, gamma: float, tol: float, max_iter: int = 1_000_000
) -> tuple[np.ndarray, int]:
    """Iterate Q <- R + gamma * C max_a Q until the next residual is at most ``tol``.

    ``continuation`` may be substochastic (terminal rows zeroed).
    """
    q = np.zeros(reward.shape)
    for it in range(1, max_iter + 1):
        q_new = reward + gamma * np.einsum("sat,t->sa", continuation, q.max(axis=1))
        diff = float(np.max(np.abs(q_new - q)))
        q = q_new
        if gamma * diff <= tol or diff == 0.0:
            return q, it
    raise RuntimeError(f"value iteration did not converge in {max_iter} iterations")


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> QTable:
    """Optimal action values by Q-iteration, polished by exact evaluation of the greedy policy.

    The polished table is kept only when its Bellman residual is no larger
    than the iterate's, so the returned residual is always at most ``tol``.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    q, it = q_iteration(mdp.reward, mdp.continuation, mdp.gamma, tol, max_iter)
    residual = bellman_residual(mdp, q)
    try:
        q_pol = _evaluate_exact(mdp, _argmax_first(q))
        res_pol = bellman_residual(mdp, q_pol)
        if res_pol <= residual:
            q, residual = q_pol, res_pol
    except ValidationError:
        pass
    return QTable(q, "exact", {"residual": residual, "iterations": it})


def greedy_policy(q: QTable | np.ndarray) -> PolicyTable:
    """Greedy policy; ties go to the smallest action index."""
    table = q.q if isinstance(q, QTable) else np.asarray(q, dtype=float)
    return PolicyTable(_argmax_first(table))


def policy_q(mdp: TabularMdp, pi: PolicyTable, tol: float = 1e-10) -> QTable:
    """Q^pi via a direct linear solve of the evaluation equations."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    pi.check(mdp)
    q = _evaluate_exact(mdp, pi.action_of)
    residual = bellman_residual(mdp, q, pi)
    if residual > tol:
        # ill-conditioned solve: refine by fixed-point sweeps
        for _ in range(100_000):
            v = q[np.arange(mdp.n_states), pi.action_of]
            q = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.continuation, v)
            residual = bellman_residual(mdp, q, pi)
            if residual <= tol:
                break
    return QTable(q, "exact", {"residual": residual})


def policy_value(mdp: TabularMdp, pi: PolicyTable, initial_dist: np.ndarray | None = None) -> float:
    """Expected return sum_s mu(s) V^pi(s)."""
    mu = mdp.initial_dist if initial_dist is None else np.asarray(initial_dist, dtype=float)
    v = policy_q(mdp, pi).values(pi)
    return float(mu @ v)


class TransitionSampler:
    """Inverse-CDF sampling of next states and start states with plain Python lists."""

    def __init__(self, mdp: TabularMdp) -> None:
        cum = np.cumsum(mdp.transition, axis=2)
        cum[..., -1] = 1.0
        self.cum = cum.tolist()
        mu_cum = np.cumsum(mdp.initial_dist)
        mu_cum[-1] = 1.0
        self.mu_cum = mu_cum.tolist()
        self.last = mdp.n_states - 1

    def start(self, u: float) -> int:
        return min(bisect.bisect_right(self.mu_cum, u), self.last)

    def step(self, s: int, a: int, u: float) -> int:
        return min(bisect.bisect_right(self.cum[s][a], u), self.last)


def rollout(
    mdp: TabularMdp,
    pi: PolicyTable,
    steps: int,
    seed: int,
    *,
    max_episode_steps: int | None = None,
) -> Rollout:
    """Sample a trajectory under ``pi``.

    Episodes start from ``initial_dist`` and restart after a terminal state
    is acted in, or after ``max_episode_steps`` steps when given.
    """
    if steps <= 0:
        raise ValidationError("steps must be positive")
    pi.check(mdp)
    rng = np.random.default_rng(seed)
    draws = rng.random(steps + 1).tolist()
    sampler = TransitionSampler(mdp)
    act = pi.action_of.tolist()
    rew = mdp.reward.tolist()
    term = mdp.terminal_mask.tolist()
    states = [0] * steps
    actions = [0] * steps
    rewards = [0.0] * steps
    s = sampler.start(draws[0])
    ep_len = 0
    for t in range(steps):
        a = act[s]
        states[t], actions[t], rewards[t] = s, a, rew[s][a]
        ep_len += 1
        u = draws[t + 1]
        if term[s] or (max_episode_steps is not None and ep_len >= max_episode_steps):
            s = sampler.start(u)
            ep_len = 0
        else:
            s = sampler.step(s, a, u)
    return Rollout(
        np.asarray(states, dtype=np.int64),
        np.asarray(actions, dtype=np.int64),
        np.asarray(rewards, dtype=float),
        mdp.n_states,
        seed,
    )


def td_q(
    mdp: TabularMdp,
    pi_behavior: PolicyTable,
    steps: int,
    step_size: float,
    seed: int,
    *,
    explore: float = 0.1,
    reference: QTable | None = None,
    max_episode_steps: int | None = None,
) -> QTable:
    """Tabular double-estimator TD control with a constant step size.

    Two tables are kept; each transition updates one of them (chosen by a fair
    coin) toward ``r + gamma * Q_other(s', argmax Q_self(s', .))``. Behaviour
    follows ``pi_behavior`` with probability ``1 - explore`` and a uniform
    action otherwise. The returned estimate is the average of the two tables.

    ``meta["unvisited"]`` lists (s, a) pairs never updated (left at 0). When
    ``reference`` is given, ``meta["max_error"]`` holds max |Q_hat - Q_ref|.
    """
    if steps <= 0:
        raise ValidationError("steps must be positive")
    if not 0.0 < step_size < 1.0:
        raise ValidationError("step_size must lie in (0, 1)")
    if not 0.0 <= explore <= 1.0:
        raise ValidationError("explore must lie in [0, 1]")
    pi_behavior.check(mdp)
    n_s, n_a = mdp.n_states, mdp.n_actions
    rng = np.random.default_rng(seed)
    u_explore = rng.random(steps).tolist()
    u_action = rng.integers(0, n_a, size=steps).tolist()
    u_next = rng.random(steps + 1).tolist()
    u_coin = rng.random(steps).tolist()

    sampler = TransitionSampler(mdp)
    act = pi_behavior.action_of.tolist()
    rew = mdp.reward.tolist()
    term = mdp.terminal_mask.tolist()
    gamma = mdp.gamma
    alpha = float(step_size)
    qa = [[0.0] * n_a for _ in range(n_s)]
    qb = [[0.0] * n_a for _ in range(n_s)]
    counts = [[0] * n_a for _ in range(n_s)]
    actions = range(n_a)

    s = sampler.start(u_next[0])
    ep_len = 0
    for t in range(steps):
        a = u_action[t] if u_explore[t] < explore else act[s]
        r = rew[s][a]
        counts[s][a] += 1
        ep_len += 1
        upd, other = (qa, qb) if u_coin[t] < 0.5 else (qb, qa)
        if term[s] or (max_episode_steps is not None and ep_len >= max_episode_steps):
            if term[s]:
                target = r
            else:
                s_next = sampler.step(s, a, u_next[t + 1])
                row = upd[s_next]
                best = max(actions, key=row.__getitem__)
                target = r + gamma * other[s_next][best]
            upd[s][a] += alpha * (target - upd[s][a])
            s = sampler.start(u_next[t + 1])
            ep_len = 0
            continue
        s_next = sampler.step(s, a, u_next[t + 1])
        row = upd[s_next]
        best = max(actions, key=row.__getitem__)
        target = r + gamma * other[s_next][best]
        upd[s][a] += alpha * (target - upd[s][a])
        s = s_next

    q = (np.asarray(qa) + np.asarray(qb)) / 2.0
    cnt = np.asarray(counts)
    meta: dict[str, Any] = {
        "steps": steps,
        "step_size": alpha,
        "seed": seed,
        "unvisited": [(int(i), int(j)) for i, j in zip(*np.nonzero(cnt == 0))],
    }
    if reference is not None:
        meta["max_error"] = float(np.max(np.abs(q - reference.q)))
    return QTable(q, "td-approximate", meta)


def enumerate_policies(mdp: TabularMdp) -> Sequence[PolicyTable]:
    """Every deterministic policy (only sensible for tiny MDPs)."""
    grids = np.stack(
        np.meshgrid(*[np.arange(mdp.n_actions)] * mdp.n_states, indexing="ij"), axis=-1
    ).reshape(-1, mdp.n_states)
    return [PolicyTable(row) for row in grids]
