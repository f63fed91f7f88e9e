"""Abstract policies over concept codes, lifting to ground policies, and the suboptimality bound check."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from drselect.concepts import AbstractionIndex, ConceptBank, ConceptSubset, build_abstraction_index, codes_for
from drselect.errors import ValidationError
from drselect.mdp import PolicyTable, QTable, TabularMdp, policy_q, q_iteration, value_iteration

Code = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class AbstractPolicy:
    action_of_code: dict[Code, int]
    construction: str
    weights: dict[Code, np.ndarray]
    default_action: int = 0

    def act(self, code: Code) -> int:
        return self.action_of_code.get(code, self.default_action)


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    gamma: float
    bound: float
    max_gap: float
    passed: bool

    def to_record(self) -> dict[str, Any]:
        return asdict(self)


def class_weights(index: AbstractionIndex, visit_freq: np.ndarray | None = None) -> dict[Code, np.ndarray]:
    """Per-class member weights: visitation frequencies, or uniform for unvisited classes."""
    out: dict[Code, np.ndarray] = {}
    for code, members in zip(index.codes, index.classes):
        w = np.zeros(len(members)) if visit_freq is None else np.asarray(visit_freq, dtype=float)[list(members)]
        if w.sum() <= 0:
            w = np.ones(len(members))
        out[code] = w / w.sum()
    return out


def _check_weights(index: AbstractionIndex, weights: Mapping[Code, np.ndarray]) -> None:
    for code, members in zip(index.codes, index.classes):
        w = weights.get(code)
        if w is None or len(w) != len(members):
            raise ValidationError(f"missing or misshaped weights for class {code}")
        if np.any(np.asarray(w) < 0) or abs(float(np.sum(w)) - 1.0) > 1e-9:
            raise ValidationError(f"weights for class {code} must be a probability vector")


def weighted_q_policy(
    q_star: QTable, index: AbstractionIndex, weights: Mapping[Code, np.ndarray] | None = None
) -> AbstractPolicy:
    """Per class, the action maximizing the weighted average of Q* over its members."""
    if q_star.source != "exact":
        raise ValidationError("weighted-q construction needs an exact Q*")
    weights = class_weights(index) if weights is None else dict(weights)
    _check_weights(index, weights)
    actions = {}
    for code, members in zip(index.codes, index.classes):
        avg = np.asarray(weights[code]) @ q_star.q[list(members)]
        actions[code] = int(np.argmax(avg))
    return AbstractPolicy(actions, "weighted-q", weights)


def induced_mdp_policy(
    mdp: TabularMdp,
    index: AbstractionIndex,
    weights: Mapping[Code, np.ndarray] | None = None,
    tol: float = 1e-10,
) -> AbstractPolicy:
    """Solve the weight-aggregated abstract MDP and act greedily on its values.

    The index must cover every ground state so that all transitions land in a
    known class. Terminal members contribute no continuation mass.
    """
    if len(index.code_of) != mdp.n_states:
        raise ValidationError("induced-MDP construction needs an index over every state")
    weights = class_weights(index) if weights is None else dict(weights)
    _check_weights(index, weights)
    n_z = index.n_distinct
    member_of = np.empty(mdp.n_states, dtype=np.int64)
    for z, members in enumerate(index.classes):
        member_of[list(members)] = z
    # collapse next-state mass onto classes
    agg = np.zeros((mdp.n_states, mdp.n_actions, n_z))
    for z in range(n_z):
        agg[:, :, z] = mdp.continuation[:, :, member_of == z].sum(axis=2)
    r_bar = np.zeros((n_z, mdp.n_actions))
    p_bar = np.zeros((n_z, mdp.n_actions, n_z))
    for z, (code, members) in enumerate(zip(index.codes, index.classes)):
        w = np.asarray(weights[code])
        r_bar[z] = w @ mdp.reward[list(members)]
        p_bar[z] = np.einsum("m,mat->at", w, agg[list(members)])
    q_bar, _ = q_iteration(r_bar, p_bar, mdp.gamma, tol)
    actions = {code: int(np.argmax(q_bar[z])) for z, code in enumerate(index.codes)}
    return AbstractPolicy(actions, "induced-mdp", weights)


def lift(
    ap: AbstractPolicy,
    index: AbstractionIndex | None,
    bank: ConceptBank,
    subset: ConceptSubset,
) -> PolicyTable:
    """Ground policy s -> ap(code(s)); states with an unseen code take ``ap.default_action``.

    ``bank`` may be a perturbed bank, in which case the lift is the policy an
    agent with those predictors executes.
    """
    if index is not None and any(code not in ap.action_of_code for code in index.codes):
        raise ValidationError("abstract policy does not cover every indexed class")
    actions = []
    defaulted = []
    for s, code in enumerate(codes_for(bank, subset)):
        a = ap.action_of_code.get(code)
        if a is None:
            a = ap.default_action
            defaulted.append(s)
        actions.append(a)
    return PolicyTable(np.asarray(actions), tuple(defaulted), ap.construction)


def bound_check(mdp: TabularMdp, lifted: PolicyTable, epsilon: float, tol: float = 1e-8) -> BoundReport:
    """Compare max_s [V*(s) - V^lifted(s)] with 2 * epsilon / (1 - gamma)^2."""
    if lifted.construction == "induced-mdp":
        raise ValidationError("the suboptimality bound only covers weighted-q policies")
    if mdp.gamma >= 1.0:
        raise ValidationError("the bound needs gamma < 1")
    v_star = value_iteration(mdp, tol=1e-12).values()
    v_pi = policy_q(mdp, lifted).values(lifted)
    gap = float(np.max(v_star - v_pi))
    bound = 2.0 * epsilon / (1.0 - mdp.gamma) ** 2
    return BoundReport(float(epsilon), mdp.gamma, bound, gap, bool(gap <= bound + tol))


def abstract_policy_for(
    q_star: QTable,
    bank: ConceptBank,
    subset: ConceptSubset,
    visit_freq: np.ndarray | None = None,
    states: Sequence[int] | None = None,
) -> tuple[AbstractPolicy, AbstractionIndex]:
    """Convenience: index ``states`` (default all), weight by visits, build the weighted-q policy."""
    index = build_abstraction_index(bank, subset, states)
    return weighted_q_policy(q_star, index, class_weights(index, visit_freq)), index
