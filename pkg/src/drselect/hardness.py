"""Weighted maximum coverage as concept selection: the constructive reduction and its checks.

State layout of the constructed MDP: index 0 is the start state, and element
i (0-based) owns the pair ``left = 1 + 2i``, ``right = 2 + 2i``. Both pair
states are terminal, the discount is 1, and the episode has two decisions:
the irrelevant one at the start state and the rewarded one at the pair.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from drselect.abstraction import lift, weighted_q_policy
from drselect.concepts import ConceptBank, ConceptSubset, build_abstraction_index, q_distance
from drselect.errors import OracleBudgetError, ValidationError
from drselect.mdp import TabularMdp, policy_q, value_iteration
from drselect.selection import ORACLE_BUDGET, SelectionInstance, select_drs

A_LEFT, A_RIGHT = 0, 1


@dataclass(frozen=True)
class CoverageInstance:
    weights: tuple[float, ...]
    sets: tuple[frozenset[int], ...]
    k: int

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.weights)
        sets = tuple(frozenset(int(e) for e in s) for s in self.sets)
        if any(x < 0 for x in w):
            raise ValidationError("coverage weights must be nonnegative")
        if any(e < 0 or e >= len(w) for s in sets for e in s):
            raise ValidationError("set member outside the universe")
        if not 0 <= self.k <= len(sets):
            raise ValidationError("budget must lie in [0, number of sets]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sets", sets)

    @property
    def n_elements(self) -> int:
        return len(self.weights)

    @property
    def n_sets(self) -> int:
        return len(self.sets)

    def covered(self, chosen: Iterable[int]) -> frozenset[int]:
        out: set[int] = set()
        for j in chosen:
            out |= self.sets[j]
        return frozenset(out)

    def covered_weight(self, chosen: Iterable[int]) -> float:
        return float(sum(self.weights[e] for e in sorted(self.covered(chosen))))

    def to_dict(self) -> dict[str, Any]:
        return {"weights": list(self.weights), "sets": [sorted(s) for s in self.sets], "k": self.k}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CoverageInstance":
        return cls(tuple(data["weights"]), tuple(frozenset(s) for s in data["sets"]), int(data["k"]))


def left_state(i: int) -> int:
    return 1 + 2 * i


def right_state(i: int) -> int:
    return 2 + 2 * i


def coverage_to_mdp(inst: CoverageInstance) -> tuple[TabularMdp, ConceptBank]:
    n = inst.n_elements
    n_states = 1 + 2 * n
    p = np.zeros((n_states, 2, n_states))
    p[0, :, 1:] = 1.0 / (2 * n) if n else 0.0
    if n == 0:
        p[0, :, 0] = 1.0
    for s in range(1, n_states):
        p[s, :, s] = 1.0  # ignored: terminal
    r = np.zeros((n_states, 2))
    for i, w in enumerate(inst.weights):
        r[left_state(i), A_LEFT] = w
        r[right_state(i), A_RIGHT] = w
    mu = np.zeros(n_states)
    mu[0] = 1.0
    terminals = tuple(range(1, n_states)) if n else (0,)
    mdp = TabularMdp(p, r, 1.0, mu, terminals)

    values = np.zeros((inst.n_sets, n_states), dtype=np.uint8)
    for j, members in enumerate(inst.sets):
        for i in members:
            values[j, right_state(i)] = 1
    labels = tuple(f"S{j + 1}" for j in range(inst.n_sets))
    return mdp, ConceptBank(values, labels)


def expected_return(inst: CoverageInstance, subset: Iterable[int]) -> float:
    """Closed form: half the total weight plus half the covered weight."""
    chosen = list(subset)
    if any(j < 0 or j >= inst.n_sets for j in chosen):
        raise ValidationError("set index out of range")
    return 0.5 * sum(inst.weights) + 0.5 * inst.covered_weight(chosen)


def brute_force_coverage(inst: CoverageInstance) -> tuple[tuple[int, ...], float]:
    """Best k-subset of sets by covered weight (first in lexicographic order on ties)."""
    if math.comb(inst.n_sets, inst.k) > ORACLE_BUDGET:
        raise OracleBudgetError("coverage enumeration exceeds the oracle budget")
    best: tuple[int, ...] = ()
    best_w = -1.0
    for combo in itertools.combinations(range(inst.n_sets), inst.k):
        w = inst.covered_weight(combo)
        if w > best_w:
            best, best_w = combo, w
    return best, max(best_w, 0.0)


def pair_instance(inst: CoverageInstance, mdp: TabularMdp, bank: ConceptBank) -> SelectionInstance:
    """One selection pair per element: (left_i, right_i) with its exact Q-distance."""
    d = q_distance(value_iteration(mdp))
    n = inst.n_elements
    left = [left_state(i) for i in range(n)]
    right = [right_state(i) for i in range(n)]
    return SelectionInstance(
        d_values=d.d[left, right],
        diff_masks=(bank.values[:, left] != bank.values[:, right]).T,
        action_differs=np.ones(n, dtype=bool),
        n_concepts=bank.n_concepts,
        budget=inst.k,
        rho=0.0,
        pairs=tuple(zip(left, right)),
    )


def pair_return_sum(values: np.ndarray, n_elements: int) -> float:
    """Sum over elements of the mean return of the element's two pair states."""
    return float(sum(0.5 * (values[left_state(i)] + values[right_state(i)]) for i in range(n_elements)))


@dataclass(frozen=True)
class ReductionReport:
    selected_sets: tuple[int, ...]
    drs_covered_weight: float
    optimal_covered_weight: float
    coverage_matches: bool
    closed_form_return: float
    lifted_pair_return: float
    start_state_value: float
    return_matches: bool

    @property
    def passed(self) -> bool:
        return self.coverage_matches and self.return_matches


def lifted_returns(inst: CoverageInstance, mdp: TabularMdp, bank: ConceptBank, subset: Sequence[int]) -> tuple[float, float]:
    """(pair-return sum, start-state value) of the weighted-q concept policy for ``subset``."""
    q_star = value_iteration(mdp)
    sub = ConceptSubset.of(subset)
    index = build_abstraction_index(bank, sub)
    pi = lift(weighted_q_policy(q_star, index), index, bank, sub)
    v = policy_q(mdp, pi).values(pi)
    return pair_return_sum(v, inst.n_elements), float(v[0])


def reduction_equivalence(inst: CoverageInstance, tol: float = 1e-6) -> ReductionReport:
    """Solve the constructed selection problem with DRS and compare against coverage ground truth."""
    mdp, bank = coverage_to_mdp(inst)
    result = select_drs(pair_instance(inst, mdp, bank))
    chosen = result.subset.selected
    _, best_w = brute_force_coverage(inst)
    drs_w = inst.covered_weight(chosen)
    closed = expected_return(inst, chosen)
    pair_sum, v0 = lifted_returns(inst, mdp, bank, chosen)
    n = inst.n_elements
    return ReductionReport(
        selected_sets=chosen,
        drs_covered_weight=drs_w,
        optimal_covered_weight=best_w,
        coverage_matches=abs(drs_w - best_w) <= tol,
        closed_form_return=closed,
        lifted_pair_return=pair_sum,
        start_state_value=v0,
        return_matches=abs(closed - pair_sum) <= tol and (n == 0 or abs(n * v0 - closed) <= tol),
    )


def random_coverage_instance(n: int, m: int, k: int, rng: np.random.Generator) -> CoverageInstance:
    weights = tuple(np.round(rng.uniform(0.0, 10.0, size=n), 3).tolist())
    sets = tuple(frozenset(np.flatnonzero(rng.random(n) < 0.4).tolist()) for _ in range(m))
    return CoverageInstance(weights, sets, min(k, m))


def coverage_grid(max_n: int = 6, max_m: int = 6, max_k: int = 3, per_cell: int = 3, seed: int = 0) -> list[CoverageInstance]:
    """Every (n, m, k) cell of the grid, ``per_cell`` random instances each."""
    rng = np.random.default_rng(seed)
    out = []
    for n in range(1, max_n + 1):
        for m in range(1, max_m + 1):
            for k in range(1, min(max_k, m) + 1):
                out.extend(random_coverage_instance(n, m, k, rng) for _ in range(per_cell))
    return out
