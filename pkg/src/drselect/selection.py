"""Concept selection: baselines, exact DRS / DRS-log branch-and-bound, and an exhaustive oracle.

DRS searches only over the concept indicator vector x. Once x is fixed, the
best pair-separation indicators Y are determined: a pair is separated iff a
selected concept tells its two abstract states apart. With the ordering
constraint enforced, Y can only be 1 on the longest D-descending prefix of
separated pairs. Both the objective and the action coverage are monotone in
x, so the value obtained by including every undecided concept is an
admissible bound.

Every solver returns exactly ``min(k, K)`` concepts; among optimal subsets the
lexicographically smallest sorted index tuple wins. Depth-first search that
tries "include" before "exclude" visits k-subsets in exactly that order, so a
subtree whose bound merely ties the incumbent can be discarded.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace
from typing import Any, Iterable, Sequence

import numpy as np

from drselect.concepts import (
    ConceptBank,
    ConceptSubset,
    QDistance,
    separation_probability,
)
from drselect.errors import OracleBudgetError, ValidationError
from drselect.mdp import PolicyTable, QTable, Rollout

DEFAULT_RHO = 0.75
RHO_STEP = 0.05
ORACLE_BUDGET = 10**6
_COVER_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SelectionInstance:
    """Aggregated pair data for one selection problem.

    ``floor`` is the largest distance inside a single full-bank class; those
    pairs can never be separated and bound every subset's abstraction error
    from below.
    """

    d_values: np.ndarray
    diff_masks: np.ndarray
    action_differs: np.ndarray
    n_concepts: int
    budget: int
    rho: float = DEFAULT_RHO
    accuracies: tuple[float, ...] | None = None
    floor: float = 0.0
    pairs: tuple[tuple[int, int], ...] = ()
    class_codes: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self) -> None:
        d = np.array(self.d_values, dtype=float).reshape(-1)
        masks = np.array(self.diff_masks, dtype=bool).reshape(len(d), int(self.n_concepts))
        act = np.array(self.action_differs, dtype=bool).reshape(-1)
        if len(act) != len(d):
            raise ValidationError("one action flag per pair is required")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValidationError("pair distances must be finite and nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError("rho must lie in [0, 1]")
        if self.budget < 0:
            raise ValidationError("budget must be nonnegative")
        acc = None
        if self.accuracies is not None:
            acc = tuple(float(a) for a in self.accuracies)
            if len(acc) != self.n_concepts or any(not 0.0 <= a <= 1.0 for a in acc):
                raise ValidationError("accuracies must give one value in [0, 1] per concept")
        for arr in (d, masks, act):
            arr.setflags(write=False)
        object.__setattr__(self, "d_values", d)
        object.__setattr__(self, "diff_masks", masks)
        object.__setattr__(self, "action_differs", act)
        object.__setattr__(self, "accuracies", acc)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "floor", float(self.floor))

    @property
    def n_pairs(self) -> int:
        return len(self.d_values)

    @property
    def n_action_pairs(self) -> int:
        return int(self.action_differs.sum())

    def with_distances(self, d_values: np.ndarray, floor: float | None = None) -> "SelectionInstance":
        return replace(self, d_values=np.asarray(d_values, dtype=float), floor=self.floor if floor is None else floor)

    def separated(self, subset: Iterable[int]) -> np.ndarray:
        cols = list(subset)
        if not cols:
            return np.zeros(self.n_pairs, dtype=bool)
        return self.diff_masks[:, cols].any(axis=1)

    def epsilon(self, subset: Iterable[int]) -> float:
        """Abstraction error of ``subset`` under perfect predictors."""
        unsep = ~self.separated(subset)
        worst = float(self.d_values[unsep].max()) if unsep.any() else 0.0
        return max(self.floor, worst)

    def to_dict(self) -> dict[str, Any]:
        return {
            "d_values": self.d_values.tolist(),
            "diff_masks": [np.flatnonzero(row).tolist() for row in self.diff_masks],
            "action_differs": self.action_differs.astype(int).tolist(),
            "n_concepts": self.n_concepts,
            "budget": self.budget,
            "rho": self.rho,
            "accuracies": None if self.accuracies is None else list(self.accuracies),
            "floor": self.floor,
            "pairs": [list(p) for p in self.pairs],
            "class_codes": [list(c) for c in self.class_codes],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SelectionInstance":
        k_total = int(data["n_concepts"])
        masks = np.zeros((len(data["d_values"]), k_total), dtype=bool)
        for i, cols in enumerate(data["diff_masks"]):
            masks[i, list(cols)] = True
        return cls(
            d_values=np.asarray(data["d_values"], dtype=float),
            diff_masks=masks,
            action_differs=np.asarray(data["action_differs"], dtype=bool),
            n_concepts=k_total,
            budget=int(data["budget"]),
            rho=float(data.get("rho", DEFAULT_RHO)),
            accuracies=None if data.get("accuracies") is None else tuple(data["accuracies"]),
            floor=float(data.get("floor", 0.0)),
            pairs=tuple(tuple(p) for p in data.get("pairs", ())),
            class_codes=tuple(tuple(c) for c in data.get("class_codes", ())),
        )


@dataclass(frozen=True)
class SelectionResult:
    subset: ConceptSubset
    objective: float
    epsilon: float
    rho_used: float
    optimality: str = "exact"
    algorithm: str = "drs"
    wall_time_ms: float = 0.0
    nodes: int = 0

    def to_record(self, labels: Sequence[str] | None = None) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "subset": list(self.subset.selected),
            "labels": [labels[j] for j in self.subset.selected] if labels is not None else None,
            "objective": self.objective,
            "epsilon": self.epsilon,
            "rho_used": self.rho_used,
            "optimality": self.optimality,
            "wall_time_ms": self.wall_time_ms,
        }


def build_instance(
    bank: ConceptBank,
    d: QDistance,
    pi: PolicyTable,
    observed: Iterable[int],
    k: int,
    rho: float = DEFAULT_RHO,
    *,
    accuracies: Sequence[float] | None = None,
    label_states: Iterable[int] | None = None,
) -> SelectionInstance:
    """Aggregate observed states by full-bank code and enumerate abstract-state pairs.

    A pair's distance is the largest ground distance across the two classes.
    Action flags come from ``label_states`` (default: the observed states): a
    pair differs when some labelled member of one class acts differently from
    some labelled member of the other.
    """
    obs = np.array(sorted(set(int(s) for s in observed)), dtype=np.int64)
    if len(obs) == 0:
        raise ValidationError("observed state set is empty")
    if k > bank.n_concepts:
        raise ValidationError(f"budget {k} exceeds bank size {bank.n_concepts}")
    codes, cls_of = np.unique(bank.values[:, obs].T, axis=0, return_inverse=True)
    cls_of = cls_of.reshape(-1)
    n_d = len(codes)

    order = np.argsort(cls_of, kind="stable")
    obs_sorted = obs[order]
    cls_sorted = cls_of[order]
    starts = np.flatnonzero(np.r_[True, cls_sorted[1:] != cls_sorted[:-1]])
    sub = d.d[np.ix_(obs_sorted, obs_sorted)]
    # block maxima: rows reduced per class, then columns per class
    row_max = np.maximum.reduceat(sub, starts, axis=0)
    block = np.maximum.reduceat(row_max, starts, axis=1)
    floor = float(np.max(np.diag(block))) if n_d else 0.0

    code_index = {tuple(c): i for i, c in enumerate(codes.tolist())}
    lab = obs if label_states is None else np.array(sorted(set(int(s) for s in label_states)), dtype=np.int64)
    actions_of: list[set[int]] = [set() for _ in range(n_d)]
    if len(lab):
        for s, code in zip(lab.tolist(), bank.values[:, lab].T.tolist()):
            c = code_index.get(tuple(code))
            if c is not None:
                actions_of[c].add(int(pi.action_of[s]))

    ia, ib = np.triu_indices(n_d, k=1)
    d_values = block[ia, ib]
    diff = codes[ia] != codes[ib]
    act = np.array(
        [
            bool(actions_of[a]) and bool(actions_of[b]) and not (len(actions_of[a]) == 1 and actions_of[a] == actions_of[b])
            for a, b in zip(ia.tolist(), ib.tolist())
        ],
        dtype=bool,
    )
    return SelectionInstance(
        d_values=d_values,
        diff_masks=diff,
        action_differs=act,
        n_concepts=bank.n_concepts,
        budget=k,
        rho=rho,
        accuracies=None if accuracies is None else tuple(accuracies),
        floor=floor,
        pairs=tuple(zip(ia.tolist(), ib.tolist())),
        class_codes=tuple(tuple(c) for c in codes.tolist()),
    )


# ---------------------------------------------------------------------------
# baselines


def select_random(K: int, k: int, seed: int) -> ConceptSubset:
    if not 0 <= k <= K:
        raise ValidationError("need 0 <= k <= K")
    rng = np.random.default_rng(seed)
    return ConceptSubset(tuple(rng.choice(K, size=k, replace=False).tolist()), k)


def _top_k(scores: np.ndarray, k: int, descending: bool) -> ConceptSubset:
    keyed = sorted(range(len(scores)), key=lambda j: (-scores[j] if descending else scores[j], j))
    return ConceptSubset(tuple(keyed[:k]), k)


def variance_scores(bank: ConceptBank, roll: Rollout) -> np.ndarray:
    """p(1-p), p the visit-weighted activation frequency of each concept."""
    if len(roll) == 0:
        raise ValidationError("rollout is empty")
    freq = roll.visit_frequency()
    p = bank.values.astype(float) @ freq
    return p * (1.0 - p)


def select_variance(bank: ConceptBank, roll: Rollout, k: int) -> ConceptSubset:
    if not 0 <= k <= bank.n_concepts:
        raise ValidationError("need 0 <= k <= K")
    return _top_k(variance_scores(bank, roll), k, descending=True)


def greedy_scores(bank: ConceptBank, q: QTable, roll: Rollout) -> np.ndarray:
    """Sum over actions of the within-group Q spread on each side of every concept split.

    Spread is the population standard deviation over distinct visited states;
    an empty side contributes 0.
    """
    visited = np.array(roll.observed, dtype=np.int64)
    qv = q.q[visited]
    scores = np.zeros(bank.n_concepts)
    for j in range(bank.n_concepts):
        on = bank.values[j, visited].astype(bool)
        total = 0.0
        for side in (on, ~on):
            if side.any():
                total += float(qv[side].std(axis=0).sum())
        scores[j] = total
    return scores


def select_greedy(bank: ConceptBank, q: QTable, roll: Rollout, k: int) -> ConceptSubset:
    """The k concepts whose split leaves the least within-group Q spread."""
    if not 0 <= k <= bank.n_concepts:
        raise ValidationError("need 0 <= k <= K")
    return _top_k(greedy_scores(bank, q, roll), k, descending=False)


# ---------------------------------------------------------------------------
# exact solvers


class _Model:
    """Per-pair state after including some concepts, and how it maps to Y."""

    def __init__(self, inst: SelectionInstance) -> None:
        self.inst = inst
        self.d = inst.d_values
        self.act = inst.action_differs.astype(float)
        self.need_base = float(inst.action_differs.sum())

    def objective(self, y: np.ndarray) -> float:
        return float(self.d @ (1.0 - y))

    def coverage(self, y: np.ndarray) -> float:
        return float(self.act @ y)


class _Deterministic(_Model):
    def __init__(self, inst: SelectionInstance, enforce_p1c: bool) -> None:
        super().__init__(inst)
        self.enforce_p1c = enforce_p1c
        cols = inst.diff_masks.T.copy()
        self.cols = cols
        suffix = np.zeros((inst.n_concepts + 1, inst.n_pairs), dtype=bool)
        for j in range(inst.n_concepts - 1, -1, -1):
            suffix[j] = suffix[j + 1] | cols[j]
        self.suffix = suffix
        if enforce_p1c:
            self.order = np.argsort(-self.d, kind="stable")
            d_sorted = self.d[self.order]
            # start position (in descending order) of each pair's D level
            self.level_start = np.searchsorted(-d_sorted, -d_sorted, side="left")

    def start(self) -> np.ndarray:
        return np.zeros(self.inst.n_pairs, dtype=bool)

    def include(self, state: np.ndarray, j: int) -> np.ndarray:
        return state | self.cols[j]

    def with_suffix(self, state: np.ndarray, j: int) -> np.ndarray:
        return state | self.suffix[j]

    def from_subset(self, subset: Sequence[int]) -> np.ndarray:
        return self.inst.separated(subset)

    def y_of(self, state: np.ndarray) -> np.ndarray:
        if not self.enforce_p1c:
            return state.astype(float)
        sep_sorted = state[self.order]
        unsep = np.flatnonzero(~sep_sorted)
        y = np.zeros(self.inst.n_pairs)
        prefix = len(sep_sorted) if len(unsep) == 0 else int(self.level_start[unsep[0]])
        y[self.order[:prefix]] = 1.0
        return y


class _Stochastic(_Model):
    """Residual merge probability per pair: prod over selected separating concepts of (1 - p_j)."""

    def __init__(self, inst: SelectionInstance) -> None:
        super().__init__(inst)
        if inst.accuracies is None:
            raise ValidationError("DRS-log needs per-concept accuracies")
        p = np.array([separation_probability(a) for a in inst.accuracies])
        keep = 1.0 - p
        keep[p >= 1.0] = 0.0
        self.factors = np.where(inst.diff_masks.T, keep[:, None], 1.0)
        suffix = np.ones((inst.n_concepts + 1, inst.n_pairs))
        for j in range(inst.n_concepts - 1, -1, -1):
            suffix[j] = suffix[j + 1] * self.factors[j]
        self.suffix = suffix

    def start(self) -> np.ndarray:
        return np.ones(self.inst.n_pairs)

    def include(self, state: np.ndarray, j: int) -> np.ndarray:
        return state * self.factors[j]

    def with_suffix(self, state: np.ndarray, j: int) -> np.ndarray:
        return state * self.suffix[j]

    def from_subset(self, subset: Sequence[int]) -> np.ndarray:
        state = self.start()
        for j in sorted(subset):
            state = self.include(state, j)
        return state

    def y_of(self, state: np.ndarray) -> np.ndarray:
        return 1.0 - state


def _rho_schedule(rho: float) -> list[float]:
    steps = int(math.floor(rho / RHO_STEP + 1e-9))
    # first entry is rho itself; later ones are rounded to kill float drift
    out = [rho] + [round(rho - t * RHO_STEP, 10) for t in range(1, steps + 1)]
    if out[-1] > 0.0:
        out.append(0.0)
    return out


def _branch_and_bound(model: _Model, K: int, k: int, need: float) -> tuple[tuple[int, ...] | None, float, int]:
    best_obj = math.inf
    best: tuple[int, ...] | None = None
    nodes = 0
    chosen: list[int] = []

    def visit(j: int, state: np.ndarray) -> None:
        nonlocal best_obj, best, nodes
        nodes += 1
        if len(chosen) == k:
            y = model.y_of(state)
            if model.coverage(y) >= need - _COVER_TOL:
                obj = model.objective(y)
                if obj < best_obj:
                    best_obj, best = obj, tuple(chosen)
            return
        if K - j < k - len(chosen):
            return
        y_bound = model.y_of(model.with_suffix(state, j))
        if model.coverage(y_bound) < need - _COVER_TOL:
            return
        if model.objective(y_bound) >= best_obj:
            return
        chosen.append(j)
        visit(j + 1, model.include(state, j))
        chosen.pop()
        visit(j + 1, state)

    visit(0, model.start())
    return best, best_obj, nodes


def _solve(model: _Model, inst: SelectionInstance, algorithm: str, exhaustive: bool) -> SelectionResult:
    K = inst.n_concepts
    if inst.budget > K:
        raise ValidationError(f"budget {inst.budget} exceeds bank size {K}")
    k = inst.budget
    if exhaustive and math.comb(K, k) > ORACLE_BUDGET:
        raise OracleBudgetError(f"C({K}, {k}) = {math.comb(K, k)} subsets exceeds the oracle budget")
    t0 = time.perf_counter()
    total_nodes = 0
    for rho_used in _rho_schedule(inst.rho):
        need = rho_used * model.need_base
        if exhaustive:
            subset, obj, nodes = _enumerate(model, K, k, need)
        else:
            subset, obj, nodes = _branch_and_bound(model, K, k, need)
        total_nodes += nodes
        if subset is not None:
            break
    else:  # pragma: no cover - rho = 0 is always feasible
        raise RuntimeError("no feasible subset at rho = 0")
    elapsed = (time.perf_counter() - t0) * 1000.0
    return SelectionResult(
        subset=ConceptSubset(subset, k),
        objective=obj,
        epsilon=inst.epsilon(subset),
        rho_used=rho_used,
        optimality="exact" if rho_used >= inst.rho - 1e-12 else "fallback-infeasible",
        algorithm=algorithm,
        wall_time_ms=elapsed,
        nodes=total_nodes,
    )


def _enumerate(model: _Model, K: int, k: int, need: float) -> tuple[tuple[int, ...] | None, float, int]:
    best_obj = math.inf
    best = None
    count = 0
    for combo in itertools.combinations(range(K), k):
        count += 1
        y = model.y_of(model.from_subset(combo))
        if model.coverage(y) < need - _COVER_TOL:
            continue
        obj = model.objective(y)
        if obj < best_obj:
            best_obj, best = obj, combo
    return best, best_obj, count


def select_drs(inst: SelectionInstance, enforce_p1c: bool = False) -> SelectionResult:
    """Exact DRS by branch-and-bound over concept indicators.

    Infeasible coverage targets are relaxed in steps of 0.05 until a subset
    exists; the level actually met is reported as ``rho_used``.
    """
    name = "drs-p1c" if enforce_p1c else "drs"
    return _solve(_Deterministic(inst, enforce_p1c), inst, name, exhaustive=False)


def select_drs_log(inst: SelectionInstance) -> SelectionResult:
    """Exact DRS-log: pair separation is probabilistic with p_j = delta_j^2 + (1 - delta_j)^2.

    Minimizes sum_pairs D * prod_{selected j splitting the pair} (1 - p_j)
    subject to expected action-pair coverage of at least rho.
    """
    return _solve(_Stochastic(inst), inst, "drs-log", exhaustive=False)


def brute_force_select(inst: SelectionInstance, enforce_p1c: bool = False, stochastic: bool = False) -> SelectionResult:
    """Exhaustive oracle over all k-subsets for the same objective and constraints."""
    model: _Model = _Stochastic(inst) if stochastic else _Deterministic(inst, enforce_p1c)
    name = "brute-force-log" if stochastic else ("brute-force-p1c" if enforce_p1c else "brute-force")
    return _solve(model, inst, name, exhaustive=True)


def supervised_instance(
    examples: Sequence[tuple[Sequence[int], Any]], K: int, k: int, rho: float = 0.0
) -> SelectionInstance:
    """Hitting-set instance over label-differing example pairs (unit distance, all action-relevant)."""
    bits = np.array([list(b) for b, _ in examples], dtype=np.uint8).reshape(len(examples), K)
    labels = [lab for _, lab in examples]
    if len(set(labels)) < 2:
        raise ValidationError("need at least two distinct labels")
    pairs = [(i, j) for i, j in itertools.combinations(range(len(examples)), 2) if labels[i] != labels[j]]
    ia = np.array([p[0] for p in pairs], dtype=np.int64)
    ib = np.array([p[1] for p in pairs], dtype=np.int64)
    return SelectionInstance(
        d_values=np.ones(len(pairs)),
        diff_masks=bits[ia] != bits[ib],
        action_differs=np.ones(len(pairs), dtype=bool),
        n_concepts=K,
        budget=k,
        rho=rho,
        pairs=tuple(pairs),
    )


def select_drs_supervised(
    examples: Sequence[tuple[Sequence[int], Any]], K: int, k: int, rho: float = 0.0
) -> SelectionResult:
    result = select_drs(supervised_instance(examples, K, k, rho))
    return replace(result, algorithm="drs-supervised")
