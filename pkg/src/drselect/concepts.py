"""Concept banks, predictors (perfect and perturbed), abstraction indices and Q-distances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from drselect.errors import InfeasibleError, ValidationError
from drselect.mdp import QTable


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves upward; absorbs float noise like 1.9999999999999996."""
    return int(np.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True, eq=False)
class ConceptBank:
    """K boolean concepts evaluated on every state: ``values[j, s] = c_j(s)``."""

    values: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        v = np.array(self.values)
        if v.ndim != 2:
            raise ValidationError("concept values must be a (K, S) matrix")
        if not np.all((v == 0) | (v == 1)):
            raise ValidationError("concept values must be 0 or 1")
        v = v.astype(np.uint8)
        labels = tuple(str(x) for x in self.labels) or tuple(f"c{j + 1}" for j in range(v.shape[0]))
        if len(labels) != v.shape[0]:
            raise ValidationError(f"expected {v.shape[0]} labels, got {len(labels)}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", labels)

    @property
    def n_concepts(self) -> int:
        return self.values.shape[0]

    @property
    def n_states(self) -> int:
        return self.values.shape[1]

    def to_dict(self) -> dict[str, Any]:
        return {"labels": list(self.labels), "matrix": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConceptBank":
        return cls(np.asarray(data["matrix"]), tuple(data["labels"]))


@dataclass(frozen=True)
class ConceptSubset:
    selected: tuple[int, ...]
    budget: int

    def __post_init__(self) -> None:
        sel = tuple(int(j) for j in self.selected)
        if len(set(sel)) != len(sel):
            raise ValidationError("duplicate concept indices in subset")
        if any(j < 0 for j in sel):
            raise ValidationError("concept indices must be nonnegative")
        if len(sel) > self.budget:
            raise ValidationError(f"subset of size {len(sel)} exceeds budget {self.budget}")
        object.__setattr__(self, "selected", tuple(sorted(sel)))

    @classmethod
    def of(cls, indices: Iterable[int], budget: int | None = None) -> "ConceptSubset":
        sel = tuple(indices)
        return cls(sel, len(sel) if budget is None else budget)

    def check(self, bank: ConceptBank) -> None:
        if any(j >= bank.n_concepts for j in self.selected):
            raise ValidationError("subset index exceeds bank size")

    def __len__(self) -> int:
        return len(self.selected)

    def __iter__(self):
        return iter(self.selected)


@dataclass(frozen=True, eq=False)
class AbstractionIndex:
    """Partition of indexed states by their concept code.

    Classes are ordered by code so that downstream results are reproducible.
    """

    code_of: dict[int, tuple[int, ...]]
    classes: tuple[tuple[int, ...], ...]
    codes: tuple[tuple[int, ...], ...]

    @property
    def n_distinct(self) -> int:
        return len(self.classes)

    @property
    def states(self) -> list[int]:
        return sorted(self.code_of)

    def class_of(self, code: tuple[int, ...]) -> tuple[int, ...] | None:
        try:
            return self.classes[self.codes.index(code)]
        except ValueError:
            return None


@dataclass(frozen=True, eq=False)
class QDistance:
    d: np.ndarray

    def __post_init__(self) -> None:
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValidationError("distance matrix must be square")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def n_states(self) -> int:
        return self.d.shape[0]

    def argmax_pair(self) -> tuple[int, int]:
        """Maximal-distance pair (s, s') with s < s'; first in row-major order on ties."""
        upper = np.triu(self.d, k=1)
        flat = int(np.argmax(upper))
        s, t = divmod(flat, self.n_states)
        return s, t


@dataclass(frozen=True)
class NoiseSpec:
    """Per-concept flip sets: the predictor for concept i reads ``1 - c_i(s)`` on ``flip_sets[i]``.

    ``kind`` distinguishes sampled (``stochastic``) specs, whose flip-set sizes
    follow the accuracy rounding rule, from constructed ones.
    """

    accuracies: tuple[float, ...]
    flip_sets: tuple[tuple[int, ...], ...]
    seed: int | None = None
    kind: str = "stochastic"

    def __post_init__(self) -> None:
        acc = tuple(float(a) for a in self.accuracies)
        flips = tuple(tuple(sorted({int(s) for s in fs})) for fs in self.flip_sets)
        if len(acc) != len(flips):
            raise ValidationError("one flip set per accuracy is required")
        if any(not 0.0 <= a <= 1.0 for a in acc):
            raise ValidationError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "accuracies", acc)
        object.__setattr__(self, "flip_sets", flips)

    @property
    def n_concepts(self) -> int:
        return len(self.accuracies)

    @classmethod
    def perfect(cls, n_concepts: int) -> "NoiseSpec":
        return cls((1.0,) * n_concepts, ((),) * n_concepts, None, "perfect")

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracies": list(self.accuracies),
            "flip_sets": [list(fs) for fs in self.flip_sets],
            "seed": self.seed,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NoiseSpec":
        return cls(
            tuple(data["accuracies"]),
            tuple(tuple(fs) for fs in data["flip_sets"]),
            data.get("seed"),
            data.get("kind", "stochastic"),
        )


def q_distance(q: QTable | np.ndarray) -> QDistance:
    """D[s, s'] = max_a |Q(s, a) - Q(s', a)|."""
    table = q.q if isinstance(q, QTable) else np.asarray(q, dtype=float)
    d = np.zeros((table.shape[0], table.shape[0]))
    for a in range(table.shape[1]):
        col = table[:, a]
        np.maximum(d, np.abs(col[:, None] - col[None, :]), out=d)
    return QDistance(d)


def encode(bank: ConceptBank, subset: ConceptSubset, s: int) -> tuple[int, ...]:
    if not 0 <= s < bank.n_states:
        raise ValidationError(f"state {s} out of range")
    return tuple(int(x) for x in bank.values[list(subset.selected), s])


def codes_for(bank: ConceptBank, subset: ConceptSubset, states: Sequence[int] | None = None) -> list[tuple[int, ...]]:
    """Codes of many states at once."""
    cols = np.arange(bank.n_states) if states is None else np.asarray(list(states), dtype=np.int64)
    block = bank.values[np.ix_(list(subset.selected), cols)] if subset.selected else np.zeros((0, len(cols)), np.uint8)
    return [tuple(col) for col in block.T.tolist()]


def build_abstraction_index(
    bank: ConceptBank, subset: ConceptSubset, states: Iterable[int] | None = None
) -> AbstractionIndex:
    """Group ``states`` (all states by default) by their code under ``subset``."""
    subset.check(bank)
    st = sorted(set(range(bank.n_states) if states is None else (int(s) for s in states)))
    if not st:
        raise ValidationError("cannot index an empty state set")
    codes = codes_for(bank, subset, st)
    groups: dict[tuple[int, ...], list[int]] = {}
    for s, c in zip(st, codes):
        groups.setdefault(c, []).append(s)
    ordered = sorted(groups)
    return AbstractionIndex(
        code_of=dict(zip(st, codes)),
        classes=tuple(tuple(groups[c]) for c in ordered),
        codes=tuple(ordered),
    )


def abstraction_error(index: AbstractionIndex, d: QDistance) -> float:
    """Largest Q-distance between two states sharing a class (0 if every class is a singleton)."""
    eps = 0.0
    for members in index.classes:
        if len(members) > 1:
            m = list(members)
            eps = max(eps, float(d.d[np.ix_(m, m)].max()))
    return eps


def sample_flip_sets(accuracies: Sequence[float], n_states: int, seed: int) -> NoiseSpec:
    """Draw T_i uniformly without replacement with |T_i| = round((1 - delta_i) * n_states)."""
    acc = [float(a) for a in accuracies]
    if any(not 0.0 <= a <= 1.0 for a in acc):
        raise ValidationError("accuracies must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    flips = []
    for a in acc:
        size = min(n_states, round_half_up((1.0 - a) * n_states))
        flips.append(tuple(sorted(rng.choice(n_states, size=size, replace=False).tolist())))
    return NoiseSpec(tuple(acc), tuple(flips), seed, "stochastic")


def flip_mask(noise: NoiseSpec, n_states: int) -> np.ndarray:
    mask = np.zeros((noise.n_concepts, n_states), dtype=np.uint8)
    for i, fs in enumerate(noise.flip_sets):
        if fs:
            if max(fs) >= n_states:
                raise ValidationError("flip set refers to a state outside the bank")
            mask[i, list(fs)] = 1
    return mask


def apply_noise(bank: ConceptBank, noise: NoiseSpec) -> ConceptBank:
    """Bank seen through the perturbed predictors f^{T_i}."""
    if noise.n_concepts != bank.n_concepts:
        raise ValidationError(f"noise covers {noise.n_concepts} concepts, bank has {bank.n_concepts}")
    return ConceptBank(bank.values ^ flip_mask(noise, bank.n_states), bank.labels)


def adversarial_perturbation(
    bank: ConceptBank, subset: ConceptSubset, d: QDistance, accuracies: Sequence[float]
) -> NoiseSpec:
    """Single-state flips that make the predictor merge the maximal-distance pair.

    Every selected concept that tells the pair (s*, s'*) apart is flipped at
    s* only; all other flip sets stay empty.
    """
    subset.check(bank)
    acc = tuple(float(a) for a in accuracies)
    if len(acc) != bank.n_concepts:
        raise ValidationError("one accuracy per concept is required")
    s_star, t_star = d.argmax_pair()
    flips: list[tuple[int, ...]] = [()] * bank.n_concepts
    for j in subset.selected:
        if bank.values[j, s_star] != bank.values[j, t_star]:
            if acc[j] >= 1.0:
                raise InfeasibleError(f"concept {j} has accuracy 1 and cannot be flipped")
            flips[j] = (s_star,)
    return NoiseSpec(acc, tuple(flips), None, "adversarial")


def separation_probability(delta_j: float) -> float:
    """Probability that two noisy readings of a truly disagreeing concept still disagree."""
    if not 0.0 <= delta_j <= 1.0:
        raise ValidationError("accuracy must lie in [0, 1]")
    return delta_j**2 + (1.0 - delta_j) ** 2


def mc_separation_frequency(delta: float, n_samples: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate (and standard error) of disagreement preservation.

    Each sample reads c(s)=1 and c(s')=0 through predictors that are
    independently correct with probability ``delta``.
    """
    rng = np.random.default_rng(seed)
    correct_s = rng.random(n_samples) < delta
    correct_t = rng.random(n_samples) < delta
    read_s = np.where(correct_s, 1, 0)
    read_t = np.where(correct_t, 0, 1)
    hits = read_s != read_t
    p = float(hits.mean())
    return p, float(np.sqrt(max(p * (1 - p), 0.0) / n_samples))
