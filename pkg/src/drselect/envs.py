"""Desk-scale environments with their concept banks."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from drselect.concepts import ConceptBank
from drselect.errors import ValidationError
from drselect.mdp import TabularMdp

LOOP4_ACTIONS = ("left", "stay", "right")
KEYDOOR_ACTIONS = ("move_right", "move_down", "move_left", "move_up", "pickup", "toggle")
CHAIN_ACTIONS = ("left", "stay", "right")


def build_loop4(n_distractors: int = 0, seed: int = 0) -> tuple[TabularMdp, ConceptBank]:
    """Four states on a ring (labelled 1..4, stored as 0..3); reward 1 at states 1 and 3.

    Concepts: ``c1`` is parity (label even), ``c2`` is divisibility by three.
    Optional distractors are random bit patterns drawn from ``seed``.
    """
    n = 4
    p = np.zeros((n, 3, n))
    for s in range(n):
        p[s, 0, (s - 1) % n] = 1.0
        p[s, 1, s] = 1.0
        p[s, 2, (s + 1) % n] = 1.0
    labels_1based = np.arange(1, n + 1)
    r = np.zeros((n, 3))
    r[np.isin(labels_1based, (1, 3))] = 1.0
    mdp = TabularMdp(p, r, 0.9, np.full(n, 0.25))

    rows = [(labels_1based % 2 == 0), (labels_1based % 3 == 0)]
    names = ["c1: s mod 2 = 0", "c2: s mod 3 = 0"]
    rng = np.random.default_rng(seed)
    for i in range(n_distractors):
        rows.append(rng.integers(0, 2, size=n).astype(bool))
        names.append(f"distractor {i}")
    return mdp, ConceptBank(np.array(rows, dtype=np.uint8), tuple(names))


@dataclass(frozen=True)
class KeyDoorLayout:
    width: int
    height: int

    @property
    def wall_x(self) -> int:
        return self.width // 2

    @property
    def door(self) -> tuple[int, int]:
        return (self.wall_x, self.height // 2)

    @property
    def key(self) -> tuple[int, int]:
        return (0, 0)

    @property
    def goal(self) -> tuple[int, int]:
        return (self.width - 1, self.height - 1)

    def blocked(self, x: int, y: int, has_key: int, door_open: int) -> bool:
        if not (0 <= x < self.width and 0 <= y < self.height):
            return True
        if (x, y) == self.door:
            return not door_open
        if x == self.wall_x:
            return True
        return (x, y) == self.key and not has_key


# direction index -> (dx, dy); y grows downward
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))
_DIR_NAMES = ("right", "down", "left", "up")


def build_keydoor(width: int = 5, height: int = 5, slip: float = 0.1) -> tuple[TabularMdp, ConceptBank]:
    """Tabular door-key world.

    A wall column splits the grid; its locked door opens with ``toggle`` once
    the key (top-left cell) has been picked up. Entering the bottom-right goal
    pays 1 and ends the episode; the discount is 0.95. Episodes start in the
    left room, facing any direction, without the key.

    Concept groups, in bank order: x-position thresholds, y-position
    thresholds, the four facing directions, has-key, door-open, and obstacle
    indicators for the four neighbouring cells (right, left, down, up).
    """
    if width < 3 or height < 3:
        raise ValidationError("keydoor needs width, height >= 3")
    if not 0.0 <= slip <= 1.0:
        raise ValidationError("slip must lie in [0, 1]")
    lay = KeyDoorLayout(width, height)

    starts = [
        (x, y, d, 0, 0)
        for x in range(lay.wall_x)
        for y in range(height)
        if (x, y) != lay.key
        for d in range(4)
    ]

    def step(state: tuple[int, int, int, int, int], a: int) -> tuple[tuple[int, int, int, int, int], float]:
        x, y, d, key, door = state
        if a < 4:
            # absolute move: face the direction, then advance if the cell is free
            dx, dy = _DIRS[a]
            fx, fy = x + dx, y + dy
            if lay.blocked(fx, fy, key, door):
                return (x, y, a, key, door), 0.0
            return (fx, fy, a, key, door), 1.0 if (fx, fy) == lay.goal else 0.0
        dx, dy = _DIRS[d]
        fx, fy = x + dx, y + dy
        if a == 4:
            if (fx, fy) == lay.key and not key:
                return (x, y, d, 1, door), 0.0
            return state, 0.0
        if (fx, fy) == lay.door and key and not door:
            return (x, y, d, key, 1), 0.0
        return state, 0.0

    def is_goal(state: tuple[int, ...]) -> bool:
        return (state[0], state[1]) == lay.goal

    index: dict[tuple[int, int, int, int, int], int] = {}
    queue: deque = deque()
    for s in starts:
        index[s] = len(index)
        queue.append(s)
    edges: list[tuple[int, int, int, float]] = []
    while queue:
        s = queue.popleft()
        if is_goal(s):
            continue
        for a in range(len(KEYDOOR_ACTIONS)):
            nxt, rew = step(s, a)
            if nxt not in index:
                index[nxt] = len(index)
                queue.append(nxt)
            edges.append((index[s], a, index[nxt], rew))

    n = len(index)
    states = sorted(index, key=index.get)
    p = np.zeros((n, len(KEYDOOR_ACTIONS), n))
    r = np.zeros((n, len(KEYDOOR_ACTIONS)))
    for s, a, t, rew in edges:
        p[s, a, t] = 1.0
        r[s, a] = rew
    terminals = tuple(i for i, s in enumerate(states) if is_goal(s))
    if slip > 0.0:
        # with probability ``slip`` a uniformly random action is executed instead
        p = (1.0 - slip) * p + slip * p.mean(axis=1, keepdims=True)
        r = (1.0 - slip) * r + slip * r.mean(axis=1, keepdims=True)
    for t in terminals:
        p[t, :, t] = 1.0
    mu = np.zeros(n)
    mu[[index[s] for s in starts]] = 1.0 / len(starts)
    mdp = TabularMdp(p, r, 0.95, mu, terminals)

    rows: list[np.ndarray] = []
    names: list[str] = []
    xs = np.array([s[0] for s in states])
    ys = np.array([s[1] for s in states])
    ds = np.array([s[2] for s in states])
    for t in range(width - 1):
        rows.append(xs > t)
        names.append(f"agent x > {t}")
    for t in range(height - 1):
        rows.append(ys > t)
        names.append(f"agent y > {t}")
    for d, name in enumerate(_DIR_NAMES):
        rows.append(ds == d)
        names.append(f"facing {name}")
    rows.append(np.array([s[3] == 1 for s in states]))
    names.append("has key")
    rows.append(np.array([s[4] == 1 for s in states]))
    names.append("door open")
    for (dx, dy), name in zip(((1, 0), (-1, 0), (0, 1), (0, -1)), ("right", "left", "down", "up")):
        rows.append(np.array([lay.blocked(s[0] + dx, s[1] + dy, s[3], s[4]) for s in states]))
        names.append(f"obstacle {name}")
    return mdp, ConceptBank(np.array(rows, dtype=np.uint8), tuple(names))


def build_chain(n: int = 8, gamma: float = 0.9) -> tuple[TabularMdp, ConceptBank]:
    """Noisy walk on a line; reward 1 inside the central band.

    Moves succeed with probability 0.8, otherwise the agent stays (0.1) or
    slips the other way (0.1); walls clip at both ends. Concepts are the
    thresholds ``s > t`` for every boundary t.
    """
    if n < 4:
        raise ValidationError("chain needs n >= 4")
    p = np.zeros((n, 3, n))
    for s in range(n):
        lo, hi = max(s - 1, 0), min(s + 1, n - 1)
        p[s, 1, s] = 1.0
        p[s, 0, lo] += 0.8
        p[s, 0, s] += 0.1
        p[s, 0, hi] += 0.1
        p[s, 2, hi] += 0.8
        p[s, 2, s] += 0.1
        p[s, 2, lo] += 0.1
    band = np.zeros(n, dtype=bool)
    band[n // 4 : n - n // 4] = True
    r = np.zeros((n, 3))
    r[band] = 1.0
    mdp = TabularMdp(p, r, gamma, np.full(n, 1.0 / n))
    idx = np.arange(n)
    rows = np.array([idx > t for t in range(n - 1)], dtype=np.uint8)
    return mdp, ConceptBank(rows, tuple(f"s > {t}" for t in range(n - 1)))
