"""Test-time concept intervention under noisy predictors."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from drselect.abstraction import AbstractPolicy, lift
from drselect.concepts import (
    ConceptBank,
    ConceptSubset,
    NoiseSpec,
    apply_noise,
    round_half_up,
)
from drselect.errors import ValidationError
from drselect.mdp import TabularMdp, TransitionSampler

REGIMES = ("fixed", "bernoulli")


@dataclass(frozen=True)
class InterventionPlan:
    alpha: float
    corrected: tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class ReturnEstimate:
    mean: float
    stderr: float
    episodes: int


def effective_horizon(gamma: float, precision: float = 1e-6) -> int:
    """Steps after which discounted tail weight drops below ``precision``."""
    if gamma <= 0.0:
        return 1
    if gamma >= 1.0:
        raise ValidationError("no finite effective horizon for gamma = 1; pass an explicit horizon")
    return max(1, math.ceil(math.log(precision) / math.log(gamma)))


def plan_intervention(subset: ConceptSubset, alpha: float, seed: int) -> InterventionPlan:
    """Correct a uniformly random round(alpha * |subset|) of the selected concepts."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must lie in [0, 1]")
    n = round_half_up(alpha * len(subset))
    rng = np.random.default_rng(seed)
    picked = rng.choice(np.asarray(subset.selected, dtype=np.int64), size=n, replace=False) if n else []
    return InterventionPlan(float(alpha), tuple(sorted(int(j) for j in picked)), seed)


def apply_intervention(noise: NoiseSpec, plan: InterventionPlan) -> NoiseSpec:
    """Intervened concepts become perfectly accurate; the rest keep their flips."""
    if any(j >= noise.n_concepts for j in plan.corrected):
        raise ValidationError("intervention refers to a concept outside the noise spec")
    acc = list(noise.accuracies)
    flips = list(noise.flip_sets)
    for j in plan.corrected:
        acc[j] = 1.0
        flips[j] = ()
    return replace(noise, accuracies=tuple(acc), flip_sets=tuple(flips))


def _episode_streams(seed: int, episode: int) -> tuple[np.random.Generator, np.random.Generator]:
    env = np.random.default_rng(np.random.SeedSequence([seed, episode, 0]))
    obs = np.random.default_rng(np.random.SeedSequence([seed, episode, 1]))
    return env, obs


def evaluate_under_noise(
    mdp: TabularMdp,
    bank: ConceptBank,
    subset: ConceptSubset,
    ap: AbstractPolicy,
    noise: NoiseSpec,
    episodes: int,
    horizon: int | None,
    seed: int,
    *,
    regime: str = "fixed",
) -> ReturnEstimate:
    """Monte-Carlo discounted return of the concept policy seen through noisy predictors.

    ``fixed``: the agent reads every selected concept through its flip set for
    the whole run. ``bernoulli``: at each step each selected concept is misread
    independently with probability ``1 - accuracy``. Environment and
    observation noise use separate per-episode streams derived from ``seed``,
    so runs that differ only in their predictors share environment randomness.
    """
    if episodes <= 0:
        raise ValidationError("episodes must be positive")
    if regime not in REGIMES:
        raise ValidationError(f"regime must be one of {REGIMES}")
    if noise.n_concepts != bank.n_concepts:
        raise ValidationError("noise spec does not match the bank")
    horizon = effective_horizon(mdp.gamma) if horizon is None else int(horizon)
    sampler = TransitionSampler(mdp)
    rew = mdp.reward.tolist()
    term = mdp.terminal_mask.tolist()
    gamma = mdp.gamma

    if regime == "fixed":
        act_table = lift(ap, None, apply_noise(bank, noise), subset).action_of.tolist()
    else:
        sel = list(subset.selected)
        true_codes = bank.values[sel].T.astype(np.uint8)
        err_p = np.array([1.0 - noise.accuracies[j] for j in sel])

    returns = np.empty(episodes)
    for ep in range(episodes):
        env_rng, obs_rng = _episode_streams(seed, ep)
        u_env = env_rng.random(horizon + 1).tolist()
        if regime == "bernoulli":
            flips = (obs_rng.random((horizon, len(sel))) < err_p).astype(np.uint8)
        s = sampler.start(u_env[0])
        g, disc = 0.0, 1.0
        for t in range(horizon):
            if regime == "fixed":
                a = act_table[s]
            else:
                code = tuple((true_codes[s] ^ flips[t]).tolist())
                a = ap.act(code)
            g += disc * rew[s][a]
            if term[s]:
                break
            disc *= gamma
            s = sampler.step(s, a, u_env[t + 1])
        returns[ep] = g
    mean = float(returns.mean())
    stderr = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return ReturnEstimate(mean, stderr, episodes)
