"""Experiment configs, the select / train / evaluate pipeline, sweeps, and result files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from drselect.abstraction import abstract_policy_for, bound_check, lift
from drselect.concepts import (
    ConceptBank,
    ConceptSubset,
    NoiseSpec,
    abstraction_error,
    apply_noise,
    build_abstraction_index,
    q_distance,
    round_half_up,
    sample_flip_sets,
)
from drselect.envs import build_chain, build_keydoor, build_loop4
from drselect.errors import InfeasibleError, ValidationError
from drselect.intervention import apply_intervention, evaluate_under_noise, plan_intervention
from drselect.mdp import QTable, TabularMdp, greedy_policy, policy_value, rollout, td_q, value_iteration
from drselect.selection import (
    DEFAULT_RHO,
    SelectionResult,
    build_instance,
    select_drs,
    select_drs_log,
    select_greedy,
    select_random,
    select_variance,
)

ENVIRONMENTS = ("loop4", "keydoor", "chain")
ALGORITHMS = ("drs", "drs-p1c", "drs-log", "random", "variance", "greedy")
SWEEP_AXES = ("k", "accuracy", "alpha")
CSV_COLUMNS = (
    "env",
    "algorithm",
    "seed",
    "k",
    "rho_used",
    "epsilon",
    "raw_return",
    "normalized_return",
    "alpha",
    "return_post_intervention",
    "bound",
    "max_gap",
    "wall_time_ms",
)

# fallback normalization extremes: 0 and the largest discounted return achievable
DEFAULT_NORMALIZATION = {"loop4": (0.0, 10.0), "keydoor": (0.0, 1.0), "chain": (0.0, 10.0)}

# per-purpose stream tags for derived seeds
_S_ROLLOUT, _S_LABELS, _S_TD, _S_RANDOM, _S_FLIPS, _S_PLAN, _S_EVAL = range(7)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str = "loop4"
    env_params: dict[str, Any] = field(default_factory=dict)
    algorithms: tuple[str, ...] = ("drs",)
    k: int | float = 1
    rho: float = DEFAULT_RHO
    accuracy: float | tuple[float, ...] | None = None
    alphas: tuple[float, ...] = ()
    seeds: tuple[int, ...] = (0,)
    rollout_steps: int = 20_000
    pair_label_steps: int = 1_000
    max_episode_steps: int = 100
    q_estimate: str = "exact"
    td_steps: int = 50_000
    td_step_size: float = 0.1
    regime: str = "fixed"
    evaluation: str = "exact"
    episodes: int = 200
    reward_normalization: tuple[float, float] | None = None
    sweep: dict[str, tuple] = field(default_factory=dict)
    workers: int = 1
    record_timing: bool = False
    output: str | None = None

    def __post_init__(self) -> None:
        if self.environment not in ENVIRONMENTS:
            raise ValidationError(f"environment must be one of {ENVIRONMENTS}")
        algs = tuple(self.algorithms)
        bad = [a for a in algs if a not in ALGORITHMS]
        if bad:
            raise ValidationError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValidationError("seeds must be nonempty")
        if not 0.0 <= float(self.rho) <= 1.0:
            raise ValidationError("rho must lie in [0, 1]")
        if isinstance(self.k, bool) or not isinstance(self.k, (int, float)) or self.k < 0:
            raise ValidationError("k must be a nonnegative count or a fraction in (0, 1]")
        if isinstance(self.k, float) and not 0.0 < self.k <= 1.0:
            raise ValidationError("fractional k must lie in (0, 1]")
        acc = self.accuracy
        if isinstance(acc, (list, tuple)):
            acc = tuple(float(a) for a in acc)
            if any(not 0.0 <= a <= 1.0 for a in acc):
                raise ValidationError("accuracies must lie in [0, 1]")
        elif acc is not None:
            acc = float(acc)
            if not 0.0 <= acc <= 1.0:
                raise ValidationError("accuracy must lie in [0, 1]")
        alphas = tuple(float(a) for a in self.alphas)
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValidationError("alphas must lie in [0, 1]")
        norm = self.reward_normalization
        if norm is not None:
            norm = (float(norm[0]), float(norm[1]))
            if not norm[0] < norm[1]:
                raise ValidationError("reward normalization needs min < max")
        if self.q_estimate not in ("exact", "td"):
            raise ValidationError("q_estimate must be 'exact' or 'td'")
        if self.regime not in ("fixed", "bernoulli"):
            raise ValidationError("regime must be 'fixed' or 'bernoulli'")
        if self.evaluation not in ("exact", "monte-carlo"):
            raise ValidationError("evaluation must be 'exact' or 'monte-carlo'")
        if self.evaluation == "exact" and self.regime == "bernoulli":
            raise ValidationError("per-step noise needs monte-carlo evaluation")
        if min(self.rollout_steps, self.pair_label_steps, self.max_episode_steps, self.episodes) <= 0:
            raise ValidationError("step and episode budgets must be positive")
        sweep = {str(ax): tuple(v) for ax, v in dict(self.sweep).items()}
        if any(ax not in SWEEP_AXES for ax in sweep):
            raise ValidationError(f"sweep axes must be among {SWEEP_AXES}")
        if self.workers < 1:
            raise ValidationError("workers must be positive")
        object.__setattr__(self, "algorithms", algs)
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "accuracy", acc)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "reward_normalization", norm)
        object.__setattr__(self, "env_params", dict(self.env_params))
        object.__setattr__(self, "sweep", sweep)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key in ("algorithms", "seeds", "alphas"):
            out[key] = list(out[key])
        if isinstance(out["accuracy"], tuple):
            out["accuracy"] = list(out["accuracy"])
        if out["reward_normalization"] is not None:
            lo, hi = out["reward_normalization"]
            out["reward_normalization"] = {"min": lo, "max": hi}
        out["sweep"] = {ax: list(v) for ax, v in out["sweep"].items()}
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown config keys {sorted(extra)}")
        kw = dict(data)
        norm = kw.get("reward_normalization")
        if isinstance(norm, Mapping):
            kw["reward_normalization"] = (norm["min"], norm["max"])
        for key in ("algorithms", "seeds", "alphas"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if isinstance(kw.get("accuracy"), list):
            kw["accuracy"] = tuple(kw["accuracy"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    def config_hash(self) -> str:
        """Digest of every setting that can change results (the output path is excluded)."""
        body = self.to_dict()
        body.pop("output")
        body.pop("workers")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse config: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ValidationError("config must be a mapping")
    return ExperimentConfig.from_dict(data)


def build_id() -> str:
    """Short content hash of the package sources, in the style of a git revision."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def build_environment(cfg: ExperimentConfig) -> tuple[TabularMdp, ConceptBank]:
    params = dict(cfg.env_params)
    try:
        if cfg.environment == "loop4":
            return build_loop4(**params)
        if cfg.environment == "keydoor":
            return build_keydoor(**params)
        return build_chain(**params)
    except TypeError as exc:
        raise ValidationError(f"bad env_params for {cfg.environment}: {exc}") from exc


def resolve_k(k: int | float, n_concepts: int) -> int:
    """Absolute budgets pass through; fractions of K round half up, never below 1."""
    if isinstance(k, float):
        return max(1, round_half_up(k * n_concepts))
    if k > n_concepts:
        raise ValidationError(f"budget {k} exceeds bank size {n_concepts}")
    return int(k)


def resolve_accuracies(acc: float | tuple[float, ...] | None, n_concepts: int) -> tuple[float, ...] | None:
    if acc is None:
        return None
    if isinstance(acc, tuple):
        if len(acc) != n_concepts:
            raise ValidationError(f"{len(acc)} accuracies given for {n_concepts} concepts")
        return acc
    return (acc,) * n_concepts


def normalize(raw: float, lo: float, hi: float) -> float:
    return float(min(100.0, max(0.0, (raw - lo) / (hi - lo) * 100.0)))


@dataclass
class SeedContext:
    """Everything shared by the algorithms at one seed."""

    q_star: QTable
    q_used: QTable
    roll: Any
    instance: Any
    visit_freq: np.ndarray
    d_full: Any


def seed_context(cfg: ExperimentConfig, mdp: TabularMdp, bank: ConceptBank, k: int, acc, seed: int) -> SeedContext:
    q_star = value_iteration(mdp)
    pi_star = greedy_policy(q_star)
    if cfg.q_estimate == "td":
        q_used = td_q(
            mdp,
            pi_star,
            cfg.td_steps,
            cfg.td_step_size,
            derive_seed(seed, _S_TD),
            max_episode_steps=cfg.max_episode_steps,
        )
    else:
        q_used = q_star
    pi = greedy_policy(q_used)
    roll = rollout(mdp, pi, cfg.rollout_steps, derive_seed(seed, _S_ROLLOUT), max_episode_steps=cfg.max_episode_steps)
    labels = rollout(mdp, pi, cfg.pair_label_steps, derive_seed(seed, _S_LABELS), max_episode_steps=cfg.max_episode_steps)
    inst = build_instance(
        bank,
        q_distance(q_used),
        pi,
        roll.observed,
        k,
        cfg.rho,
        accuracies=acc,
        label_states=labels.observed,
    )
    return SeedContext(q_star, q_used, roll, inst, roll.visit_frequency(), q_distance(q_star))


def select_subset(alg: str, ctx: SeedContext, bank: ConceptBank, k: int, seed: int) -> SelectionResult:
    inst = ctx.instance
    if alg == "drs":
        return select_drs(inst)
    if alg == "drs-p1c":
        return select_drs(inst, enforce_p1c=True)
    if alg == "drs-log":
        if inst.accuracies is None:
            inst = replace(inst, accuracies=(1.0,) * bank.n_concepts)
        return select_drs_log(inst)
    if alg == "random":
        sub = select_random(bank.n_concepts, k, derive_seed(seed, _S_RANDOM))
    elif alg == "variance":
        sub = select_variance(bank, ctx.roll, k)
    else:
        sub = select_greedy(bank, ctx.q_used, ctx.roll, k)
    return SelectionResult(sub, float("nan"), inst.epsilon(sub.selected), float("nan"), "heuristic", alg)


def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if np.isnan(x) else repr(round(x, 10))
    return str(x)


def _evaluate(
    cfg: ExperimentConfig,
    mdp: TabularMdp,
    bank: ConceptBank,
    subset: ConceptSubset,
    ap,
    noise,
    seed: int,
) -> float:
    if noise is None:
        return policy_value(mdp, lift(ap, None, bank, subset))
    if cfg.evaluation == "exact":
        return policy_value(mdp, lift(ap, None, apply_noise(bank, noise), subset))
    horizon = None if mdp.gamma < 1.0 else cfg.max_episode_steps
    est = evaluate_under_noise(
        mdp, bank, subset, ap, noise, cfg.episodes, horizon, derive_seed(seed, _S_EVAL), regime=cfg.regime
    )
    return est.mean


def run_pipeline(cfg: ExperimentConfig, *, extra: Mapping[str, Any] | None = None) -> list[dict[str, Any]]:
    """One record per (algorithm, seed, alpha): select, build the weighted-q policy, evaluate.

    Without alphas each (algorithm, seed) yields a single record with an
    empty ``alpha``. Raw returns are expected discounted returns from the
    initial distribution under the configured predictors.
    """
    if not cfg.algorithms:
        return []
    mdp, bank = build_environment(cfg)
    k = resolve_k(cfg.k, bank.n_concepts)
    acc = resolve_accuracies(cfg.accuracy, bank.n_concepts)
    if cfg.reward_normalization is None:
        lo, hi = DEFAULT_NORMALIZATION[cfg.environment]
        norm_source = "default"
    else:
        lo, hi = cfg.reward_normalization
        norm_source = "config"
    chash = cfg.config_hash()
    bid = build_id()
    records: list[dict[str, Any]] = []
    for seed in cfg.seeds:
        ctx = seed_context(cfg, mdp, bank, k, acc, seed)
        noisy = acc is not None and any(a < 1.0 for a in acc)
        if noisy and cfg.regime == "fixed":
            noise = sample_flip_sets(acc, mdp.n_states, derive_seed(seed, _S_FLIPS))
        elif acc is not None:
            # per-step regime draws its flips during evaluation
            noise = NoiseSpec(acc, ((),) * bank.n_concepts, None, cfg.regime)
        else:
            noise = None
        for alg in cfg.algorithms:
            t0 = time.perf_counter()
            try:
                res = select_subset(alg, ctx, bank, k, seed)
                status = res.optimality
            except InfeasibleError as exc:
                res = SelectionResult(ConceptSubset((), k), float("nan"), float("nan"), float("nan"), "infeasible", alg)
                status = f"infeasible: {exc}"
            elapsed = (time.perf_counter() - t0) * 1000.0
            sub = res.subset
            ap, _ = abstract_policy_for(ctx.q_star, bank, sub, ctx.visit_freq)
            lifted = lift(ap, None, bank, sub)
            clean = policy_value(mdp, lifted)
            eps_full = abstraction_error(build_abstraction_index(bank, sub), ctx.d_full)
            report = bound_check(mdp, lifted, eps_full) if mdp.gamma < 1.0 else None
            pre = _evaluate(cfg, mdp, bank, sub, ap, noise, seed) if noise is not None else clean
            base = {
                "env": cfg.environment,
                "algorithm": alg,
                "seed": seed,
                "k": k,
                "rho_used": res.rho_used,
                "epsilon": res.epsilon,
                "raw_return": pre,
                "normalized_return": normalize(pre, lo, hi),
                "alpha": None,
                "return_post_intervention": None,
                "bound": None if report is None else report.bound,
                "max_gap": None if report is None else report.max_gap,
                "wall_time_ms": elapsed if cfg.record_timing else None,
                "subset": list(sub.selected),
                "labels": [bank.labels[j] for j in sub.selected],
                "optimality": status,
                "objective": res.objective,
                "epsilon_full": eps_full,
                "clean_return": clean,
                "bound_passed": None if report is None else report.passed,
                "normalization": {"min": lo, "max": hi, "source": norm_source},
                "noise": None if noise is None else {"kind": noise.kind, "regime": cfg.regime},
                "config_hash": chash,
                "build_id": bid,
            }
            if extra:
                base.update(extra)
            if not cfg.alphas:
                records.append(base)
                continue
            for i, alpha in enumerate(cfg.alphas):
                rec = dict(base)
                rec["alpha"] = alpha
                if noise is None:
                    post = clean
                else:
                    plan = plan_intervention(sub, alpha, derive_seed(seed, _S_PLAN, i))
                    post = _evaluate(cfg, mdp, bank, sub, ap, apply_intervention(noise, plan), seed)
                    rec["corrected"] = list(plan.corrected)
                rec["return_post_intervention"] = post
                rec["normalized_post_intervention"] = normalize(post, lo, hi)
                records.append(rec)
    return records


def _sweep_cell(cfg: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    if axis == "k":
        return replace(cfg, k=value)
    if axis == "accuracy":
        return replace(cfg, accuracy=value)
    return replace(cfg, alphas=(float(value),))


def run_sweep(cfg: ExperimentConfig, axis: str) -> list[dict[str, Any]]:
    """Run the pipeline once per value of ``cfg.sweep[axis]``; records keep grid order."""
    if axis not in SWEEP_AXES:
        raise ValidationError(f"axis must be one of {SWEEP_AXES}")
    values = cfg.sweep.get(axis)
    if not values:
        raise ValidationError(f"config has no sweep values for axis {axis!r}")
    cells = [_sweep_cell(cfg, axis, v) for v in values]

    def run(i: int) -> list[dict[str, Any]]:
        return run_pipeline(cells[i], extra={"sweep_axis": axis, "sweep_value": values[i]})

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        chunks = list(pool.map(run, range(len(cells))))
    return [rec for chunk in chunks for rec in chunk]


def records_to_csv(records: Sequence[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow([_fmt(rec.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def _json_safe(x: Any) -> Any:
    if isinstance(x, float) and np.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def records_to_json(records: Sequence[Mapping[str, Any]], cfg: ExperimentConfig | None = None) -> str:
    body = {"config": None if cfg is None else cfg.to_dict(), "records": [_json_safe(dict(r)) for r in records]}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_results(records: Sequence[Mapping[str, Any]], out_dir: str | Path, cfg: ExperimentConfig | None = None) -> tuple[Path, Path]:
    """Write ``results.csv`` (flat metrics) and ``records.json`` (full records) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "results.csv", out / "records.json"
    csv_path.write_text(records_to_csv(records))
    json_path.write_text(records_to_json(records, cfg))
    return csv_path, json_path
