"""Experiment recipes, tabular ingestion and report writing.

Every recipe is a pure function of its config and seeds. ``run_recipe``
writes ``report.json`` plus recipe-specific CSVs; wall-clock metadata goes to
a separate ``run_meta.json`` so the report files stay byte-identical across
reruns.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .envgen import (
    Dataset,
    EnvWeights,
    FeatureSpec,
    SpecError,
    env_streams,
    gen_appendix_synth,
    gen_example1,
    homogeneous_spec,
    sample_dataset,
    sample_env_weights,
    sample_environments,
    sample_weight_matrix,
)
from .learn import (
    DivergenceError,
    Predictor,
    TrainConfig,
    conditional_risk_analytic,
    conditional_risk_samples,
    evaluate,
    mse_risk,
    suppression_ratios,
    train,
)
from .oracle import (
    WEIGHT_TOL,
    BoundError,
    bound_report,
    build_partition,
    compute_gamma,
    cardinality_ratio,
    exact_error_prob,
    normalized_error,
    oracle_frequency_mc,
    partition_cardinality_mc,
    ratio_bound_p,
    required_envs,
    success_lower_bound,
)

RECIPES = ("lemma1", "example1", "suppression", "theorem1-mc", "gamma-check", "tabular")
MODELS = ("erm", "irm", "pirm-part", "pirm-cond")


class ConfigError(ValueError):
    """Experiment configuration rejected before any work starts."""


# --------------------------------------------------------------------------- #
# Config
# --------------------------------------------------------------------------- #


@dataclass
class ExperimentConfig:
    recipe: str
    model: str | None = None
    seeds: tuple = (0, 1, 2)
    train: TrainConfig | None = None
    out_dir: str = "out"
    spec_path: str | None = None
    dataset_path: str | None = None
    ref: list | None = None
    delta: int | None = None
    feature_index: int = 1
    partition: list | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; choose from {', '.join(RECIPES)}")
        if self.model is not None and self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.delta is not None and self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if self.recipe == "tabular":
            if not self.dataset_path:
                raise ConfigError("tabular recipe needs dataset_path")
            if self.model in ("pirm-part", "pirm-cond") and not self.partition:
                raise ConfigError(f"model {self.model} needs a partition")
        if self.recipe in ("theorem1-mc", "gamma-check") and self.delta is None:
            raise ConfigError(f"{self.recipe} needs delta")
        if self.recipe in ("theorem1-mc", "gamma-check") and self.delta is not None and self.delta < 1:
            raise ConfigError("bounds need delta >= 1")
        if self.spec_path and not Path(self.spec_path).exists():
            raise ConfigError(f"spec file not found: {self.spec_path}")
        if self.dataset_path and not Path(self.dataset_path).exists():
            raise ConfigError(f"dataset not found: {self.dataset_path}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["seeds"] = list(self.seeds)
        d["train"] = None if self.train is None else self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "recipe" not in d:
            raise ConfigError("config needs a recipe")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def train_config(self, **defaults) -> TrainConfig:
        """Recipe defaults overlaid with the user's TrainConfig, if any."""
        if self.train is None:
            return TrainConfig(**defaults)
        return self.train


# --------------------------------------------------------------------------- #
# Tabular data
# --------------------------------------------------------------------------- #


@dataclass
class TabularEnvSet:
    environments: dict  # bin label -> Dataset, in bin order
    train_labels: tuple
    test_labels: tuple
    feature_names: tuple
    mean: np.ndarray
    std: np.ndarray
    y_mean: float
    y_std: float
    dropped_columns: tuple = ()

    def envs(self, labels: Sequence[str]) -> list[Dataset]:
        return [self.environments[lab] for lab in labels]

    def labels_in_range(self, lo: float, hi: float, train_only: bool = True) -> list[str]:
        pool = self.train_labels if train_only else tuple(self.environments)
        out = []
        for lab in pool:
            a, b = _parse_range(lab)
            if a >= lo and b <= hi:
                out.append(lab)
        return out


def _fmt_edge(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _parse_range(label: str) -> tuple[float, float]:
    lo, sep, hi = str(label).partition("-")
    if not sep:
        raise ConfigError(f"expected a range like 1930-1970, got {label!r}")
    try:
        return float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"expected a range like 1930-1970, got {label!r}") from None


def ingest_tabular(
    csv_path: str | Path,
    meta_column: str,
    bin_edges: Sequence[float],
    target_column: str,
    train_until: float | None = None,
    exclude_columns: Sequence[str] = (),
) -> TabularEnvSet:
    """Bin rows by ``meta_column`` into environments and normalise.

    Bins are half-open ``[lo, hi)`` except the last, which includes ``hi``.
    Bins ending at or before ``train_until`` are training bins (all bins when
    it is None). Non-numeric columns are dropped, then rows with any missing
    value. Feature and label statistics come from training rows only.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or (np.diff(edges) <= 0).any():
        raise ConfigError("bin_edges must be strictly increasing with at least two entries")
    df = pd.read_csv(csv_path, float_precision="round_trip")
    for col in (meta_column, target_column):
        if col not in df.columns:
            raise ConfigError(f"column {col!r} not in {csv_path}")
    numeric = [c for c in df.columns if pd.api.types.is_numeric_dtype(df[c]) and c not in exclude_columns]
    for col in (meta_column, target_column):
        if col not in numeric:
            raise ConfigError(f"column {col!r} must be numeric")
    df = df[numeric].dropna(axis=0, how="any")
    if df.empty:
        raise ConfigError("no rows left after dropping missing values")

    meta = df[meta_column].to_numpy(float)
    bin_idx = np.searchsorted(edges, meta, side="right") - 1
    bin_idx[meta == edges[-1]] = len(edges) - 2
    inside = (bin_idx >= 0) & (bin_idx < len(edges) - 1)
    if not inside.all():
        warnings.warn(f"{int((~inside).sum())} rows fall outside bin_edges and are dropped", stacklevel=2)
    df = df[inside]
    bin_idx = bin_idx[inside]
    if df.empty:
        raise ConfigError("no rows fall inside bin_edges")

    labels = [f"{_fmt_edge(edges[i])}-{_fmt_edge(edges[i + 1])}" for i in range(len(edges) - 1)]
    is_train = np.array([train_until is None or edges[i + 1] <= train_until for i in range(len(labels))])
    row_train = is_train[bin_idx]
    if not row_train.any():
        raise ConfigError("no training rows")

    features = [c for c in numeric if c != target_column]
    X = df[features].to_numpy(float)
    y = df[target_column].to_numpy(float)
    mu = X[row_train].mean(axis=0)
    sd = X[row_train].std(axis=0)
    const = sd == 0
    if const.any():
        dropped = [f for f, k in zip(features, const) if k]
        warnings.warn(f"dropping constant columns: {dropped}", stacklevel=2)
    else:
        dropped = []
    keep = ~const
    X = (X[:, keep] - mu[keep]) / sd[keep]
    y_mean, y_std = float(y[row_train].mean()), float(y[row_train].std())
    if y_std == 0:
        raise ConfigError("target is constant on the training bins")
    y = (y - y_mean) / y_std

    envs: dict = {}
    for i, lab in enumerate(labels):
        rows = bin_idx == i
        if not rows.any():
            warnings.warn(f"bin {lab} is empty and is dropped", stacklevel=2)
            continue
        envs[lab] = Dataset(X[rows], y[rows], lab)
    return TabularEnvSet(
        environments=envs,
        train_labels=tuple(lab for i, lab in enumerate(labels) if is_train[i] and lab in envs),
        test_labels=tuple(lab for i, lab in enumerate(labels) if not is_train[i] and lab in envs),
        feature_names=tuple(f for f, k in zip(features, keep) if k),
        mean=mu[keep],
        std=sd[keep],
        y_mean=y_mean,
        y_std=y_std,
        dropped_columns=tuple(dropped),
    )


# --------------------------------------------------------------------------- #
# Model variants and model selection
# --------------------------------------------------------------------------- #


def fit_model(
    model: str,
    config: TrainConfig,
    train_envs: Sequence[Dataset],
    partition: Sequence[Dataset] | None = None,
    record_every: int | None = None,
) -> Predictor:
    """Map a model name onto the (risk envs, penalty envs, lambda) triple."""
    train_envs = list(train_envs)
    part = train_envs if partition is None else list(partition)
    if model == "erm":
        return train(config.with_(lam=0.0), part, part, record_every)
    if model == "irm":
        return train(config, train_envs, train_envs, record_every)
    if model == "pirm-part":
        return train(config, part, part, record_every)
    if model == "pirm-cond":
        return train(config, train_envs, part, record_every)
    raise ConfigError(f"unknown model {model!r}")


def holdout_split(envs: Sequence[Dataset], frac: float = 0.2, seed=0) -> tuple[list[Dataset], list[Dataset]]:
    """Per-environment random split; every env keeps >= 1 row on each side."""
    if not 0 < frac < 1:
        raise ValueError("holdout fraction must lie in (0, 1)")
    fit, held = [], []
    for ds, rng in zip(envs, env_streams(seed, len(envs))):
        if ds.n < 2:
            raise ValueError(f"environment {ds.env_id!r} has too few rows to split")
        n_hold = min(max(1, round(frac * ds.n)), ds.n - 1)
        perm = rng.permutation(ds.n)
        held.append(ds.subset(np.sort(perm[:n_hold])))
        fit.append(ds.subset(np.sort(perm[n_hold:])))
    return fit, held


def train_domain_validation(
    candidates: Sequence[TrainConfig],
    envs: Sequence[Dataset],
    holdout: float = 0.2,
    seed=0,
    model: str = "irm",
    partition_idx: Sequence[int] | None = None,
) -> TrainConfig:
    """Pick the candidate with the lowest mean held-out MSE over training envs.

    Diverging or non-finite candidates are skipped; ties keep the earlier one.
    """
    if not candidates:
        raise ValueError("no candidate configurations")
    if len(candidates) == 1:
        return candidates[0]
    fit, held = holdout_split(envs, holdout, seed)
    part = None if partition_idx is None else [fit[i] for i in partition_idx]
    best, best_score = None, math.inf
    for cand in candidates:
        try:
            pred = fit_model(model, cand, fit, part)
        except DivergenceError:
            continue
        score = float(np.mean([mse_risk(pred, ds) for ds in held]))
        if math.isfinite(score) and score < best_score:
            best, best_score = cand, score
    if best is None:
        raise RuntimeError("every candidate diverged")
    return best


# --------------------------------------------------------------------------- #
# Aggregation helpers
# --------------------------------------------------------------------------- #


def seed_stats(values: Sequence[float]) -> dict:
    """Mean and sample std (ddof=1; 0 for one seed) with the raw values."""
    v = np.asarray(values, dtype=float)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "values": [float(x) for x in v]}


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


# --------------------------------------------------------------------------- #
# Recipes
# --------------------------------------------------------------------------- #

LEMMA1_SPEC = FeatureSpec([[1.0], [-1.0, 1.0], [0.5, -0.5]])


def lemma1_environments(spec: FeatureSpec, n_sampled: int, seed) -> list[EnvWeights]:
    """Identity env (only the invariant weight nonzero) followed by ``n_sampled`` pairwise distinct draws."""
    a1 = np.zeros(spec.c)
    a1[0] = spec.w_inv
    envs = [EnvWeights(a1, "identity")]
    rng = np.random.default_rng(seed)
    seen = {tuple(a1)}
    tries = 0
    while len(envs) < n_sampled + 1:
        w = sample_env_weights(spec, rng, env_id=f"e{len(envs)}")
        tries += 1
        if tries > 10_000:
            raise RuntimeError("spec has too few distinct environments")
        if tuple(w.w) in seen:
            continue
        seen.add(tuple(w.w))
        envs.append(w)
    return envs


def lemma1_run(seed: int, n: int = 10_000, n_sampled: int = 3, cfg: TrainConfig | None = None, spec=LEMMA1_SPEC) -> dict:
    cfg = cfg or TrainConfig(lam=1e4, iterations=4000, anneal_iters=2000, learning_rate=1e-3)
    cfg = cfg.with_(seed=seed)
    ss = np.random.SeedSequence(seed).spawn(2)
    envs = lemma1_environments(spec, n_sampled, ss[0])
    data = [sample_dataset(w, n, spec.sigma_y, g) for w, g in zip(envs, env_streams(ss[1], len(envs)))]
    irm = fit_model("irm", cfg, data)
    erm = fit_model("erm", cfg, data)
    noninv = float(np.max(np.abs(irm.phi[1:])))
    inv_err = float(abs(irm.phi[0] - spec.w_inv))
    return {
        "seed": seed,
        "env_weights": [_floats(w.w) for w in envs],
        "irm_phi": _floats(irm.phi),
        "erm_phi": _floats(erm.phi),
        "irm_max_noninvariant": noninv,
        "irm_invariant_error": inv_err,
        "erm_max_noninvariant": float(np.max(np.abs(erm.phi[1:]))),
        "pass": noninv < 0.05 and inv_err < 0.05,
    }


EXAMPLE1_SIGMAS = (0.2, 0.5, 1.0, 1.5)
EXAMPLE1_SIGNS = (1, -1, 1, -1)


def example1_run(
    seed: int,
    sigmas=EXAMPLE1_SIGMAS,
    signs=EXAMPLE1_SIGNS,
    n: int = 100_000,
    test_sigma: float = 1.0,
    cfg: TrainConfig | None = None,
) -> dict:
    """Train all four variants on three-feature drift data (``gen_example1``); the partition is the c(e)=+1 envs.

    The test env has c(e)=+1, so the conditional-risk gap between the
    invariant predictor [1,0,0] and [1,1,0] is ``test_sigma**2``.
    """
    if len(sigmas) != len(signs):
        raise ConfigError("one sign per sigma")
    cfg = cfg or TrainConfig(lam=1e3, iterations=6000, anneal_iters=2000, learning_rate=1e-2, init_scale=1.0, restarts=8)
    cfg = cfg.with_(seed=seed)
    gens = env_streams(seed, len(sigmas) + 1)
    data = [gen_example1(s, c, n, gens[i], env_id=f"s{s}c{c:+d}") for i, (s, c) in enumerate(zip(sigmas, signs))]
    part = [ds for ds, c in zip(data, signs) if c == 1]
    test = gen_example1(test_sigma, 1, n, gens[-1], env_id="test")
    out = {"seed": seed, "models": {}}
    for model in MODELS:
        pred = fit_model(model, cfg, data, part)
        out["models"][model] = {"phi": _floats(pred.phi), "test_mse": mse_risk(pred, test)}
    irm, pp = out["models"]["irm"], out["models"]["pirm-part"]
    gap = irm["test_mse"] - pp["test_mse"]
    out["analytic_gap"] = test_sigma**2
    out["irm_minus_pirm"] = gap
    out["pass"] = abs(irm["phi"][1]) < 0.1 and abs(pp["phi"][1] - 1.0) < 0.1 and gap >= 0.5 * test_sigma**2
    return out


SUPPRESSION_SIGMAS = (0.2, 1.0, 2.0, 5.0)


def suppression_run(
    seed: int,
    sigmas=SUPPRESSION_SIGMAS,
    n: int = 1000,
    dim: int = 10,
    cfg: TrainConfig | None = None,
    record_every: int = 500,
) -> dict:
    """Feature-suppression check: IRM on all envs vs P-IRM on the c(e)=1 pair.

    W1, W2 have standard-normal entries; c(e) puts two envs on each value,
    assigned by a seeded shuffle.
    """
    if len(sigmas) % 2:
        raise ConfigError("need an even number of environments")
    cfg = cfg or TrainConfig(lam=1e3, iterations=40_000, anneal_iters=4000, learning_rate=1e-2)
    cfg = cfg.with_(seed=seed)
    ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(ss[0])
    W1 = rng.standard_normal(dim)
    W2 = rng.standard_normal(dim)
    signs = rng.permutation([0] * (len(sigmas) // 2) + [1] * (len(sigmas) // 2))
    gens = env_streams(ss[1], len(sigmas))
    data = [
        gen_appendix_synth(s, int(c), W1, W2, n, gens[i], env_id=f"s{s}c{int(c)}")
        for i, (s, c) in enumerate(zip(sigmas, signs))
    ]
    part = [ds for ds, c in zip(data, signs) if c == 1]
    out = {"seed": seed, "c_assignment": [int(c) for c in signs], "models": {}, "trajectories": {}}
    for model in ("irm", "pirm-part"):
        pred = fit_model(model, cfg, data, part, record_every=record_every)
        r1, r2 = suppression_ratios(pred, W1, W2)
        out["models"][model] = {"ratio_block1": r1, "ratio_block2": r2}
        out["trajectories"][model] = [
            (int(row[0]),) + suppression_ratios(row[1:], W1, W2) for row in pred.history
        ]
    out["pass"] = out["models"]["irm"]["ratio_block2"] < 0.3 and out["models"]["pirm-part"]["ratio_block2"] > 0.7
    return out


def theorem1_mc(
    spec: FeatureSpec,
    ref: EnvWeights,
    delta: int,
    feature_index: int,
    t: int,
    trials: int,
    seed=0,
) -> dict:
    """Sample ``t`` training envs per trial and check the oracle's partition.

    A trial succeeds when every admitted environment shares the reference
    weight at ``feature_index``. The bound (p/(p+1))^m is evaluated at each
    trial's own partition size m (reference included).
    """
    alpha = cardinality_ratio(spec, feature_index)
    p = ratio_bound_p(spec.c, delta, alpha)
    rng = np.random.default_rng(seed)
    W = sample_weight_matrix(spec, (trials, t), rng)
    dist = np.count_nonzero(np.abs(W - ref.w) > WEIGHT_TOL, axis=-1)
    member = dist <= delta
    wrong = member & (np.abs(W[..., feature_index] - ref.w[feature_index]) > WEIGHT_TOL)
    success = ~wrong.any(axis=1)
    m = member.sum(axis=1) + 1
    lb = success_lower_bound(p, m.astype(float))
    p_e1, p_e2 = exact_error_prob(spec, delta, feature_index)
    n_members = int(member.sum())
    emp_member_err = float(wrong.sum() / n_members) if n_members else float("nan")
    se = math.sqrt(max(success.mean() * (1 - success.mean()), 1e-12) / trials)
    return {
        "p": p,
        "trials": trials,
        "t": t,
        "success_rate": float(success.mean()),
        "success_se": se,
        "mean_success_bound": float(lb.mean()),
        "mean_partition_size": float(m.mean()),
        "p_e1": p_e1,
        "p_e2": p_e2,
        "p_error_exact": normalized_error(p_e1, p_e2),
        "p_error_bound": 1.0 / (p + 1.0),
        "empirical_member_error": emp_member_err,
        "success_above_bound": bool(success.mean() >= lb.mean() - 3 * se),
        "exact_error_below_bound": bool(normalized_error(p_e1, p_e2) <= 1.0 / (p + 1.0)),
    }


COND_SPEC = FeatureSpec(
    [[1.0], [-1.0, 1.0]] + [list(np.linspace(-1.0, 1.0, 17))] * 3,
    sigma_y=0.1,
)
COND_REF = (1.0, 1.0, 0.0, 0.0, 0.0)


def conditional_risk_run(
    seed: int,
    spec: FeatureSpec = COND_SPEC,
    ref_w=COND_REF,
    feature_index: int = 1,
    delta: int = 1,
    t: int = 2000,
    n: int = 3000,
    draws: int = 200,
    n_eval: int = 1000,
    cfg: TrainConfig | None = None,
) -> dict:
    """IRM on all training envs vs P-IRM on the oracle partition, scored by R^cond.

    The reference env carries zeros outside {0, feature_index}, i.e. it is
    the env in which the partially invariant predictor is sufficient. Both
    predictors are scored on the same conditioned environments (paired MC).
    """
    cfg = cfg or TrainConfig(lam=1e2, iterations=6000, anneal_iters=2000, learning_rate=1e-2, init_scale=1.0, restarts=4)
    cfg = cfg.with_(seed=seed)
    ss = np.random.SeedSequence(seed).spawn(3)
    ref = EnvWeights(ref_w, "ref")
    weights = [ref] + sample_environments(spec, t, ss[0])
    part = build_partition(weights, ref, delta)
    data = [sample_dataset(w, n, spec.sigma_y, g) for w, g in zip(weights, env_streams(ss[1], len(weights)))]
    pdata = [ds for w, ds in zip(weights, data) if w.env_id in part]
    wrong = sum(
        1 for w in weights if w.env_id in part and abs(w.w[feature_index] - ref.w[feature_index]) > WEIGHT_TOL
    )
    irm = fit_model("irm", cfg, data)
    pirm = fit_model("pirm-part", cfg, data, pdata)
    r_irm = conditional_risk_samples(irm, spec, ref, feature_index, draws, n_eval, ss[2])
    r_pirm = conditional_risk_samples(pirm, spec, ref, feature_index, draws, n_eval, ss[2])
    diff = r_irm - r_pirm
    return {
        "seed": seed,
        "partition_size": len(part),
        "partition_wrong_members": wrong,
        "irm_phi": _floats(irm.phi),
        "pirm_phi": _floats(pirm.phi),
        "rcond_irm": float(r_irm.mean()),
        "rcond_pirm": float(r_pirm.mean()),
        "rcond_analytic_irm": conditional_risk_analytic(irm, spec, ref, feature_index),
        "rcond_analytic_pirm": conditional_risk_analytic(pirm, spec, ref, feature_index),
        "analytic_gap": float(ref.w[feature_index] ** 2),
        "paired_diff": _floats(diff),
    }


def summarize_conditional(runs: Sequence[dict]) -> dict:
    diffs = np.concatenate([r["paired_diff"] for r in runs])
    gap = runs[0]["analytic_gap"]
    mean = float(diffs.mean())
    se = float(diffs.std(ddof=1) / math.sqrt(len(diffs)))
    return {
        "mean_gap": mean,
        "se": se,
        "analytic_gap": gap,
        "per_seed_gap": [float(np.mean(r["paired_diff"])) for r in runs],
        "pass": mean >= 0.5 * gap - 3 * se,
    }


def gamma_check(
    spec: FeatureSpec,
    ref: EnvWeights,
    delta: int,
    feature_index: int,
    d: int,
    r: int,
    epsilon: float,
    draws: int,
    trials: int,
    seed=0,
) -> dict:
    k = len(spec.sets[feature_index])
    alpha = cardinality_ratio(spec, feature_index)
    gamma = compute_gamma(k, alpha, delta, spec.c)
    t = required_envs(d, r, gamma, epsilon)
    m = math.ceil(d - r + d / r)
    ss = np.random.SeedSequence(seed).spawn(2)
    freq = oracle_frequency_mc(spec, ref, delta, draws, ss[0])
    freq_se = math.sqrt(max(freq * (1 - freq), 1e-12) / draws)
    card = partition_cardinality_mc(spec, ref, delta, t, m, trials, ss[1])
    card_se = math.sqrt(max(card * (1 - card), 1e-12) / trials)
    return {
        "k": k,
        "alpha": alpha,
        "gamma": gamma,
        "oracle_frequency": freq,
        "oracle_frequency_se": freq_se,
        "gamma_lower_bounds_frequency": bool(freq >= gamma - 3 * freq_se),
        "required_envs": t,
        "m": m,
        "cardinality_probability": card,
        "cardinality_se": card_se,
        "cardinality_target": 1 - epsilon,
        "cardinality_ok": bool(card >= 1 - epsilon - 3 * card_se),
    }


TABLE1_ROWS = (
    ("ERM", "erm", "full"),
    ("ERM", "erm", "partition"),
    ("IRM", "irm", "full"),
    ("P-IRM (partitioned)", "pirm-part", "partition"),
    ("P-IRM (conditioned)", "pirm-cond", "partition"),
)


def tabular_run(
    envset: TabularEnvSet,
    seeds: Sequence[int],
    cfg: TrainConfig,
    partition_labels: Sequence[str],
    rows=TABLE1_ROWS,
    lambda_grid: Sequence[float] | None = None,
) -> list[dict]:
    """One entry per table row, with per-seed reports and seed aggregates."""
    train_envs = envset.envs(envset.train_labels)
    part_envs = envset.envs(partition_labels)
    test_envs = envset.envs(envset.test_labels)
    if not test_envs:
        raise ConfigError("no test bins")
    full_range = _span(envset.train_labels)
    part_range = _span(partition_labels)
    part_idx = [envset.train_labels.index(lab) for lab in partition_labels]
    out = []
    for label, model, scope in rows:
        reports = []
        for seed in seeds:
            c = cfg.with_(seed=seed)
            if lambda_grid and model != "erm":
                cands = [c.with_(lam=lam) for lam in lambda_grid]
                c = train_domain_validation(cands, train_envs, seed=seed, model=model, partition_idx=part_idx)
            pred = fit_model(model, c, train_envs, part_envs if scope == "partition" else None)
            rep = evaluate(pred, test_envs)
            reports.append({"seed": seed, "lambda": c.lam, **rep.to_dict()})
        out.append(
            {
                "model": label,
                "variant": model,
                "training_range": full_range if scope == "full" else part_range,
                "avg_mse": seed_stats([r["avg"] for r in reports]),
                "worst_group_mse": seed_stats([r["worst_group"] for r in reports]),
                "per_seed": reports,
            }
        )
    return out


def _span(labels: Sequence[str]) -> str:
    bounds = [_parse_range(lab) for lab in labels]
    return f"{_fmt_edge(min(b[0] for b in bounds))}-{_fmt_edge(max(b[1] for b in bounds))}"


# --------------------------------------------------------------------------- #
# run_recipe
# --------------------------------------------------------------------------- #


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def _load_spec(config: ExperimentConfig, default: Callable[[], FeatureSpec]) -> FeatureSpec:
    if config.spec_path:
        return FeatureSpec.from_json(config.spec_path)
    if "spec" in config.params:
        return FeatureSpec.from_dict(config.params["spec"])
    return default()


def _ref_for(config: ExperimentConfig, spec: FeatureSpec) -> EnvWeights:
    if config.ref is not None:
        ref = EnvWeights(config.ref, "ref")
        if ref.c != spec.c:
            raise ConfigError("ref length does not match the spec")
        return ref
    return sample_env_weights(spec, np.random.SeedSequence(config.seeds[0]).spawn(1)[0], env_id="ref")


def _homogeneous_default(p: dict, feature_index: int) -> Callable[[], FeatureSpec]:
    def make():
        k = int(p.get("k", 2))
        alpha = float(p.get("alpha", 2))
        size = int(round(alpha * k))
        return homogeneous_spec(int(p.get("c", 10)), k, size, feature_index=feature_index)

    return make


def _recipe_lemma1(config, out: Path) -> dict:
    p = config.params
    cfg = config.train_config(lam=1e4, iterations=4000, anneal_iters=2000, learning_rate=1e-3)
    runs = [lemma1_run(s, n=int(p.get("n", 10_000)), n_sampled=int(p.get("n_sampled", 3)), cfg=cfg) for s in config.seeds]
    rows = []
    for r in runs:
        for model in ("irm", "erm"):
            rows.append([r["seed"], model] + r[f"{model}_phi"])
    d = len(runs[0]["irm_phi"])
    _write_csv(out / "lemma1.csv", ["seed", "model"] + [f"phi{j}" for j in range(d)], rows)
    return {"per_seed": runs, "all_pass": all(r["pass"] for r in runs)}


def _recipe_example1(config, out: Path) -> dict:
    p = config.params
    cfg = config.train_config(lam=1e3, iterations=6000, anneal_iters=2000, learning_rate=1e-2, init_scale=1.0, restarts=8)
    runs = [
        example1_run(
            s,
            sigmas=tuple(p.get("sigmas", EXAMPLE1_SIGMAS)),
            signs=tuple(p.get("signs", EXAMPLE1_SIGNS)),
            n=int(p.get("n", 100_000)),
            cfg=cfg,
        )
        for s in config.seeds
    ]
    rows = [[r["seed"], m] + v["phi"] + [v["test_mse"]] for r in runs for m, v in r["models"].items()]
    _write_csv(out / "example1.csv", ["seed", "model", "phi0", "phi1", "phi2", "test_mse"], rows)
    summary = {m: seed_stats([r["models"][m]["test_mse"] for r in runs]) for m in MODELS}
    return {"per_seed": runs, "test_mse": summary, "all_pass": all(r["pass"] for r in runs)}


def _recipe_suppression(config, out: Path) -> dict:
    p = config.params
    cfg = config.train_config(lam=1e3, iterations=40_000, anneal_iters=4000, learning_rate=1e-2)
    runs = [
        suppression_run(s, sigmas=tuple(p.get("sigmas", SUPPRESSION_SIGMAS)), n=int(p.get("n", 1000)), cfg=cfg,
                        record_every=int(p.get("record_every", 500)))
        for s in config.seeds
    ]
    traj = [
        [r["seed"], model, step, r1, r2]
        for r in runs
        for model, rows in r["trajectories"].items()
        for step, r1, r2 in rows
    ]
    _write_csv(out / "suppression_trajectories.csv", ["seed", "model", "step", "ratio_block1", "ratio_block2"], traj)
    final = [[r["seed"], m, v["ratio_block1"], v["ratio_block2"]] for r in runs for m, v in r["models"].items()]
    _write_csv(out / "suppression.csv", ["seed", "model", "ratio_block1", "ratio_block2"], final)
    for r in runs:
        del r["trajectories"]
    summary = {
        m: {b: seed_stats([r["models"][m][b] for r in runs]) for b in ("ratio_block1", "ratio_block2")}
        for m in ("irm", "pirm-part")
    }
    return {"per_seed": runs, "ratios": summary, "all_pass": all(r["pass"] for r in runs)}


def _recipe_theorem1(config, out: Path) -> dict:
    p = config.params
    fi = config.feature_index
    spec = _load_spec(config, _homogeneous_default({"c": 12, **p}, fi))
    ref = _ref_for(config, spec)
    res = theorem1_mc(spec, ref, config.delta, fi, int(p.get("t", 200)), int(p.get("trials", 2000)), config.seeds[0])
    res["bounds"] = bound_report(spec, config.delta, fi, int(p.get("d", 10)), int(p.get("r", 5)),
                                 float(p.get("epsilon", 0.05))).to_dict()
    res["ref"] = _floats(ref.w)
    if p.get("learn"):
        runs = [conditional_risk_run(s) for s in config.seeds]
        res["conditional_risk"] = summarize_conditional(runs)
        rows = [[r["seed"], r["partition_size"], r["partition_wrong_members"], r["rcond_irm"], r["rcond_pirm"]] for r in runs]
        _write_csv(out / "conditional_risk.csv",
                   ["seed", "partition_size", "wrong_members", "rcond_irm", "rcond_pirm"], rows)
    _write_csv(out / "theorem1.csv", ["quantity", "value"],
               [[k, v] for k, v in res.items() if isinstance(v, (int, float))])
    return res


def _recipe_gamma(config, out: Path) -> dict:
    p = config.params
    fi = config.feature_index
    spec = _load_spec(config, _homogeneous_default(p, fi))
    ref = _ref_for(config, spec)
    res = gamma_check(spec, ref, config.delta, fi, int(p.get("d", 10)), int(p.get("r", 5)),
                      float(p.get("epsilon", 0.05)), int(p.get("draws", 100_000)), int(p.get("trials", 2000)),
                      config.seeds[0])
    res["ref"] = _floats(ref.w)
    _write_csv(out / "gamma_check.csv", ["quantity", "value"],
               [[k, v] for k, v in res.items() if isinstance(v, (int, float))])
    return res


def _recipe_tabular(config, out: Path) -> dict:
    p = config.params
    edges = p.get("bin_edges", list(range(1910, 2011, 10)))
    envset = ingest_tabular(
        config.dataset_path,
        p.get("meta_column", "YearBuilt"),
        edges,
        p.get("target_column", "SalePrice"),
        train_until=p.get("train_until", 1970),
        exclude_columns=p.get("exclude_columns", ["Id"]),
    )
    part_spec = config.partition or ["1930-1970"]
    labels: list[str] = []
    for item in part_spec:
        if item in envset.train_labels:
            labels.append(item)
        else:
            lo, hi = _parse_range(item)
            labels.extend(envset.labels_in_range(lo, hi))
    labels = list(dict.fromkeys(labels))
    if not labels:
        raise ConfigError(f"partition {part_spec} selects no training bins")
    cfg = config.train_config()
    if config.model is None:
        rows = TABLE1_ROWS
    else:
        name = {"erm": "ERM", "irm": "IRM", "pirm-part": "P-IRM (partitioned)", "pirm-cond": "P-IRM (conditioned)"}
        rows = ((name[config.model], config.model, "partition" if config.model.startswith("pirm") else "full"),)
    table = tabular_run(envset, config.seeds, cfg, labels, rows, p.get("lambda_grid"))
    _write_csv(
        out / "table1.csv",
        ["model", "training_range", "avg_mse_mean", "avg_mse_std", "worst_group_mse_mean", "worst_group_mse_std"],
        [[r["model"], r["training_range"], r["avg_mse"]["mean"], r["avg_mse"]["std"],
          r["worst_group_mse"]["mean"], r["worst_group_mse"]["std"]] for r in table],
    )
    per_env = [
        [r["model"], r["training_range"], rep["seed"], env, mse]
        for r in table for rep in r["per_seed"] for env, mse in rep["per_env"].items()
    ]
    _write_csv(out / "per_env_mse.csv", ["model", "training_range", "seed", "env", "mse"], per_env)
    return {
        "train_bins": list(envset.train_labels),
        "test_bins": list(envset.test_labels),
        "partition_bins": labels,
        "features": list(envset.feature_names),
        "dropped_constant_columns": list(envset.dropped_columns),
        "rows": table,
    }


_RECIPES = {
    "lemma1": _recipe_lemma1,
    "example1": _recipe_example1,
    "suppression": _recipe_suppression,
    "theorem1-mc": _recipe_theorem1,
    "gamma-check": _recipe_gamma,
    "tabular": _recipe_tabular,
}


def run_recipe(config: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Run ``config.recipe`` and write its reports; returns the output directory."""
    config.validate()
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        results = _RECIPES[config.recipe](config, out)
    except (ConfigError, SpecError, BoundError, DivergenceError):
        raise
    except Exception as exc:
        raise RuntimeError(f"recipe {config.recipe} failed: {exc}") from exc
    report = {"recipe": config.recipe, "config": config.to_dict(), "results": results}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    meta = {
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
