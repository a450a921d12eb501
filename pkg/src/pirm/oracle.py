"""Distance oracle, partition construction and the accompanying probability bounds.

The oracle marks an environment as close to a reference when their weight
vectors differ in at most ``delta`` coordinates. The bounds quantify how often
that closeness also means the feature of interest kept the reference weight,
and how many environments must be drawn to see enough close ones.

Exact error probabilities are obtained from the Poisson-binomial law of the
number of changed coordinates, computed by a truncated convolution.
"""

from __future__ import annotations

import json
import math
import warnings
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .envgen import EnvWeights, FeatureSpec, SeedLike, as_generator, sample_weight_matrix

WEIGHT_TOL = 1e-12


class BoundError(ValueError):
    """Bound evaluated outside its domain."""


def l0_distance(w_a, w_b, tol: float = WEIGHT_TOL) -> int:
    a = np.asarray(getattr(w_a, "w", w_a), dtype=float)
    b = np.asarray(getattr(w_b, "w", w_b), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(np.abs(a - b) > tol))


def oracle_indicator(w_ref, w_e, delta: int) -> bool:
    return l0_distance(w_ref, w_e) <= delta


@dataclass(frozen=True)
class Partition:
    ref_env: Hashable
    delta: int
    members: frozenset

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))
        if self.ref_env not in self.members:
            raise ValueError("reference environment must be a member")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, env_id) -> bool:
        return env_id in self.members


def build_partition(envs: Sequence[EnvWeights], ref: EnvWeights, delta: int) -> Partition:
    c = ref.c
    if delta >= (c - 2) / 2:
        warnings.warn(
            f"delta={delta} is not below (c-2)/2={(c - 2) / 2}; recovery guarantee does not apply",
            stacklevel=2,
        )
    members = {e.env_id for e in envs if oracle_indicator(ref, e, delta)}
    members.add(ref.env_id)
    return Partition(ref.env_id, delta, frozenset(members))


def avg_distance_criterion(
    candidate: Partition,
    all_envs: Mapping[Hashable, object] | Sequence[EnvWeights],
    metric: Callable[[object, object], float],
) -> bool:
    """True when members sit strictly closer to the reference, on average,
    than the full environment pool does."""
    if not isinstance(all_envs, Mapping):
        all_envs = {e.env_id: e for e in all_envs}
    missing = candidate.members - set(all_envs)
    if missing:
        raise KeyError(f"partition members not in pool: {sorted(map(str, missing))}")
    ref = all_envs[candidate.ref_env]
    # iterate the pool in its own order so the float sums are reproducible
    inside = [metric(e, ref) for k, e in all_envs.items() if k in candidate.members]
    everyone = [metric(e, ref) for e in all_envs.values()]
    return float(np.mean(inside)) < float(np.mean(everyone))


# --------------------------------------------------------------------------- #
# Bounds
# --------------------------------------------------------------------------- #


def ratio_bound_p(c: int, delta: int, alpha: float) -> float:
    """Lower bound on P(E1)/P(E2): (c - 1 - delta) * alpha / delta."""
    if delta < 1:
        raise BoundError("ratio bound undefined for delta < 1")
    if c < 3:
        raise BoundError("need c >= 3")
    if not alpha > 1:
        raise BoundError("alpha must exceed 1")
    return (c - 1 - delta) * alpha / delta


def success_lower_bound(p: float, m: float) -> float:
    return (p / (p + 1.0)) ** m


def poisson_binomial_pmf(probs: Sequence[float], max_count: int | None = None) -> np.ndarray:
    """PMF of a sum of independent Bernoullis, truncated to ``0..max_count``.

    Entries up to ``max_count`` are exact; mass above it is discarded.
    """
    top = len(probs) if max_count is None else min(max_count, len(probs))
    pmf = np.zeros(top + 1)
    pmf[0] = 1.0
    for p in probs:
        shifted = pmf[:-1] * p
        pmf *= 1.0 - p
        pmf[1:] += shifted
    return pmf


def change_probabilities(spec: FeatureSpec, feature_index: int) -> list[float]:
    """P(coordinate j differs from a fixed reference) for j outside {0, feature_index}."""
    return [1.0 - 1.0 / len(s) for j, s in enumerate(spec.sets) if j not in (0, feature_index)]


def exact_error_prob(spec: FeatureSpec, delta: int, feature_index: int) -> tuple[float, float]:
    """Unnormalised (P(E1), P(E2)) for the oracle with threshold ``delta``.

    E1: feature of interest unchanged and 1..delta other coordinates changed.
    E2: feature of interest changed and 0..delta-1 other coordinates changed.
    """
    if delta < 0:
        raise BoundError("delta must be >= 0")
    if not 1 <= feature_index < spec.c:
        raise BoundError("feature_index must address a drifting feature")
    k = len(spec.sets[feature_index])
    pmf = poisson_binomial_pmf(change_probabilities(spec, feature_index), max_count=delta)
    p_e1 = float(pmf[1 : delta + 1].sum()) / k
    p_e2 = (1.0 - 1.0 / k) * float(pmf[:delta].sum())
    return p_e1, p_e2


def normalized_error(p_e1: float, p_e2: float) -> float:
    """P(E2 | E1 or E2); zero when neither event is possible."""
    total = p_e1 + p_e2
    return p_e2 / total if total > 0 else 0.0


def cardinality_ratio(spec: FeatureSpec, feature_index: int) -> float:
    """Smallest |A_j| / |A_i| over the drifting features other than ``feature_index``."""
    k = len(spec.sets[feature_index])
    others = [len(s) for j, s in enumerate(spec.sets) if j not in (0, feature_index)]
    if not others:
        raise BoundError("no drifting features besides the feature of interest")
    return min(others) / k


def bernoulli_kl(a: float, b: float) -> float:
    if not (0 < a < 1 and 0 < b < 1):
        raise BoundError(f"Bernoulli KL needs arguments in (0, 1), got {a}, {b}")
    return a * math.log(a / b) + (1 - a) * math.log((1 - a) / (1 - b))


def compute_gamma(k: int, alpha: float, delta: int, c: int) -> float:
    n = c - 2
    if n < 1:
        raise BoundError("need c >= 3")
    d = bernoulli_kl(delta / n, 1.0 / (alpha * k))
    return math.exp(-n * d) / (k * math.sqrt(2 * n))


def required_envs(d: int, r: int, gamma: float, epsilon: float) -> int:
    if not 0 < r <= d:
        raise BoundError("need 0 < r <= d")
    if not 0 < gamma <= 1:
        raise BoundError("gamma must lie in (0, 1]")
    if not 0 < epsilon < 1:
        raise BoundError("epsilon must lie in (0, 1)")
    return math.ceil((d - r + d / r) * math.log(1 / epsilon) / gamma)


# --------------------------------------------------------------------------- #
# Monte Carlo checks
# --------------------------------------------------------------------------- #


def _hits(spec: FeatureSpec, ref: EnvWeights, delta: int, shape, rng) -> np.ndarray:
    W = sample_weight_matrix(spec, shape, rng)
    dist = np.count_nonzero(np.abs(W - ref.w) > WEIGHT_TOL, axis=-1)
    return dist <= delta


def oracle_frequency_mc(spec: FeatureSpec, ref: EnvWeights, delta: int, draws: int, seed: SeedLike = None) -> float:
    """Fraction of freshly sampled environments the oracle accepts."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    return float(_hits(spec, ref, delta, draws, as_generator(seed)).mean())


def partition_cardinality_mc(
    spec: FeatureSpec,
    ref: EnvWeights,
    delta: int,
    t: int,
    m: int,
    trials: int,
    seed: SeedLike = None,
    chunk: int = 1000,
) -> float:
    """Estimate P(at least ``m`` of ``t`` sampled environments pass the oracle)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not t >= m >= 1:
        raise ValueError("need t >= m >= 1")
    rng = as_generator(seed)
    ok = 0
    for start in range(0, trials, chunk):
        size = min(chunk, trials - start)
        ok += int((_hits(spec, ref, delta, (size, t), rng).sum(axis=1) >= m).sum())
    return ok / trials


# --------------------------------------------------------------------------- #
# Report
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class BoundReport:
    p: float
    success_lb: float
    p_error_exact: float
    gamma: float
    required_envs: int
    p_e1: float = float("nan")
    p_e2: float = float("nan")
    p_error_bound: float = float("nan")

    def __post_init__(self):
        if not 0 <= self.success_lb <= 1:
            raise ValueError("success_lb outside [0, 1]")
        if not 0 <= self.p_error_exact <= 1:
            raise ValueError("p_error_exact outside [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma outside (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def bound_report(
    spec: FeatureSpec,
    delta: int,
    feature_index: int,
    d: int,
    r: int,
    epsilon: float,
    m: float | None = None,
) -> BoundReport:
    """Evaluate every bound for ``spec``; ``m`` defaults to d - r + d/r."""
    k = len(spec.sets[feature_index])
    alpha = cardinality_ratio(spec, feature_index)
    p = ratio_bound_p(spec.c, delta, alpha)
    m = d - r + d / r if m is None else m
    p_e1, p_e2 = exact_error_prob(spec, delta, feature_index)
    gamma = compute_gamma(k, alpha, delta, spec.c)
    return BoundReport(
        p=p,
        success_lb=success_lower_bound(p, m),
        p_error_exact=normalized_error(p_e1, p_e2),
        gamma=gamma,
        required_envs=required_envs(d, r, gamma, epsilon),
        p_e1=p_e1,
        p_e2=p_e2,
        p_error_bound=1.0 / (p + 1.0),
    )
