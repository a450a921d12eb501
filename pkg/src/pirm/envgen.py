"""Synthetic environments with drifting concepts.

Each environment draws one weight per feature, uniformly from a finite set
attached to that feature. The first set is a singleton, so the first feature
keeps the same weight everywhere; every other feature can drift.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

SeedLike = int | np.random.Generator | np.random.SeedSequence | None


class SpecError(ValueError):
    """Invalid feature specification or generator argument."""


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def env_streams(seed: int | np.random.SeedSequence, count: int) -> list[np.random.Generator]:
    """Independent generators, one per environment.

    Child ``i`` depends only on ``seed`` and ``i``, so asking for more streams
    never changes the earlier ones.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(count)]


# --------------------------------------------------------------------------- #
# Domain types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FeatureSpec:
    """Per-feature weight sets A_1..A_c plus the label-noise level."""

    sets: tuple[tuple[float, ...], ...]
    sigma_y: float = 0.0

    def __post_init__(self):
        sets = tuple(tuple(float(v) for v in s) for s in self.sets)
        object.__setattr__(self, "sets", sets)
        if len(sets) < 1:
            raise SpecError("need at least one feature set")
        for i, s in enumerate(sets):
            if not s:
                raise SpecError(f"set {i} is empty")
            if not all(math.isfinite(v) for v in s):
                raise SpecError(f"set {i} has non-finite values")
            if len(set(s)) != len(s):
                raise SpecError(f"set {i} has repeated values")
        if len(sets[0]) != 1:
            raise SpecError("the invariant feature set must be a singleton")
        for i, s in enumerate(sets[1:], start=1):
            if len(s) < 2:
                raise SpecError(f"set {i} must have more than one element")
        if not (math.isfinite(self.sigma_y) and self.sigma_y >= 0):
            raise SpecError("sigma_y must be finite and >= 0")

    @property
    def c(self) -> int:
        return len(self.sets)

    @property
    def w_inv(self) -> float:
        return self.sets[0][0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.sets)

    def to_dict(self) -> dict:
        return {"sets": [list(s) for s in self.sets], "sigma_y": self.sigma_y}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(sets=d["sets"], sigma_y=float(d.get("sigma_y", 0.0)))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "FeatureSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def homogeneous_spec(
    c: int,
    k: int,
    set_size: int,
    feature_index: int = 1,
    w_inv: float = 1.0,
    sigma_y: float = 0.0,
) -> FeatureSpec:
    """Spec whose feature of interest has ``k`` values and every other drifting
    feature has ``set_size`` values (the integers 1..size)."""
    if c < 2:
        raise SpecError("c must be >= 2")
    if not 1 <= feature_index < c:
        raise SpecError("feature_index must address a drifting feature")
    sets = [(w_inv,)]
    for j in range(1, c):
        size = k if j == feature_index else set_size
        sets.append(tuple(float(v) for v in range(1, size + 1)))
    return FeatureSpec(sets=sets, sigma_y=sigma_y)


@dataclass(frozen=True)
class EnvWeights:
    w: np.ndarray
    env_id: Hashable = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).copy()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def c(self) -> int:
        return self.w.shape[0]

    def to_dict(self) -> dict:
        return {"env_id": self.env_id, "w": self.w.tolist()}


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    env_id: Hashable = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise SpecError("X must be a matrix")
        if X.shape[0] != y.shape[0]:
            raise SpecError(f"row mismatch: X has {X.shape[0]}, y has {y.shape[0]}")
        if X.shape[0] < 1:
            raise SpecError("empty dataset")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise SpecError("dataset has non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.env_id)


class SpuriousRule(str, Enum):
    INDEPENDENT = "independent-gaussian"
    ANTI_CAUSAL = "anti-causal"


@dataclass(frozen=True)
class ScrambleMap:
    """Linear mixing of ``c`` causal and ``q`` spurious coordinates into ``d``.

    ``left_inverse`` satisfies ``left_inverse @ S == [I_c | 0]``, so causal
    features are recoverable from any scrambled row.
    """

    S: np.ndarray
    q: int
    left_inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 2 or S.shape[1] <= self.q or self.q < 0:
            raise SpecError("S must be d x (c+q) with c >= 1")
        c = S.shape[1] - self.q
        Sc, Ss = S[:, :c], S[:, c:]
        if np.linalg.matrix_rank(Sc) < c:
            raise SpecError("causal block of S is rank deficient")
        # project out the spurious column space before inverting the causal block
        M = np.eye(S.shape[0]) - Ss @ np.linalg.pinv(Ss) if self.q else np.eye(S.shape[0])
        MSc = M @ Sc
        if np.linalg.matrix_rank(MSc) < c:
            raise SpecError("causal block is not separable from the spurious block")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "left_inverse", np.linalg.pinv(MSc) @ M)

    @property
    def c(self) -> int:
        return self.S.shape[1] - self.q

    @property
    def d(self) -> int:
        return self.S.shape[0]

    def recover(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.left_inverse.T

    @classmethod
    def random(cls, c: int, q: int, d: int | None = None, seed: SeedLike = None) -> "ScrambleMap":
        d = c + q if d is None else d
        rng = as_generator(seed)
        return cls(rng.standard_normal((d, c + q)), q)

    @classmethod
    def identity(cls, c: int) -> "ScrambleMap":
        return cls(np.eye(c), 0)


# --------------------------------------------------------------------------- #
# Generators
# --------------------------------------------------------------------------- #


def sample_env_weights(spec: FeatureSpec, seed: SeedLike = None, env_id: Hashable = None) -> EnvWeights:
    rng = as_generator(seed)
    w = np.array([s[rng.integers(len(s))] for s in spec.sets])
    w[0] = spec.w_inv
    return EnvWeights(w, env_id)


def sample_weight_matrix(spec: FeatureSpec, size: int | tuple, seed: SeedLike = None) -> np.ndarray:
    """Vectorised draw of ``size`` weight vectors; trailing axis has length c."""
    rng = as_generator(seed)
    shape = (size,) if isinstance(size, int) else tuple(size)
    out = np.empty(shape + (spec.c,))
    for j, s in enumerate(spec.sets):
        vals = np.asarray(s)
        out[..., j] = vals[rng.integers(len(s), size=shape)]
    return out


def sample_environments(spec: FeatureSpec, count: int, seed: int = 0) -> list[EnvWeights]:
    return [sample_env_weights(spec, g, env_id=i) for i, g in enumerate(env_streams(seed, count))]


def sample_dataset(weights: EnvWeights, n: int, sigma_y: float, seed: SeedLike = None) -> Dataset:
    if n < 1:
        raise SpecError("empty dataset requested")
    if sigma_y < 0:
        raise SpecError("sigma_y must be >= 0")
    rng = as_generator(seed)
    X = rng.standard_normal((n, weights.c))
    y = X @ weights.w
    if sigma_y > 0:
        y = y + sigma_y * rng.standard_normal(n)
    return Dataset(X, y, weights.env_id)


def scramble(
    ds: Dataset,
    smap: ScrambleMap,
    spurious_rule: SpuriousRule | str = SpuriousRule.INDEPENDENT,
    seed: SeedLike = None,
    spurious_sigma: float = 1.0,
) -> Dataset:
    if ds.d != smap.c:
        raise SpecError(f"dataset has {ds.d} features, map expects {smap.c}")
    rule = SpuriousRule(spurious_rule)
    rng = as_generator(seed)
    noise = rng.standard_normal((ds.n, smap.q))
    if rule is SpuriousRule.INDEPENDENT:
        Xs = noise
    else:
        Xs = ds.y[:, None] + spurious_sigma * noise
    Z = np.hstack([ds.X, Xs])
    return Dataset(Z @ smap.S.T, ds.y, ds.env_id)


def gen_example1(
    sigma_e: float,
    c_e: int,
    n: int,
    seed: SeedLike = None,
    sigma_max: float = math.inf,
    env_id: Hashable = None,
) -> Dataset:
    """x1, x2 ~ N(0, s^2); y = x1 + c_e*x2 + N(0, s^2); x3 = y + N(0, 1)."""
    if not sigma_e > 0:
        raise SpecError("sigma_e must be positive")
    if sigma_e > sigma_max:
        raise SpecError(f"sigma_e={sigma_e} exceeds sigma_max={sigma_max}")
    if c_e not in (-1, 1):
        raise SpecError("c_e must be -1 or +1")
    if n < 1:
        raise SpecError("empty dataset requested")
    rng = as_generator(seed)
    x1 = sigma_e * rng.standard_normal(n)
    x2 = sigma_e * rng.standard_normal(n)
    y = x1 + c_e * x2 + sigma_e * rng.standard_normal(n)
    x3 = y + rng.standard_normal(n)
    return Dataset(np.column_stack([x1, x2, x3]), y, env_id)


def gen_appendix_synth(
    sigma_e: float,
    c_e: int,
    W1: Sequence[float],
    W2: Sequence[float],
    n: int,
    seed: SeedLike = None,
    env_id: Hashable = None,
) -> Dataset:
    """Two 10-dim blocks scaled by ``sigma_e``; block 2 is causal only when ``c_e == 1``."""
    if not sigma_e > 0:
        raise SpecError("sigma_e must be positive")
    if c_e not in (0, 1):
        raise SpecError("c_e must be 0 or 1")
    if n < 1:
        raise SpecError("empty dataset requested")
    W1 = np.asarray(W1, dtype=float)
    W2 = np.asarray(W2, dtype=float)
    rng = as_generator(seed)
    X1 = sigma_e * rng.standard_normal((n, W1.shape[0]))
    X2 = sigma_e * rng.standard_normal((n, W2.shape[0]))
    y = X1 @ W1 + c_e * (X2 @ W2) + sigma_e * rng.standard_normal(n)
    return Dataset(np.hstack([X1, X2]), y, env_id)


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #


def write_datasets_csv(datasets: Iterable[Dataset], path: str | Path) -> None:
    datasets = list(datasets)
    if not datasets:
        raise SpecError("nothing to write")
    d = datasets[0].d
    if any(ds.d != d for ds in datasets):
        raise SpecError("datasets disagree on feature dimension")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(d)] + ["y", "env_id"])
        for ds in datasets:
            for row, yi in zip(ds.X, ds.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yi)), ds.env_id])


def read_datasets_csv(path: str | Path) -> list[Dataset]:
    """Inverse of :func:`write_datasets_csv`; environments keep first-seen order."""
    import pandas as pd

    df = pd.read_csv(path, dtype={"env_id": str}, float_precision="round_trip")
    xcols = [c for c in df.columns if c.startswith("x")]
    out = []
    for env, grp in df.groupby("env_id", sort=False):
        out.append(Dataset(grp[xcols].to_numpy(float), grp["y"].to_numpy(float), env))
    return out
