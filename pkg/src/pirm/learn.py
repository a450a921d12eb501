"""Linear invariant learners: ERM, IRMv1 and the two partial-invariance variants.

All four share one objective,

    sum_{e in risk_envs} R^e(phi) + lam * sum_{e in penalty_envs} pen^e(phi),

where ``pen^e`` is the squared (or absolute) derivative of the environment risk
with respect to a scalar dummy classifier held at 1.0. Choosing the two
environment lists selects the variant:

==================  ==============  ================
variant             risk_envs       penalty_envs
==================  ==============  ================
ERM                 all             (lam = 0)
IRM                 all             all
P-IRM partitioned   partition       partition
P-IRM conditioned   all             partition
==================  ==============  ================
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .envgen import Dataset, EnvWeights, FeatureSpec, SeedLike, as_generator, sample_dataset, sample_env_weights


class PenaltyForm(str, Enum):
    SQUARED = "squared-norm"
    NORM = "norm"


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, trace: np.ndarray):
        super().__init__(msg)
        self.trace = trace


# --------------------------------------------------------------------------- #
# Types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Predictor:
    """Linear predictor ``x -> 1.0 * phi @ x``."""

    phi: np.ndarray
    trace: np.ndarray | None = field(default=None, repr=False, compare=False)
    history: np.ndarray | None = field(default=None, repr=False, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float).reshape(-1)
        if not np.isfinite(phi).all():
            raise ValueError("phi must be finite")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def w_dummy(self) -> float:
        return 1.0

    @property
    def d(self) -> int:
        return self.phi.shape[0]

    def predict(self, X) -> np.ndarray:
        return self.w_dummy * (np.asarray(X, dtype=float) @ self.phi)

    def to_dict(self) -> dict:
        return {"phi": self.phi.tolist(), "meta": self.meta}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "Predictor":
        d = json.loads(Path(path).read_text())
        return cls(np.asarray(d["phi"], dtype=float), meta=d.get("meta", {}))


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e2
    iterations: int = 4000
    anneal_iters: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    penalty_form: PenaltyForm = PenaltyForm.SQUARED
    init_scale: float = 0.1
    weight_decay: float = 0.0
    batch_size: int | None = None
    restarts: int = 1

    def __post_init__(self):
        object.__setattr__(self, "penalty_form", PenaltyForm(self.penalty_form))
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.iterations < 0 or self.anneal_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.anneal_iters > self.iterations:
            raise ValueError("anneal_iters must not exceed iterations")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def effective_lambda(self, step: int) -> float:
        if self.lam == 0:
            return 0.0
        return 1.0 if step < self.anneal_iters else self.lam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["penalty_form"] = self.penalty_form.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class RiskReport:
    per_env: dict
    avg: float
    worst_group: float

    @classmethod
    def from_per_env(cls, per_env: dict) -> "RiskReport":
        if not per_env:
            raise ValueError("no test environments")
        vals = list(per_env.values())
        return cls(dict(per_env), float(np.mean(vals)), float(max(vals)))

    def to_dict(self) -> dict:
        return {
            "per_env": {str(k): v for k, v in self.per_env.items()},
            "avg": self.avg,
            "worst_group": self.worst_group,
        }

    def csv_row(self, model: str, training_range: str) -> list:
        return [model, training_range, self.avg, self.worst_group]

    CSV_HEADER = ("model", "training_range", "avg_mse", "worst_group_mse")


# --------------------------------------------------------------------------- #
# Risk, penalty, objective
# --------------------------------------------------------------------------- #


def _phi(pred) -> np.ndarray:
    return pred.phi if isinstance(pred, Predictor) else np.asarray(pred, dtype=float)


def _check_dims(phi: np.ndarray, ds: Dataset) -> None:
    if ds.d != phi.shape[0]:
        raise ValueError(f"predictor has {phi.shape[0]} weights, data has {ds.d} features")


def mse_risk(pred, ds: Dataset) -> float:
    phi = _phi(pred)
    _check_dims(phi, ds)
    r = ds.y - ds.X @ phi
    return float(np.mean(r * r))


def _dummy_grad(phi: np.ndarray, ds: Dataset) -> float:
    p = ds.X @ phi
    return float(2.0 * np.mean((p - ds.y) * p))


def _apply_form(g: float, form: PenaltyForm) -> float:
    return g * g if form is PenaltyForm.SQUARED else abs(g)


def grad_penalty_empirical(pred, ds: Dataset, form: PenaltyForm | str = PenaltyForm.SQUARED) -> float:
    """Penalty built from d/dw R^e(w * phi) at w = 1 on the sample."""
    phi = _phi(pred)
    _check_dims(phi, ds)
    return _apply_form(_dummy_grad(phi, ds), PenaltyForm(form))


def grad_penalty_closed_form(phi, env_w) -> float:
    """Population |d/dw R^e| at w = 1 for unit-covariance features: 2|sum phi_i^2 - w_i phi_i|."""
    phi = np.asarray(_phi(phi), dtype=float)
    w = np.asarray(getattr(env_w, "w", env_w), dtype=float)
    if phi.shape != w.shape:
        raise ValueError("dimension mismatch")
    return float(2.0 * abs(np.sum(phi * phi - w * phi)))


def objective(
    pred,
    risk_envs: Sequence[Dataset],
    penalty_envs: Sequence[Dataset],
    lam: float,
    form: PenaltyForm | str = PenaltyForm.SQUARED,
) -> float:
    if not risk_envs:
        raise ValueError("no risk environments")
    form = PenaltyForm(form)
    total = math.fsum(mse_risk(pred, ds) for ds in risk_envs)
    if lam:
        total += lam * math.fsum(grad_penalty_empirical(pred, ds, form) for ds in penalty_envs)
    return total


def _env_grads(phi: np.ndarray, ds: Dataset) -> tuple[np.ndarray, float, np.ndarray]:
    """(d risk / d phi, dummy gradient g, d g / d phi) from the sample."""
    _check_dims(phi, ds)
    p = ds.X @ phi
    r = p - ds.y
    n = ds.n
    grad_risk = (2.0 / n) * (ds.X.T @ r)
    g = 2.0 * float(np.mean(r * p))
    grad_g = (2.0 / n) * (ds.X.T @ (r + p))
    return grad_risk, g, grad_g


def _form_grad(g: float, grad_g: np.ndarray, form: PenaltyForm) -> np.ndarray:
    if form is PenaltyForm.SQUARED:
        return 2.0 * g * grad_g
    return np.sign(g) * grad_g


def grad_objective(
    pred,
    risk_envs: Sequence[Dataset],
    penalty_envs: Sequence[Dataset],
    lam: float,
    form: PenaltyForm | str = PenaltyForm.SQUARED,
) -> np.ndarray:
    if not risk_envs:
        raise ValueError("no risk environments")
    form = PenaltyForm(form)
    phi = _phi(pred)
    grad = np.zeros_like(phi)
    for ds in risk_envs:
        grad += _env_grads(phi, ds)[0]
    if lam:
        for ds in penalty_envs:
            _, g, grad_g = _env_grads(phi, ds)
            grad += lam * _form_grad(g, grad_g, form)
    return grad


class _StackedMoments:
    """Second moments of every distinct environment, stacked.

    Risk and penalty are polynomials of phi in (X'X/n, X'y/n, y'y/n), so the
    training loop never touches raw rows.
    """

    def __init__(self, risk_envs: Sequence[Dataset], penalty_envs: Sequence[Dataset]):
        uniq: dict[int, int] = {}
        pool: list[Dataset] = []
        for ds in list(risk_envs) + list(penalty_envs):
            if id(ds) not in uniq:
                uniq[id(ds)] = len(pool)
                pool.append(ds)
        self.C = np.stack([ds.X.T @ ds.X / ds.n for ds in pool])
        self.b = np.stack([ds.X.T @ ds.y / ds.n for ds in pool])
        self.yy = np.array([float(ds.y @ ds.y) / ds.n for ds in pool])
        # multiplicities, so an environment listed twice counts twice
        self.risk_w = np.bincount([uniq[id(ds)] for ds in risk_envs], minlength=len(pool)).astype(float)
        self.pen_w = np.bincount([uniq[id(ds)] for ds in penalty_envs], minlength=len(pool)).astype(float)

    def __call__(self, phi: np.ndarray, lam: float, form: PenaltyForm) -> tuple[float, np.ndarray]:
        Cphi = self.C @ phi
        q = Cphi @ phi
        bphi = self.b @ phi
        risk = q - 2.0 * bphi + self.yy
        val = float(self.risk_w @ risk)
        grad = 2.0 * (self.risk_w @ (Cphi - self.b))
        if lam:
            g = 2.0 * (q - bphi)
            grad_g = 2.0 * (2.0 * Cphi - self.b)
            if form is PenaltyForm.SQUARED:
                val += lam * float(self.pen_w @ (g * g))
                grad = grad + lam * ((self.pen_w * 2.0 * g) @ grad_g)
            else:
                val += lam * float(self.pen_w @ np.abs(g))
                grad = grad + lam * ((self.pen_w * np.sign(g)) @ grad_g)
        return val, grad


def _batch_objective(phi, risk_envs, pen_envs, lam, form, batch_size, rng):
    def draw(ds):
        if ds.n <= batch_size:
            return ds
        return ds.subset(rng.choice(ds.n, size=batch_size, replace=False))

    # an environment in both lists gets one shared minibatch
    cache = {}
    for ds in list(risk_envs) + list(pen_envs):
        if id(ds) not in cache:
            cache[id(ds)] = draw(ds)
    rb = [cache[id(ds)] for ds in risk_envs]
    pb = [cache[id(ds)] for ds in pen_envs]
    return objective(phi, rb, pb, lam, form), grad_objective(phi, rb, pb, lam, form)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


def _adam_run(config, rng, risk_envs, penalty_envs, moments, record_every):
    d = risk_envs[0].d
    phi = config.init_scale * rng.standard_normal(d)
    m = np.zeros(d)
    v = np.zeros(d)
    form = config.penalty_form
    b1, b2 = config.beta1, config.beta2

    trace = np.empty(config.iterations)
    history = []
    for step in range(config.iterations):
        lam = config.effective_lambda(step)
        if moments is not None:
            val, grad = moments(phi, lam, form)
        else:
            val, grad = _batch_objective(phi, risk_envs, penalty_envs, lam, form, config.batch_size, rng)
        trace[step] = val
        if not (math.isfinite(val) and np.isfinite(grad).all()):
            raise DivergenceError(f"objective diverged at step {step}", trace[: step + 1].copy())
        if record_every and step % record_every == 0:
            history.append(np.concatenate([[step], phi]))
        if config.weight_decay:
            grad = grad + config.weight_decay * phi
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** (step + 1))
        vhat = v / (1 - b2 ** (step + 1))
        phi = phi - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
        if not np.isfinite(phi).all():
            raise DivergenceError(f"parameters diverged at step {step}", trace[: step + 1].copy())

    if record_every:
        history.append(np.concatenate([[config.iterations], phi]))
    return phi, trace, (np.array(history) if record_every else None)


def train(
    config: TrainConfig,
    risk_envs: Sequence[Dataset],
    penalty_envs: Sequence[Dataset] | None = None,
    record_every: int | None = None,
) -> Predictor:
    """Full-batch Adam on the unified objective.

    The penalty weight is 1.0 for the first ``anneal_iters`` steps and
    ``config.lam`` afterwards (0 throughout when ``lam == 0``). With
    ``restarts > 1`` the run is repeated from independent initialisations and
    the one with the lowest final objective (at ``config.lam``) is kept; the
    IRMv1 penalty is quartic in phi and has spurious local minima.
    """
    if not risk_envs:
        raise ValueError("no risk environments")
    risk_envs = list(risk_envs)
    penalty_envs = list(risk_envs) if penalty_envs is None else list(penalty_envs)
    d = risk_envs[0].d
    if any(ds.d != d for ds in risk_envs + penalty_envs):
        raise ValueError("environments disagree on feature dimension")

    moments = _StackedMoments(risk_envs, penalty_envs) if config.batch_size is None else None
    if config.restarts == 1:
        rngs = [as_generator(config.seed)]
    else:
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(config.restarts)]

    best = None
    finals = []
    for rng in rngs:
        phi, trace, history = _adam_run(config, rng, risk_envs, penalty_envs, moments, record_every)
        final = objective(phi, risk_envs, penalty_envs, config.lam, config.penalty_form)
        finals.append(final)
        # strict < keeps the earliest restart on ties
        if best is None or final < best[0]:
            best = (final, phi, trace, history)

    meta = {"config": config.to_dict()}
    if config.restarts > 1:
        meta["restart_objectives"] = finals
    return Predictor(best[1], trace=best[2], history=best[3], meta=meta)


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #


def evaluate(pred, test_envs: Sequence[Dataset]) -> RiskReport:
    if not test_envs:
        raise ValueError("no test environments")
    return RiskReport.from_per_env({ds.env_id: mse_risk(pred, ds) for ds in test_envs})


def _pinned_weights(spec: FeatureSpec, ref: EnvWeights, feature_index: int, rng) -> EnvWeights:
    w = sample_env_weights(spec, rng).w.copy()
    w[feature_index] = ref.w[feature_index]
    return EnvWeights(w)


def conditional_risk_samples(
    pred,
    spec: FeatureSpec,
    ref: EnvWeights,
    feature_index: int,
    draws: int,
    n_per_env: int,
    seed: SeedLike = None,
) -> np.ndarray:
    """Per-environment MSEs over environments sharing the reference weight at ``feature_index``."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if not 1 <= feature_index < spec.c:
        raise ValueError("feature_index must address a drifting feature")
    rng = as_generator(seed)
    out = np.empty(draws)
    for i in range(draws):
        w = _pinned_weights(spec, ref, feature_index, rng)
        out[i] = mse_risk(pred, sample_dataset(w, n_per_env, spec.sigma_y, rng))
    return out


def conditional_risk(pred, spec, ref, feature_index, draws, n_per_env, seed=None) -> float:
    return float(conditional_risk_samples(pred, spec, ref, feature_index, draws, n_per_env, seed).mean())


def conditional_risk_analytic(pred, spec: FeatureSpec, ref: EnvWeights, feature_index: int) -> float:
    """Population value of :func:`conditional_risk` under unit-covariance features."""
    phi = _phi(pred)
    total = spec.sigma_y**2
    for j, s in enumerate(spec.sets):
        vals = np.array([ref.w[j]]) if j == feature_index else np.asarray(s)
        total += float(np.mean((phi[j] - vals) ** 2))
    return total


def suppression_ratios(pred, W1, W2) -> tuple[float, float]:
    phi = _phi(pred)
    W1 = np.asarray(W1, dtype=float)
    W2 = np.asarray(W2, dtype=float)
    if phi.shape[0] != W1.shape[0] + W2.shape[0]:
        raise ValueError("phi must stack one block per weight vector")
    n1, n2 = np.linalg.norm(W1), np.linalg.norm(W2)
    if n1 == 0 or n2 == 0:
        raise ValueError("weight block has zero norm")
    k = W1.shape[0]
    return float(np.linalg.norm(phi[:k]) / n1), float(np.linalg.norm(phi[k:]) / n2)
