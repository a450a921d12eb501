import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pirm.envgen import (
    Dataset,
    EnvWeights,
    FeatureSpec,
    ScrambleMap,
    SpecError,
    SpuriousRule,
    env_streams,
    gen_appendix_synth,
    gen_example1,
    homogeneous_spec,
    read_datasets_csv,
    sample_dataset,
    sample_env_weights,
    sample_environments,
    sample_weight_matrix,
    scramble,
    write_datasets_csv,
)


def ols(X, y):
    return np.linalg.lstsq(X, y, rcond=None)[0]


# --- FeatureSpec -------------------------------------------------------------


def test_spec_properties():
    spec = FeatureSpec([[0.7], [-1, 1], [0.5, -0.5, 2.0]], sigma_y=0.3)
    assert spec.c == 3
    assert spec.w_inv == 0.7
    assert spec.sizes == (1, 2, 3)


@pytest.mark.parametrize(
    "sets",
    [
        [[1.0, 2.0], [1, 2]],  # first set not a singleton
        [[1.0], [3.0]],  # drifting set of size 1
        [[1.0], []],
        [[1.0], [1.0, float("nan")]],
        [[1.0], [1.0, float("inf")]],
        [[1.0], [1.0, 1.0]],  # duplicate
        [],
    ],
)
def test_spec_rejects_invalid(sets):
    with pytest.raises(SpecError):
        FeatureSpec(sets)


def test_spec_rejects_negative_noise():
    with pytest.raises(SpecError):
        FeatureSpec([[1.0], [0, 1]], sigma_y=-0.1)


def test_spec_json_roundtrip(tmp_path):
    spec = FeatureSpec([[1.0], [-1, 1], [0.25, 0.5, 0.75]], sigma_y=0.2)
    path = tmp_path / "spec.json"
    spec.to_json(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"sets", "sigma_y"}
    assert FeatureSpec.from_json(path) == spec


def test_homogeneous_spec_sizes():
    spec = homogeneous_spec(c=6, k=2, set_size=4, feature_index=2)
    assert spec.sizes == (1, 4, 2, 4, 4, 4)


# --- sample_env_weights ------------------------------------------------------


def test_singleton_forces_invariant_weight():
    spec = FeatureSpec([[1.0], [-1, 1]])
    for s in range(50):
        assert sample_env_weights(spec, s).w[0] == 1.0


def test_uniform_frequency_of_binary_set():
    spec = FeatureSpec([[1.0], [-1, 1]])
    W = sample_weight_matrix(spec, 100_000, seed=0)
    # binomial sd at n=1e5 is 0.0016, so 0.01 is > 6 sd
    assert abs((W[:, 1] == 1).mean() - 0.5) < 0.01


def test_all_combinations_observed():
    spec = FeatureSpec([[0.7], [-1, 1], [0.5, -0.5, 2.0]])
    W = sample_weight_matrix(spec, 10_000, seed=1)
    seen = {tuple(row) for row in W}
    expected = set(itertools.product([0.7], [-1.0, 1.0], [0.5, -0.5, 2.0]))
    assert seen == expected


def test_scalar_and_vectorised_sampling_share_law():
    spec = FeatureSpec([[1.0], [1, 2, 3, 4]])
    draws = np.array([sample_env_weights(spec, g).w[1] for g in env_streams(5, 4000)])
    freq = np.array([(draws == v).mean() for v in (1, 2, 3, 4)])
    assert np.abs(freq - 0.25).max() < 0.03


@settings(max_examples=40, deadline=None)
@given(
    w_inv=st.floats(-5, 5, allow_nan=False),
    extra=st.lists(st.lists(st.integers(-20, 20), min_size=2, max_size=5, unique=True), min_size=1, max_size=5),
    seed=st.integers(0, 2**32 - 1),
)
def test_weights_stay_in_sets(w_inv, extra, seed):
    spec = FeatureSpec([[w_inv]] + [[float(v) for v in s] for s in extra])
    w = sample_env_weights(spec, seed)
    assert w.w[0] == w_inv
    for j, s in enumerate(spec.sets):
        assert w.w[j] in s


def test_environment_streams_are_prefix_stable():
    spec = FeatureSpec([[1.0], [-1, 1], [0.5, -0.5, 2.0]])
    short = sample_environments(spec, 3, seed=9)
    long = sample_environments(spec, 10, seed=9)
    for a, b in zip(short, long):
        assert np.array_equal(a.w, b.w)


def test_env_weights_read_only():
    w = EnvWeights([1.0, 2.0])
    with pytest.raises(ValueError):
        w.w[0] = 5.0


# --- sample_dataset ----------------------------------------------------------


def test_noiseless_projection():
    ds = sample_dataset(EnvWeights([1.0, 0.0]), 100, sigma_y=0.0, seed=0)
    assert np.array_equal(ds.y, ds.X[:, 0])


def test_feature_moments():
    ds = sample_dataset(EnvWeights([1.0, -2.0, 0.5]), 1_000_000, 0.0, seed=2)
    cov = ds.X.T @ ds.X / ds.n
    assert np.abs(cov - np.eye(3)).max() < 0.01
    assert np.abs(ds.X.mean(axis=0)).max() < 0.01


def test_label_variance_identity():
    ds = sample_dataset(EnvWeights([1.0, 2.0]), 1_000_000, sigma_y=0.5, seed=3)
    target = 1 + 4 + 0.25
    assert ds.y.var() == pytest.approx(target, rel=0.02)


def test_empty_dataset_rejected():
    with pytest.raises(SpecError):
        sample_dataset(EnvWeights([1.0]), 0, 0.0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.zeros(1))


def test_generators_bit_reproducible():
    a = sample_dataset(EnvWeights([1.0, 2.0]), 50, 0.3, seed=11)
    b = sample_dataset(EnvWeights([1.0, 2.0]), 50, 0.3, seed=11)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    e1 = gen_example1(0.5, 1, 40, seed=4)
    e2 = gen_example1(0.5, 1, 40, seed=4)
    assert np.array_equal(e1.X, e2.X)


# --- scramble ----------------------------------------------------------------


def test_identity_scramble():
    ds = sample_dataset(EnvWeights([1.0, 2.0, 3.0]), 30, 0.1, seed=0)
    out = scramble(ds, ScrambleMap.identity(3), seed=1)
    assert np.array_equal(out.X, ds.X)
    assert np.array_equal(out.y, ds.y)


def test_anticausal_spurious_correlates_with_label():
    ds = sample_dataset(EnvWeights([1.0, 1.0]), 100_000, 0.0, seed=0)  # Var(y) = 2
    S = np.eye(3)
    out = scramble(ds, ScrambleMap(S, q=1), SpuriousRule.ANTI_CAUSAL, seed=1)
    # corr(y + N(0,1), y) = sqrt(2/3)
    assert np.corrcoef(out.X[:, 2], out.y)[0, 1] > 0.5


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 5), q=st.integers(0, 4), extra=st.integers(0, 3), seed=st.integers(0, 10_000))
def test_left_inverse_round_trip(c, q, extra, seed):
    smap = ScrambleMap.random(c, q, d=c + q + extra, seed=seed)
    ds = sample_dataset(EnvWeights(np.ones(c)), 20, 0.1, seed=seed)
    out = scramble(ds, smap, SpuriousRule.ANTI_CAUSAL, seed=seed + 1)
    assert np.abs(smap.recover(out.X) - ds.X).max() < 1e-10


def test_rank_deficient_map_rejected():
    S = np.zeros((3, 3))
    S[0, 0] = 1.0
    with pytest.raises(SpecError):
        ScrambleMap(S, q=1)


def test_scramble_dimension_mismatch():
    ds = sample_dataset(EnvWeights([1.0, 2.0]), 10, 0.0, seed=0)
    with pytest.raises(SpecError):
        scramble(ds, ScrambleMap.identity(3))


# --- three-feature and two-block generators ----------------------------------


@pytest.mark.parametrize("c_e", [1, -1])
def test_example1_regression_coefficients(c_e):
    ds = gen_example1(1.0, c_e, 1_000_000, seed=5)
    beta = ols(ds.X[:, :2], ds.y)
    assert beta == pytest.approx([1.0, c_e], abs=0.01)


def test_example1_x3_tracks_label():
    for s in range(5):
        ds = gen_example1(0.3, -1, 10_000, seed=s)
        assert np.corrcoef(ds.X[:, 2], ds.y)[0, 1] > 0


@pytest.mark.parametrize("kw", [dict(sigma_e=0.0, c_e=1), dict(sigma_e=1.0, c_e=0), dict(sigma_e=3.0, c_e=1, sigma_max=2.0)])
def test_example1_validation(kw):
    with pytest.raises(SpecError):
        gen_example1(n=10, **kw)


def test_appendix_block2_silent_when_c_zero():
    rng = np.random.default_rng(0)
    W1, W2 = rng.standard_normal(10), rng.standard_normal(10)
    ds = gen_appendix_synth(1.0, 0, W1, W2, 1_000_000, seed=1)
    beta = ols(ds.X, ds.y)
    assert np.abs(beta[10:]).max() < 0.02


def test_appendix_recovers_both_blocks():
    rng = np.random.default_rng(0)
    W1, W2 = rng.standard_normal(10), rng.standard_normal(10)
    ds = gen_appendix_synth(1.0, 1, W1, W2, 1_000_000, seed=2)
    assert np.abs(ols(ds.X, ds.y) - np.concatenate([W1, W2])).max() < 0.01


def test_appendix_shape():
    ds = gen_appendix_synth(0.2, 1, np.ones(10), np.ones(10), 1000, seed=0)
    assert ds.X.shape == (1000, 20)


# --- CSV ---------------------------------------------------------------------


def test_csv_roundtrip(tmp_path):
    envs = [sample_dataset(EnvWeights([1.0, -1.0], f"env{s}"), 7, 0.2, seed=s) for s in range(3)]
    path = tmp_path / "d.csv"
    write_datasets_csv(envs, path)
    assert path.read_text().splitlines()[0] == "x0,x1,y,env_id"
    back = read_datasets_csv(path)
    assert [b.env_id for b in back] == ["env0", "env1", "env2"]
    for a, b in zip(envs, back):
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
