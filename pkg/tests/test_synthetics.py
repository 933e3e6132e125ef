import numpy as np
import pytest

import oracles
from sliceshift.pipeline import run_on_bundle
from sliceshift.synthetics import (
    GENERATORS,
    gen_highdim,
    gen_noisy_slices,
    gen_support_shift,
    generate,
    noisy_loss,
    write_bundle,
)


def _within_binomial(count, n, p, z=4.0):
    return abs(count / n - p) <= z * np.sqrt(p * (1 - p) / n)


def _params(theta):
    return theta.theta_singleton, theta.theta_noise, theta.theta_edge, theta.theta_abstain


@pytest.mark.parametrize("name,params", [
    ("support_shift", {"p_spurious": 0.01, "n": 2000}),
    ("highdim", {"d_irrelevant": 5, "n_source": 300, "n_target": 500}),
    ("noisy_slices", {"theta_ii": 1.0, "n": 2000}),
])
def test_generators_are_bit_identical_per_seed(name, params):
    a, b = generate(name, seed=5, **params), generate(name, seed=5, **params)
    np.testing.assert_array_equal(a.source_features, b.source_features)
    np.testing.assert_array_equal(a.target_slices.values, b.target_slices.values)
    np.testing.assert_array_equal(a.source_loss, b.source_loss)
    assert a.true_target_value == b.true_target_value
    c = generate(name, seed=6, **params)
    assert not np.array_equal(a.source_loss, c.source_loss)


def test_unknown_generator():
    with pytest.raises(KeyError, match="available"):
        generate("nope")
    assert set(GENERATORS) == {"support_shift", "highdim", "noisy_slices"}


def test_support_shift_marginals_and_truth():
    b = gen_support_shift(1e-3, n=10000, seed=0)
    n0_t = int(np.sum(b.target_slices.values[:, 0] == -1))
    n0_s = int(np.sum(b.source_slices.values[:, 0] == -1))
    assert _within_binomial(n0_t, 10000, 0.75, z=3)
    assert _within_binomial(n0_s, 10000, 0.25, z=3)
    assert np.all(b.target_features[:, 1] == 1.0)
    assert b.truth_method == "monte_carlo"
    assert 0.5 <= b.generator_config["variance"] <= 2.0
    assert 1.0 <= b.generator_config["coef"] <= 3.0
    assert np.isfinite(b.true_target_value) and b.true_target_value < b.true_source_value


def test_support_shift_without_spurious_shift():
    b = gen_support_shift(1.0, n=500, seed=1)
    np.testing.assert_array_equal(b.source_features[:, 1], b.target_features[:, 1])


def test_support_shift_rejects_bad_rate():
    with pytest.raises(ValueError):
        gen_support_shift(0.0)


def test_highdim_shapes_and_reference_means():
    b = gen_highdim(7, seed=0)
    assert b.source_features.shape == (1000, 9)
    assert b.target_features.shape == (10000, 9)
    assert b.source_slices.n == 1000 and b.target_slices.n == 10000
    # published reference values: about 0.42 on target and 0.59 on source
    assert b.true_target_value == pytest.approx(0.42, abs=0.02)
    assert b.true_source_value == pytest.approx(0.59, abs=0.02)
    assert np.std(b.source_features[:, 2:]) == pytest.approx(5.0, rel=0.05)


def test_highdim_relevant_part_independent_of_d():
    a, b = gen_highdim(0, seed=2), gen_highdim(50, seed=2)
    np.testing.assert_array_equal(a.source_features, b.source_features[:, :2])
    np.testing.assert_array_equal(a.source_loss, b.source_loss)


def test_noisy_loss_table():
    g = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]])
    np.testing.assert_array_equal(noisy_loss(g), [0.02, 0.2, 0.9, 0.2])


def test_noisy_slices_truth_and_correction():
    b = gen_noisy_slices(1.0, seed=3, n=100_000)
    assert b.truth_method == "analytic"
    assert 0.02 <= b.true_target_value <= 0.9
    for side, g, gt in (("source", b.extras["source_g"], b.source_slices),
                        ("target", b.extras["target_g"], b.target_slices)):
        table = getattr(b.correction, side).tables
        np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-12)
        for i in range(2):
            for v in (-1, 1):
                rows = gt.values[:, i] == v
                hits = int(np.sum(g.values[rows, i] == 1))
                assert _within_binomial(hits, int(rows.sum()), table[i, 1, v + 1])


def test_noisy_slices_truth_matches_brute_force():
    b = gen_noisy_slices(0.5, seed=4, n=1000)
    for key, value in (("theta_target", b.true_target_value), ("theta_source", b.true_source_value)):
        gs, p = oracles.brute_marginal_from_joint(*_params(b.extras[key]), b.graph.edges)
        assert value == pytest.approx(p @ noisy_loss(gs), rel=1e-12)


def test_noise_aware_estimate_matches_population_value():
    # with exact correction tables the large-sample limit of the estimate is
    # E_s[E_s[w(g) | g~] l(g)], computed here by direct enumeration
    b = gen_noisy_slices(1.0, seed=7)
    pop, truth, _ = oracles.population_algorithm_value(
        _params(b.extras["theta_source"]), _params(b.extras["theta_target"]), b.graph.edges,
        lambda g: noisy_loss(np.atleast_2d(g))[0])
    assert truth == pytest.approx(b.true_target_value, rel=1e-12)
    est = run_on_bundle(b, "mandoline", split="none").estimate.value
    assert est == pytest.approx(pop, abs=0.005)


def test_write_bundle_layout(tmp_path):
    b = gen_noisy_slices(1.0, seed=0, n=200)
    write_bundle(b, tmp_path, features=False)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["correction.json", "edges.json", "source_loss.csv", "source_slices.csv",
                     "target_slices.csv", "truth.json"]
