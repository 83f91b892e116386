"""Smoke tests for the python bindings, checked against numpy oracles."""

import math

import numpy as np
import pytest

import dikelab


def test_gelu_matches_the_gaussian_cdf():
    x = np.linspace(-4, 4, 33)
    got = dikelab.gelu(x)
    from math import erf

    expected = np.array([v * 0.5 * (1.0 + erf(v / math.sqrt(2.0))) for v in x])
    np.testing.assert_allclose(got, expected, rtol=1e-12)
    assert dikelab.gelu(np.array([1.0]))[0] == pytest.approx(0.841345, abs=1e-6)


def test_solve_spd_against_numpy():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(9, 9))
    a = m @ m.T + 9 * np.eye(9)
    b = rng.normal(size=(9, 3))
    x = dikelab.solve_spd(a, b)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-9, atol=1e-9)

    with pytest.raises(dikelab.DikeError):
        dikelab.solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), b[:2])


def test_cross_entropy_and_info_nce_pins():
    logits = np.array([0.3, 0.3, 0.3, 0.3])
    assert dikelab.softmax_cross_entropy(logits, 1) == pytest.approx(math.log(4), rel=1e-12)

    anchor = np.array([1.0, 0.0])
    positive = np.array([2.0, 0.0])
    negative = np.array([-1.0, 0.0])
    value = dikelab.info_nce(anchor, positive, [negative], 1.0)
    assert value == pytest.approx(math.log(1 + math.exp(-2)), rel=1e-12)


def test_harmonic_mean_pin():
    assert dikelab.harmonic_mean(99.9, 99.7, 75.9) == pytest.approx(90.3, abs=0.05)
    assert dikelab.harmonic_mean(100.0, 100.0, 50.0) == pytest.approx(75.0, rel=1e-12)


def test_rank_one_updates_reduce_and_damp():
    rng = np.random.default_rng(11)
    d, d_ff = 6, 10
    w = rng.normal(size=(d, d_ff))
    k = rng.normal(size=d_ff)
    v = rng.normal(size=d)
    k0 = rng.normal(size=(d_ff, 16))
    c0 = k0 @ k0.T

    memit = dikelab.memit_update(w, k, v, c0)
    # numpy oracle for the rank-one closed form
    residual = v - w @ k
    system = c0 + np.outer(k, k)
    expected = w + np.outer(residual, np.linalg.solve(system, k))
    np.testing.assert_allclose(memit, expected, rtol=1e-9, atol=1e-10)

    # zero unrelated projection reduces to the baseline update
    zero = np.zeros((d, d))
    np.testing.assert_array_equal(dikelab.dike_update(w, k, v, c0, zero), memit)

    # identity projection halves the increment
    eye = np.eye(d)
    np.testing.assert_allclose(dikelab.dike_update(w, k, v, c0, eye), w + (memit - w) / 2,
                               rtol=1e-12)

    # the constrained update does not increase the four-term objective
    w3 = rng.normal(size=(d, d)) * 0.4
    v0 = w @ k
    v0_set = w @ k0
    at_w = dikelab.evaluate_objective(w, k, v, v0, k0, v0_set, w3)
    at_hat = dikelab.evaluate_objective(dikelab.dike_update(w, k, v, c0, w3), k, v, v0, k0,
                                        v0_set, w3)
    assert at_hat <= at_w


def test_world_generation_is_deterministic():
    a = dikelab.world_summary(seed=3, subjects=16, relations=10, objects_per_relation=4)
    b = dikelab.world_summary(seed=3, subjects=16, relations=10, objects_per_relation=4)
    assert a == b
    assert a["n_triples"] >= 16 * 10
    c = dikelab.world_summary(seed=4, subjects=16, relations=10, objects_per_relation=4)
    assert c["hash"] != a["hash"]

    with pytest.raises(dikelab.DikeError):
        dikelab.world_summary(relations=9)  # below the per-subject minimum
