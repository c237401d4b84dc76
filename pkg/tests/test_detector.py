import json
import math

import numpy as np
import pytest

from knotdoa.detector import (
    DetectionResult,
    detect,
    detect_general,
    detect_grid_matching,
    detect_orthogonal,
    recover_offsets,
    score,
)
from knotdoa.lasso_path import ContractViolation, orthogonal_knots
from knotdoa.signal_model import Scenario, complex_normal, source_signal, synthesize
from knotdoa.stat_tests import TestKind
from knotdoa.thresholds import build_table

SMALL = 1e-6


@pytest.mark.parametrize("test", ["cov-exact", "cov-asymp", "A", "B"])
def test_noiseless_single_source_orthogonal(orth, test):
    sc = Scenario.equal_power((4,), 30.0)
    b = synthesize(orth, sc, 0, noiseless=True).b
    res = detect_orthogonal(orth, b, test, 0.99, SMALL)
    assert res.s_hat == 1 and res.support == (4,)
    assert score(res, sc).outcome == "correct"


def test_orthogonal_scan_order_and_trace(orth):
    sc = Scenario.equal_power((2, 5), 30.0, phases=[0.0, 1.0])
    rng = np.random.default_rng(1)
    b = source_signal(orth, sc) + complex_normal(rng, 8, sc.noise_variance)
    res = detect_orthogonal(orth, b, "B", 0.99, sc.noise_variance)
    ks = [t.k for t in res.trace]
    assert ks == list(range(8, 8 - len(ks), -1))
    assert res.trace[-1].reject and not any(t.reject for t in res.trace[:-1])
    assert res.s_hat == 2 and set(res.support) == {2, 5}


def test_orthogonal_amplitudes(orth):
    sc = Scenario.equal_power((2, 5), 30.0, phases=[0.3, 2.0])
    rng = np.random.default_rng(2)
    b = source_signal(orth, sc) + complex_normal(rng, 8, sc.noise_variance)
    res = detect_orthogonal(orth, b, "B", 0.99, sc.noise_variance)
    c = orth.A.conj().T @ b
    taus = orthogonal_knots(orth, b).taus
    for j, a in zip(res.support, res.amplitudes):
        assert a == pytest.approx((abs(c[j]) - taus[2]) * c[j] / abs(c[j]))
    refit = detect_orthogonal(orth, b, "B", 0.99, sc.noise_variance, refit=True)
    assert np.allclose(refit.amplitudes, c[list(refit.support)])
    assert res.tau_hat == pytest.approx(taus[1])


def test_test_C_estimates_noise(orth):
    sc = Scenario.equal_power((4,), 40.0)
    rng = np.random.default_rng(3)
    b = source_signal(orth, sc) + complex_normal(rng, 8, sc.noise_variance)
    res = detect_orthogonal(orth, b, "C", 0.99, "estimate")
    assert res.trace[0].k == 7
    assert res.s_hat >= 1


def test_noise_only_usually_zero(orth):
    rng = np.random.default_rng(4)
    tab = build_table("B", orth, 0.99)
    zeros = sum(detect_orthogonal(orth, complex_normal(rng, 8, 1.0), "B", 0.99, 1.0, table=tab).s_hat == 0
                for _ in range(400))
    assert zeros >= 380


def test_sigma_contract(orth):
    with pytest.raises(ContractViolation):
        detect_orthogonal(orth, np.ones(8), "B", 0.99, None)
    with pytest.raises(ContractViolation):
        detect_orthogonal(orth, np.ones(8), "D", 0.99, 1.0)
    with pytest.raises(ContractViolation):
        detect_orthogonal(orth, np.ones(8), "B", 0.99, 1.0, table=build_table("A", orth, 0.99))


def test_general_noiseless(over):
    sc = Scenario.equal_power((8,), 30.0)
    b = synthesize(over, sc, 0, noiseless=True).b
    res = detect_general(over, b, "D", 0.99, SMALL)
    assert res.s_hat == 1 and res.support == (8,)
    up = detect_general(over, b, "D", 0.99, SMALL, scan="upward")
    assert up.s_hat >= 1


def test_general_min_knots_extends_path_only(over):
    sc = Scenario.equal_power((6, 9), 25.0, phases=[0.0, 2.0])
    rng = np.random.default_rng(6)
    b = source_signal(over, sc) + complex_normal(rng, 8, sc.noise_variance)
    a = detect_general(over, b, "D", 0.99, sc.noise_variance)
    c = detect_general(over, b, "D", 0.99, sc.noise_variance, min_knots=4)
    assert a.s_hat == c.s_hat and a.support == c.support
    assert len(c.entry_order) >= 4


def test_grid_matching_result_shapes(orth):
    sc = Scenario.equal_power((4,), 30.0, offsets=0.02)
    rng = np.random.default_rng(7)
    b = source_signal(orth, sc) + complex_normal(rng, 8, sc.noise_variance)
    res = detect_grid_matching(orth, b, "E", 0.99, sc.noise_variance, refit=True)
    assert res.entry_order[0] == 4
    assert len(res.offsets) == len(res.support) == len(res.offset_defined) == res.s_hat
    bb = orth.A.conj().T @ b
    same = detect_grid_matching(orth, bb, "E", 0.99, sc.noise_variance, refit=True, matched=True)
    assert same.support == res.support


def test_recover_offsets_exact_model(orth):
    # data from the first-order model itself: offsets come back exactly
    p = 0.03
    c = orth.c_factor()[3] * p
    y = {3: np.array([0.8, 0.8 * c])}
    groups, off, ok = recover_offsets(y, orth)
    assert groups == [3] and ok == (True,)
    assert off[0] == pytest.approx(p)
    _, off, ok = recover_offsets({3: np.array([0.0, 1.0])}, orth)
    assert ok == (False,) and math.isnan(off[0])


def test_recover_offsets_clamped(orth):
    _, off, _ = recover_offsets({3: np.array([1.0, 10j])}, orth)
    assert off[0] == pytest.approx(orth.cfg.bin_width / 2)


def test_dispatch(orth, over):
    b = synthesize(orth, Scenario.equal_power((4,), 30.0), 0, noiseless=True).b
    assert detect(orth, b, "A", 0.99, SMALL).test_used is TestKind.A
    with pytest.raises(ContractViolation):
        detect(over, np.ones(8), "B", 0.99, 1.0)


def _result(s_hat, support, order):
    return DetectionResult(s_hat, 1.0, tuple(support), np.zeros(len(support)), np.zeros(0),
                           np.zeros(len(support)), TestKind.B, (), tuple(order))


def test_score_outcomes():
    sc = Scenario.equal_power((2, 5), 10.0)
    assert score(_result(2, (5, 2), (5, 2, 1)), sc).outcome == "correct"
    assert score(_result(1, (5,), (5, 2)), sc).outcome == "miss"
    assert score(_result(0, (), (1, 2)), sc).outcome == "miss"
    assert score(_result(1, (1,), (1, 2)), sc).outcome == "false_alarm"
    assert score(_result(3, (5, 2, 1), (5, 2, 1)), sc).outcome == "false_alarm"
    assert score(_result(2, (5, 1), (5, 1, 2)), sc).outcome == "false_alarm"
    assert score(_result(1, (5,), (5, 2)), sc).event_b
    assert not score(_result(1, (5,), (5, 1, 2)), sc).event_b


def test_result_json(orth):
    b = synthesize(orth, Scenario.equal_power((4,), 30.0), 0, noiseless=True).b
    d = json.loads(detect(orth, b, "B", 0.99, SMALL).to_json())
    assert d["s_hat"] == 1 and d["support"] == [4] and d["test_used"] == "B"
    assert len(d["amplitudes"]) == 1
