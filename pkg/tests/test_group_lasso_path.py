import numpy as np
import pytest

from knotdoa.detector import recover_offsets
from knotdoa.group_lasso_path import (
    duality_gap,
    group_index,
    group_kkt_residual,
    group_knots,
    group_solve_at,
    _dense,
)
from knotdoa.lasso_path import ContractViolation
from knotdoa.signal_model import Scenario, source_signal

from conftest import crandn


def test_group_index():
    assert group_index(3).tolist() == [[0, 3], [1, 4], [2, 5]]


def test_first_knot_is_max_group_norm(orth, rng):
    bb = crandn(rng, 8)
    z = orth.P.conj().T @ bb
    ks = group_knots(orth, bb, 1)
    assert ks[0].tau == pytest.approx(np.max(np.hypot(np.abs(z[:8]), np.abs(z[8:]))))


def test_path_against_bcd_oracle(orth, rng):
    for _ in range(4):
        bb = crandn(rng, 8)
        ks = group_knots(orth, bb, 5)
        taus = [k.tau for k in ks]
        assert all(a > b for a, b in zip(taus, taus[1:]))
        for k in range(len(ks) - 1):
            mid = 0.5 * (taus[k] + taus[k + 1])
            sol = group_solve_at(orth, bb, mid)
            assert group_kkt_residual(orth, bb, sol, mid) < 1e-7
            assert duality_gap(orth.P, bb, _dense(sol, 8), mid) < 1e-9
            assert set(sol) == set(ks[k].active_groups)


def test_knot_solutions_satisfy_kkt(orth, rng):
    bb = crandn(rng, 8)
    for kn in group_knots(orth, bb, 4):
        assert group_kkt_residual(orth, bb, kn.solution, kn.tau) < 1e-7


def _ls_offset(model, p):
    sc = Scenario.equal_power((4,), 40.0, offsets=p)
    bb = model.A.conj().T @ source_signal(model, sc)
    coef = np.linalg.lstsq(model.P[:, [4, 12]], bb, rcond=None)[0]
    _, off, ok = recover_offsets({4: coef}, model)
    assert ok == (True,)
    return off[0], bb


def test_noiseless_offset_bias_vanishes_quadratically(orth):
    # the relative bias of the first-order model is O(p^2)
    rel = [abs(_ls_offset(orth, p)[0] / p - 1) for p in (0.005, 0.01, 0.02)]
    assert rel[0] < 0.005
    assert rel[1] / rel[0] == pytest.approx(4.0, rel=0.1)
    assert rel[2] / rel[1] == pytest.approx(4.0, rel=0.1)


def test_noiseless_offset_source_enters_first(orth):
    p = 0.24 * orth.cfg.bin_width
    _, bb = _ls_offset(orth, p)
    assert group_knots(orth, bb, 1)[0].entering_group == 4


@pytest.mark.xfail(strict=True, reason="first-order bias at 0.24 bin (pi/8 rad) is about 50%, not under 10%")
def test_noiseless_offset_within_ten_percent_at_quarter_bin(orth):
    p = 0.24 * orth.cfg.bin_width
    off, _ = _ls_offset(orth, p)
    assert abs(off - p) < 0.1 * p


def test_operator_contract(over, rng):
    with pytest.raises(ContractViolation):
        group_knots(over, crandn(rng, 16))
    with pytest.raises(ContractViolation):
        group_knots(np.ones((3, 5)), crandn(rng, 3))


def test_solve_above_first_knot_empty(orth, rng):
    bb = crandn(rng, 8)
    t1 = group_knots(orth, bb, 1)[0].tau
    assert group_solve_at(orth, bb, 1.001 * t1) == {}
