import math

import numpy as np
import pytest

from knotdoa.signal_model import (
    ArrayConfig,
    InvalidConfigError,
    Scenario,
    Snapshot,
    build_array_model,
    complex_normal,
    orthogonal_grid,
    oversampled_grid,
    source_signal,
    steering,
    steering_derivative,
    synthesize,
    taylor_residual,
)


def test_orthogonal_steering_is_unitary(orth):
    A = orth.A
    assert np.allclose(A.conj().T @ A, np.eye(8), atol=1e-13)
    assert np.allclose(A @ A.conj().T, np.eye(8), atol=1e-13)


def test_orthogonal_grid_sines():
    cfg = ArrayConfig(8, 8)
    k = np.arange(1, 9)
    assert np.allclose(np.sin(orthogonal_grid(cfg)), (2 * k - 9) / 8.0)


def test_oversampled_grid_is_uniform_in_sine():
    s = np.sin(oversampled_grid(ArrayConfig(8, 16)))
    assert np.allclose(np.diff(s), 2.0 / 16)
    assert s[0] == pytest.approx(-1 + 1 / 16)


def test_unit_norm_columns(over):
    assert np.allclose(np.linalg.norm(over.A, axis=0), 1.0)


def test_G_matches_definition(orth):
    D = np.diag(np.arange(8.0))
    assert np.allclose(orth.G, orth.A.conj().T @ D @ orth.A)
    assert np.allclose(orth.G, orth.G.conj().T)
    assert np.allclose(orth.P[:, :8], np.eye(8))


def test_derivative_identity(orth):
    # A1 = D A diag(c / p): derivative of the Vandermonde column
    cfg = orth.cfg
    fd = (steering(cfg, orth.grid + 1e-6) - steering(cfg, orth.grid - 1e-6)) / 2e-6
    assert np.allclose(fd, orth.A1, atol=1e-7)
    assert np.allclose(orth.A1, orth.D @ orth.A * orth.c_factor()[None, :])


def test_steering_derivative_shape():
    cfg = ArrayConfig(4, 4)
    assert steering_derivative(cfg, [0.1, 0.2]).shape == (4, 2)


@pytest.mark.parametrize(
    "kw",
    [dict(num_elements=1, num_grid=8), dict(num_elements=8, num_grid=4), dict(num_elements=8, num_grid=8, spacing=0)],
)
def test_invalid_config(kw):
    with pytest.raises(InvalidConfigError):
        ArrayConfig(**kw)


def test_orthogonal_mode_needs_square():
    with pytest.raises(InvalidConfigError):
        build_array_model(ArrayConfig(8, 16), "orthogonal")


def test_scenario_validation():
    with pytest.raises(InvalidConfigError):
        Scenario((3, 1), (0.5**0.5, 0.5**0.5), 10.0)
    with pytest.raises(InvalidConfigError):
        Scenario((1,), (0.5,), 10.0)
    sc = Scenario.equal_power((1, 4), 20.0, phases=[0.0, 1.0])
    assert sum(abs(w) ** 2 for w in sc.weights) == pytest.approx(1.0)
    assert Scenario.from_dict(sc.to_dict()) == sc


def test_noise_variance_matches_snr():
    sc = Scenario.equal_power((2,), 10.0)
    assert sc.noise_variance == pytest.approx(0.1)


def test_empirical_snr(orth):
    sc = Scenario.equal_power((2, 5), 7.0)
    rng = np.random.default_rng(0)
    v = complex_normal(rng, (200_000, orth.M), sc.noise_variance)
    assert np.mean(np.abs(v) ** 2) == pytest.approx(sc.noise_variance, rel=0.01)


def test_synthesize_deterministic(orth):
    sc = Scenario.equal_power((4,), 10.0)
    a, b = synthesize(orth, sc, 7), synthesize(orth, sc, 7)
    assert np.array_equal(a.b, b.b)
    assert not np.array_equal(a.b, synthesize(orth, sc, 8).b)
    assert np.allclose(a.b_bar, orth.A.conj().T @ a.b)


def test_noiseless_on_grid(orth):
    sc = Scenario.equal_power((4,), 10.0)
    snap = synthesize(orth, sc, 0, noiseless=True)
    assert np.allclose(snap.b, orth.A[:, 4])


def test_snapshot_roundtrip(orth):
    snap = synthesize(orth, Scenario.equal_power((4,), 10.0), 3)
    back = Snapshot.from_dict(snap.to_dict(), orth)
    assert np.allclose(back.b, snap.b) and np.allclose(back.b_bar, snap.b_bar)


def test_taylor_residual_second_order(orth):
    r1 = taylor_residual(orth, Scenario.equal_power((4,), 10.0, offsets=1e-3))
    r2 = taylor_residual(orth, Scenario.equal_power((4,), 10.0, offsets=2e-3))
    assert r2 / r1 == pytest.approx(4.0, rel=0.01)
    assert taylor_residual(orth, Scenario.equal_power((4,), 10.0)) == 0.0


def test_source_signal_offsets(orth):
    p = 0.05
    sc = Scenario.equal_power((3,), 10.0, offsets=p)
    assert np.allclose(source_signal(orth, sc), steering(orth.cfg, orth.grid[3] + p)[:, 0])
    assert orth.cfg.bin_width == pytest.approx(math.pi / 8)
