"""Source-count detection by scanning lasso knots.

Three entry points mirror the three measurement models:

* :func:`detect_orthogonal` scans the closed-form knots upward from the
  smallest one (tests cov-exact, cov-asymp, A, B, C) and stops at the first
  knot whose statistic reaches its threshold.
* :func:`detect_general` walks the lasso path of a fat steering matrix from
  the largest knot and stops at the first knot that does not reach its
  Test-D threshold.
* :func:`detect_grid_matching` does the same on the group-lasso path of the
  grid-matching model with Test-E and then recovers the angular offsets.

Amplitudes are read from the path at the knot just below the last detected
entry, where the estimate has exactly ``s_hat`` nonzero coefficients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TOL
from .group_lasso_path import iter_group_knots
from .lasso_path import ContractViolation, iter_general_knots, orthogonal_knots
from .signal_model import ArrayModel, Scenario
from .stat_tests import (
    TestKind,
    estimate_sigma2,
    stat_A,
    stat_B,
    stat_C,
    stat_cov,
    stat_D,
)
from .thresholds import ThresholdTable, build_table

__all__ = [
    "DetectionResult",
    "Score",
    "TraceEntry",
    "detect",
    "detect_general",
    "detect_grid_matching",
    "detect_orthogonal",
    "recover_offsets",
    "score",
]


@dataclass(frozen=True)
class TraceEntry:
    k: int
    statistic: float
    threshold: float
    reject: bool


@dataclass(frozen=True, eq=False)
class DetectionResult:
    s_hat: int
    tau_hat: float
    support: tuple
    angles: np.ndarray
    offsets: np.ndarray
    amplitudes: np.ndarray
    test_used: TestKind
    trace: tuple
    entry_order: tuple = ()
    offset_defined: tuple = ()
    sigma2: float | None = None

    def to_dict(self) -> dict:
        return {
            "s_hat": self.s_hat,
            "tau_hat": self.tau_hat,
            "support": list(self.support),
            "angles": [float(a) for a in self.angles],
            "offsets": [None if not math.isfinite(p) else float(p) for p in self.offsets],
            "offset_defined": list(self.offset_defined),
            "amplitudes": [[float(v.real), float(v.imag)] for v in self.amplitudes],
            "test_used": self.test_used.value,
            "sigma2": self.sigma2,
            "entry_order": list(self.entry_order),
            "trace": [asdict(t) for t in self.trace],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _sigma2(sigma2, path=None) -> float:
    if isinstance(sigma2, str):
        if sigma2 != "estimate":
            raise ContractViolation("sigma2 must be a number or 'estimate'")
        if path is None:
            raise ContractViolation("noise estimation needs an orthogonal path")
        return estimate_sigma2(path)
    if sigma2 is None or not float(sigma2) > 0:
        raise ContractViolation("this test needs a positive noise variance")
    return float(sigma2)


def _table(table, test, model, pc, sigma_known=True) -> ThresholdTable:
    if table is not None:
        if table.test is not test or table.pc != pc:
            raise ContractViolation("threshold table does not match the requested test")
        return table
    return build_table(test, model, pc, sigma_known=sigma_known)


def _refit(A, b, support):
    if not support:
        return np.zeros(0, dtype=complex)
    coef, *_ = np.linalg.lstsq(A[:, list(support)], b, rcond=None)
    return coef


# ---------------------------------------------------------------------------
# Algorithm 1: orthogonal model


def detect_orthogonal(
    model: ArrayModel,
    b,
    test="B",
    pc: float = 0.99,
    sigma2=None,
    table: ThresholdTable | None = None,
    refit: bool = False,
) -> DetectionResult:
    """Detect sources with an orthogonal steering matrix.

    Knot ``k`` is tested under the null that knots ``k..M`` are noise
    (``n = M - k + 1``), starting from ``k = M`` and moving to larger knots.
    The first knot whose statistic reaches its threshold fixes ``s_hat = k``;
    when none does, ``s_hat = 0``. Test-C uses ``sigma2_hat`` from
    :func:`knotdoa.stat_tests.estimate_sigma2` and cannot test the last knot.

    Parameters
    ----------
    sigma2 : float or "estimate"
        Per-element complex noise variance; ignored by Test-C.
    """
    test = TestKind.parse(test)
    if test.model_kind != "orthogonal":
        raise ContractViolation(f"test {test.value} is not an orthogonal-model test")
    b = np.asarray(b, dtype=complex)
    path = orthogonal_knots(model, b)
    M = model.M
    taus = path.taus
    s2 = None
    if test is TestKind.C:
        s2_hat = estimate_sigma2(path)
        last = M - 1
    else:
        s2 = _sigma2(sigma2, path)
        last = M
    tab = _table(table, test, model, pc, sigma_known=test is not TestKind.C)
    trace = []
    s_hat = 0
    for k in range(last, 0, -1):
        if test is TestKind.A:
            st = stat_A(taus, k, s2)
        elif test is TestKind.B:
            st = stat_B(taus, k, s2)
        elif test is TestKind.C:
            st = stat_C(taus, k, s2_hat) if s2_hat > 0 else math.inf
        else:
            st = stat_cov(taus, k, s2)
        eta = tab.eta(k)
        reject = st >= eta
        trace.append(TraceEntry(k, float(st), float(eta), bool(reject)))
        if reject:
            s_hat = k
            break
    order = path.entry_order()
    support = tuple(order[:s_hat])
    if s_hat == 0:
        amps = np.zeros(0, dtype=complex)
    elif refit:
        amps = _refit(model.A, b, support)
    else:
        below = taus[s_hat] if s_hat < M else 0.0
        c = model.A.conj().T @ b
        amps = np.array([(abs(c[j]) - below) * c[j] / abs(c[j]) for j in support])
    tau_hat = float(taus[s_hat - 1]) if s_hat else float(taus[0])
    return DetectionResult(
        s_hat, tau_hat, support, model.grid[list(support)], np.zeros(0), amps, test,
        tuple(trace), tuple(order), (), s2,
    )


# ---------------------------------------------------------------------------
# Algorithms 2 and 3: forward scans


def _forward(knots, tab, sigma2, stop_after):
    """Walk growth knots from the largest; return (s_hat, trace, seen)."""
    trace, seen = [], []
    s_hat = None
    for kn in knots:
        if kn.removed:
            continue
        seen.append(kn)
        k = len(seen)
        if s_hat is None:
            before = tuple(j for j in kn_active(kn) if j != kn_entering(kn))
            st = stat_D(kn.tau, sigma2)
            eta = tab.eta(k, before)
            reject = st >= eta
            trace.append(TraceEntry(k, float(st), float(eta), bool(reject)))
            if not reject:
                s_hat = k - 1
        if s_hat is not None and len(seen) >= max(s_hat + 1, stop_after):
            break
    if s_hat is None:
        s_hat = len(seen)
    return s_hat, trace, seen


def kn_active(kn):
    return kn.active_set if hasattr(kn, "active_set") else kn.active_groups


def kn_entering(kn):
    return kn.entering_index if hasattr(kn, "entering_index") else kn.entering_group


def _upward(knots, tab, sigma2, M):
    seen = [kn for kn in knots if not kn.removed]
    trace = []
    s_hat = 0
    for k in range(len(seen), 0, -1):
        kn = seen[k - 1]
        before = tuple(j for j in kn_active(kn) if j != kn_entering(kn))
        st = stat_D(kn.tau, sigma2)
        eta = tab.eta(k, before)
        reject = st >= eta
        trace.append(TraceEntry(k, float(st), float(eta), bool(reject)))
        if reject:
            s_hat = k
            break
    return s_hat, trace, seen


def detect_general(
    model: ArrayModel,
    b,
    test="D",
    pc: float = 0.99,
    sigma2=None,
    table: ThresholdTable | None = None,
    scan: str = "forward",
    refit: bool = False,
    min_knots: int = 0,
) -> DetectionResult:
    """Detect sources with a fat steering matrix and Test-D.

    ``scan="forward"`` (default) tests knots from the largest and stops at
    the first statistic below its threshold, ``s_hat = k - 1``.
    ``scan="upward"`` computes the whole path and scans from the smallest
    knot like :func:`detect_orthogonal`. ``min_knots`` extends the computed
    path (for scoring event B) without changing the decision.
    """
    test = TestKind.parse(test)
    if test is not TestKind.D:
        raise ContractViolation("detect_general supports Test-D only")
    b = np.asarray(b, dtype=complex)
    s2 = _sigma2(sigma2)
    tab = _table(table, test, model, pc)
    M = model.M
    knots = iter_general_knots(model, b, M)
    if scan == "forward":
        s_hat, trace, seen = _forward(knots, tab, s2, min_knots)
    elif scan == "upward":
        s_hat, trace, seen = _upward(knots, tab, s2, M)
    else:
        raise ContractViolation("scan must be 'forward' or 'upward'")
    order = tuple(kn.entering_index for kn in seen)
    support = tuple(order[:s_hat])
    if s_hat and (refit or s_hat >= len(seen)):
        amps = _refit(model.A, b, support)
    elif s_hat:
        amps = np.asarray(seen[s_hat].solution)[list(support)]
    else:
        amps = np.zeros(0, dtype=complex)
    tau_hat = float(seen[s_hat - 1].tau) if s_hat else (float(seen[0].tau) if seen else 0.0)
    return DetectionResult(
        s_hat, tau_hat, support, model.grid[list(support)], np.zeros(0), amps, test,
        tuple(trace), order, (), s2,
    )


def recover_offsets(group_solution: dict, model: ArrayModel, tol=TOL):
    """Offsets ``p_g = Im(y_g2 / y_g1) / (2 pi spacing cos rho_g)``.

    Returns ``(groups, offsets, defined)`` with groups in increasing order.
    An offset is undefined (NaN) when ``|y_g1|`` is below ``offset_floor``
    or the grid point is at endfire (``cos rho_g`` numerically zero).
    Defined offsets are clamped to half a bin.
    """
    groups = sorted(group_solution)
    half = 0.5 * model.cfg.bin_width
    out = np.full(len(groups), np.nan)
    ok = []
    for i, g in enumerate(groups):
        y1, y2 = np.asarray(group_solution[g], dtype=complex)
        cosr = math.cos(model.grid[g])
        if abs(y1) < tol.offset_floor or abs(cosr) < 1e-12:
            ok.append(False)
            continue
        c = y2 / y1
        out[i] = float(np.clip(c.imag / (2 * math.pi * model.cfg.spacing * cosr), -half, half))
        ok.append(True)
    return groups, out, tuple(ok)


def detect_grid_matching(
    model: ArrayModel,
    b,
    test="E",
    pc: float = 0.99,
    sigma2=None,
    table: ThresholdTable | None = None,
    scan: str = "forward",
    refit: bool = False,
    min_knots: int = 0,
    matched: bool = False,
) -> DetectionResult:
    """Detect off-grid sources with the grid-matching model and Test-E.

    ``b`` is the array measurement; the group lasso runs on ``A^H b``. Pass
    ``matched=True`` when ``b`` already is the matched-filter output. After
    the scan the group estimate at the knot below the last detection (or its
    least-squares refit) gives the amplitudes and, through
    :func:`recover_offsets`, the offsets.
    """
    test = TestKind.parse(test)
    if test is not TestKind.E:
        raise ContractViolation("detect_grid_matching supports Test-E only")
    if model.G is None:
        raise ContractViolation("grid matching needs the orthogonal model")
    b = np.asarray(b, dtype=complex)
    b_bar = b if matched else model.A.conj().T @ b
    s2 = _sigma2(sigma2)
    tab = _table(table, test, model, pc)
    N = model.N
    knots = iter_group_knots(model, b_bar, N)
    if scan == "forward":
        s_hat, trace, seen = _forward(knots, tab, s2, min_knots)
    elif scan == "upward":
        s_hat, trace, seen = _upward(knots, tab, s2, N)
    else:
        raise ContractViolation("scan must be 'forward' or 'upward'")
    order = tuple(kn.entering_group for kn in seen)
    support = tuple(order[:s_hat])
    if s_hat and (refit or s_hat >= len(seen)):
        cols = list(support) + [N + g for g in support]
        coef, *_ = np.linalg.lstsq(model.P[:, cols], b_bar, rcond=None)
        sol = {g: np.array([coef[i], coef[s_hat + i]]) for i, g in enumerate(support)}
    elif s_hat:
        sol = {g: seen[s_hat].solution.get(g, np.zeros(2, dtype=complex)) for g in support}
    else:
        sol = {}
    groups, offs, ok = recover_offsets(sol, model)
    pos = {g: i for i, g in enumerate(groups)}
    offsets = np.array([offs[pos[g]] for g in support])
    defined = tuple(ok[pos[g]] for g in support)
    amps = np.array([sol[g][0] for g in support], dtype=complex)
    angles = model.grid[list(support)] + np.where(np.isfinite(offsets), offsets, 0.0)
    tau_hat = float(seen[s_hat - 1].tau) if s_hat else (float(seen[0].tau) if seen else 0.0)
    return DetectionResult(
        s_hat, tau_hat, support, angles, offsets, amps, test, tuple(trace), order, defined, s2,
    )


def detect(model: ArrayModel, b, test, pc: float = 0.99, sigma2=None, **kw) -> DetectionResult:
    """Dispatch to the detector matching ``test``."""
    test = TestKind.parse(test)
    if test is TestKind.D:
        return detect_general(model, b, test, pc, sigma2, **kw)
    if test is TestKind.E:
        return detect_grid_matching(model, b, test, pc, sigma2, **kw)
    kw.pop("scan", None)
    kw.pop("min_knots", None)
    return detect_orthogonal(model, b, test, pc, sigma2, **kw)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class Score:
    outcome: str  # "correct" | "miss" | "false_alarm"
    event_b: bool


def score(result: DetectionResult, scenario: Scenario) -> Score:
    """Classify a detection against the ground truth.

    ``correct``: the detected support equals the true one. ``miss``: fewer
    detections than sources, all of them true. Everything else is a false
    alarm. Event B holds when the first ``S`` entries of the path are the
    true sources.
    """
    truth = set(scenario.source_indices)
    S = len(truth)
    det = set(result.support)
    if result.s_hat == S and det == truth:
        outcome = "correct"
    elif result.s_hat < S and det <= truth:
        outcome = "miss"
    else:
        outcome = "false_alarm"
    first = result.entry_order[:S]
    event_b = len(first) == S and set(first) == truth
    return Score(outcome, event_b)
