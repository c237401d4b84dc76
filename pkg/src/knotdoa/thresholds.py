"""Thresholds from CDF inversion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .config import TOL
from .lasso_path import ContractViolation
from .stat_tests import NullContext, NumericError, TestKind, cdf_for, testD_eigenvalues, testE_eigen_pairs

__all__ = ["ThresholdTable", "build_table", "invert_cdf", "threshold_for"]


def invert_cdf(cdf: Callable[[float], float], pc: float, tol=TOL) -> float:
    """Smallest ``eta`` with ``cdf(eta) = pc``, by bracketing and bisection.

    The upper end starts at 1 and doubles until ``cdf(hi) > pc``. Bisection
    stops once the bracket is narrower than ``invert_xtol`` or the CDF is
    within ``invert_ftol`` of ``pc``.

    Raises
    ------
    NumericError
        If the CDF does not reach ``pc`` within ``invert_max_doublings`` doublings.
    """
    if not 0.0 < pc < 1.0:
        raise ContractViolation("pc must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    for _ in range(tol.invert_max_doublings):
        if cdf(hi) > pc:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise NumericError(f"CDF never exceeded pc={pc}")
    while hi - lo > tol.invert_xtol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        f = cdf(mid) - pc
        if abs(f) <= tol.invert_ftol:
            return mid
        if f < 0:
            lo = mid
        else:
            hi = mid
    # the bracket is tiny; return the end closer in CDF value
    return lo if abs(cdf(lo) - pc) <= abs(cdf(hi) - pc) else hi


@dataclass
class ThresholdTable:
    """Thresholds of one test at one target ``pc``.

    ``entries`` maps ``(k, context_key)`` to ``eta``. Tests A, B, C and the
    covariance tests are filled up front for every scan position; Test-D and
    Test-E depend on the realised active set and are added lazily by
    :meth:`eta` (memoised per key for the lifetime of the table).

    A Test-D/E knot whose residual space is empty (no eigenvalue above the
    cutoff) has a null statistic fixed at zero and cannot be tested;
    :meth:`eta` returns ``inf`` for it and stores nothing, so scans stop there.
    """

    test: TestKind
    pc: float
    M: int
    model: object = None
    entries: dict = field(default_factory=dict)
    contexts: dict = field(default_factory=dict)

    def _store(self, k: int, ctx: NullContext) -> float:
        key = (k, ctx.key())
        if key not in self.entries:
            self.entries[key] = invert_cdf(cdf_for(self.test, ctx), self.pc)
            self.contexts[key] = ctx
        return self.entries[key]

    def context(self, k: int, active=()) -> NullContext:
        """Null context at knot ``k`` (1-based) with ``active`` entered before it."""
        n = self.M - k + 1
        if self.test is TestKind.D:
            return NullContext(n, eigen_rho=tuple(testD_eigenvalues(self.model, active)))
        if self.test is TestKind.E:
            return NullContext(n, eigen_pairs=tuple(testE_eigen_pairs(self.model, active)))
        return NullContext(n)

    def eta(self, k: int, active=()) -> float:
        ctx = self.context(k, tuple(active))
        if _untestable(ctx, self.test):
            return math.inf
        return self._store(k, ctx)

    def rows(self):
        """``(k, n, eta)`` for the stored entries, by knot index."""
        out = [(k, self.contexts[(k, ck)].n, eta) for (k, ck), eta in self.entries.items()]
        return sorted(out)


def _untestable(ctx: NullContext, test: TestKind) -> bool:
    if test is TestKind.D:
        return max(ctx.eigen_rho, default=0.0) <= TOL.eig_cutoff
    if test is TestKind.E:
        return max((r for r, _ in ctx.eigen_pairs), default=0.0) <= TOL.eig_cutoff
    return False


def build_table(test, model, pc: float, sigma_known: bool = True, M: int | None = None) -> ThresholdTable:
    """Threshold table for ``test`` on ``model`` at target ``pc``.

    Parameters
    ----------
    test : TestKind or str
    model : ArrayModel or None
        Needed for Test-D (general model) and Test-E (grid-matching model).
        Without a model, ``M`` must be given.
    pc : float
        Target probability of correct detection.
    sigma_known : bool
        Must be False only for Test-C, which estimates the noise variance.
    """
    test = TestKind.parse(test)
    if test.needs_sigma and not sigma_known:
        raise ContractViolation(f"test {test.value} needs a known noise variance")
    if model is not None:
        kind = "orthogonal" if getattr(model, "is_orthogonal", False) else "general"
        if test is TestKind.E and getattr(model, "G", None) is None:
            raise ContractViolation("Test-E needs the orthogonal grid-matching model")
        if test.model_kind == "orthogonal" and kind != "orthogonal":
            raise ContractViolation(f"test {test.value} needs an orthogonal model")
        M = model.M if test is not TestKind.E else model.N
    if M is None:
        raise ContractViolation("give a model or M")
    if test in (TestKind.D, TestKind.E) and model is None:
        raise ContractViolation(f"test {test.value} needs a model for its eigenvalues")
    table = ThresholdTable(test, float(pc), int(M), model)
    if test not in (TestKind.D, TestKind.E):
        last = M - 1 if test is TestKind.C else M
        for k in range(1, last + 1):
            table.eta(k)
    return table


def threshold_for(test, pc: float, n: int) -> float:
    """Threshold with ``n`` hypothesised noise knots and unit eigenvalues.

    For Test-D and Test-E this is the orthogonal, fully decorrelated limit.
    """
    test = TestKind.parse(test)
    return invert_cdf(cdf_for(test, NullContext(n)), pc)
