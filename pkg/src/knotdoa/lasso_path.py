"""Knots of the complex lasso path ``min 0.5||b - Ax||^2 + tau ||x||_1``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._pathcore import GroupHomotopy, SolverFailure, kkt_residual
from .config import TOL
from .signal_model import ArrayModel

__all__ = [
    "ContractViolation",
    "Knot",
    "KnotPath",
    "SolverFailure",
    "general_knots",
    "iter_general_knots",
    "lasso_solve_at",
    "orthogonal_knots",
]


class ContractViolation(ValueError):
    """Input does not satisfy an operation's precondition."""


@dataclass(frozen=True, eq=False)
class Knot:
    tau: float
    entering_index: int
    active_set: tuple[int, ...]
    solution: np.ndarray
    lambda_candidates: dict = field(default_factory=dict)
    removed: bool = False


@dataclass(frozen=True, eq=False)
class KnotPath:
    knots: list
    model_kind: str
    A: np.ndarray
    b: np.ndarray

    @property
    def taus(self) -> np.ndarray:
        return np.array([k.tau for k in self.knots])

    def growth_knots(self) -> list:
        """Knots where the active set grows; the tests only look at these."""
        return [k for k in self.knots if not k.removed]

    def entry_order(self) -> list:
        return [k.entering_index for k in self.growth_knots()]

    def __len__(self):
        return len(self.knots)


def _soft(c: np.ndarray, tau: float) -> np.ndarray:
    mag = np.abs(c)
    out = np.zeros_like(c)
    keep = mag > tau
    out[keep] = (mag[keep] - tau) * c[keep] / mag[keep]
    return out


def _check_orthogonal(A: np.ndarray):
    n = A.shape[1]
    if A.shape[0] != n or np.max(np.abs(A.conj().T @ A - np.eye(n))) > 1e-10:
        raise ContractViolation("orthogonal_knots needs A^H A = I")


def _design(model_or_A) -> np.ndarray:
    return model_or_A.A if isinstance(model_or_A, ArrayModel) else np.asarray(model_or_A)


def orthogonal_knots(model, b) -> KnotPath:
    """Closed-form path for ``A^H A = I``: knots are the sorted ``|A^H b|``."""
    A = _design(model)
    _check_orthogonal(A)
    b = np.asarray(b, dtype=complex)
    c = A.conj().T @ b
    mag = np.abs(c)
    order = np.argsort(-mag, kind="stable")
    knots = []
    for k, j in enumerate(order):
        tau = float(mag[j])
        x = np.zeros_like(c)
        prev = order[:k]
        x[prev] = (mag[prev] - tau) * c[prev] / mag[prev]
        cand = {int(i): float(mag[i]) for i in order[k + 1 :]}
        knots.append(Knot(tau, int(j), tuple(int(i) for i in order[: k + 1]), x, cand))
    return KnotPath(knots, "orthogonal", A, b)


def iter_general_knots(model, b, max_knots: int | None = None):
    """Lazily yield the knots of :func:`general_knots`, largest ``tau`` first."""
    A = _design(model)
    b = np.asarray(b, dtype=complex)
    M, N = A.shape
    if max_knots is None:
        max_knots = M
    if max_knots > M:
        raise ContractViolation("max_knots must not exceed the number of elements")
    if np.max(np.abs(np.linalg.norm(A, axis=0) - 1.0)) > 1e-10:
        raise ContractViolation("general_knots needs unit-norm columns")
    engine = GroupHomotopy(A, b, np.arange(N)[:, None])
    for ev in engine.run(max_knots):
        x = engine.dense(ev.active, ev.y)
        if ev.kind == "enter":
            active = tuple(ev.active) + (ev.group,)
        else:
            active = tuple(g for g in ev.active if g != ev.group)
        yield Knot(float(ev.tau), int(ev.group), active, x, ev.candidates, ev.kind == "remove")


def general_knots(model, b, max_knots: int | None = None) -> KnotPath:
    """Knots of the lasso path for an arbitrary (fat) steering matrix.

    Walks the path from ``tau_1 = max_k |a_k^H b|`` downwards. Index removals
    are recorded with ``removed=True`` and count towards ``max_knots``.
    """
    knots = list(iter_general_knots(model, b, max_knots))
    return KnotPath(knots, "general", _design(model), np.asarray(b, dtype=complex))


def _cd_lasso(A, b, tau, x0=None, tol=TOL.solver_tol, max_sweeps=TOL.max_sweeps):
    N = A.shape[1]
    x = np.zeros(N, dtype=complex) if x0 is None else x0.astype(complex).copy()
    r = b - A @ x
    sq = np.sum(np.abs(A) ** 2, axis=0)
    scale = max(np.linalg.norm(b), 1e-300)
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(N):
            z = x[j] * sq[j] + A[:, j].conj() @ r
            mz = abs(z)
            xn = (mz - tau) * z / mz / sq[j] if mz > tau else 0.0
            d = xn - x[j]
            if d != 0:
                r -= A[:, j] * d
                x[j] = xn
                delta = max(delta, abs(d))
        if delta <= tol * scale:
            return x
    raise SolverFailure("coordinate descent hit the sweep cap", tau, np.flatnonzero(x))


def lasso_solve_at(model, b, tau: float) -> np.ndarray:
    """Lasso minimiser at ``tau`` by cyclic coordinate descent, polished and KKT-checked."""
    A = _design(model)
    b = np.asarray(b, dtype=complex)
    N = A.shape[1]
    if tau < 0:
        raise ContractViolation("tau must be non-negative")
    c = A.conj().T @ b
    if tau >= np.max(np.abs(c)):
        return np.zeros(N, dtype=complex)
    if A.shape[0] == N and np.max(np.abs(A.conj().T @ A - np.eye(N))) <= 1e-10:
        return _soft(c, tau)
    x = _cd_lasso(A, b, tau)
    gidx = np.arange(N)[:, None]
    if kkt_residual(A, b, gidx, x, tau) > TOL.kkt_tol and tau > 0:
        # Newton polish on the detected support
        J = list(np.flatnonzero(x))
        eng = GroupHomotopy(A, b, gidx)
        y = eng.solve_active(J, tau, x[J] / np.abs(x[J]))
        if y is not None:
            cand = eng.dense(J, y)
            if kkt_residual(A, b, gidx, cand, tau) < kkt_residual(A, b, gidx, x, tau):
                x = cand
    return x
