"""Group-lasso knots for the orthogonalised grid-matching model.

With an orthogonal steering matrix the Taylor model ``b = A x + A1 P x + v``
becomes ``b_bar = A^H b = [I | G] y + v_bar`` where group ``g`` holds the pair
``(x_g, c_g x_g)`` and owns columns ``g`` and ``N + g`` of ``P = [I | G]``.
The groups are solved as free complex 2-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from ._pathcore import GroupHomotopy, SolverFailure, kkt_residual
from .config import TOL
from .lasso_path import ContractViolation
from .signal_model import ArrayModel

__all__ = [
    "GroupKnot",
    "duality_gap",
    "group_index",
    "group_knots",
    "group_kkt_residual",
    "group_solve_at",
    "iter_group_knots",
]


@dataclass(frozen=True, eq=False)
class GroupKnot:
    tau: float
    entering_group: int
    active_groups: tuple[int, ...]
    solution: dict
    lambda_candidates: dict = field(default_factory=dict)
    removed: bool = False


def group_index(n: int) -> np.ndarray:
    """Column pairs ``(g, n + g)`` of ``[I | G]``."""
    g = np.arange(n)
    return np.stack([g, n + g], axis=1)


def _operator(model) -> np.ndarray:
    if isinstance(model, ArrayModel):
        if model.G is None:
            raise ContractViolation("group lasso needs the orthogonal grid-matching model")
        return model.P
    P = np.asarray(model, dtype=complex)
    if P.ndim != 2 or P.shape[1] != 2 * P.shape[0]:
        raise ContractViolation("operator must be N x 2N")
    return P


def _as_map(y_dense: np.ndarray, n: int) -> dict:
    out = {}
    for g in range(n):
        v = np.array([y_dense[g], y_dense[n + g]])
        if np.any(v != 0):
            out[g] = v
    return out


def iter_group_knots(model, b_bar, max_knots: int | None = None):
    """Lazily yield the knots of :func:`group_knots`, largest ``tau`` first."""
    P = _operator(model)
    n = P.shape[0]
    b_bar = np.asarray(b_bar, dtype=complex)
    if max_knots is None:
        max_knots = n
    engine = GroupHomotopy(P, b_bar, group_index(n))
    for ev in engine.run(max_knots):
        y = engine.dense(ev.active, ev.y)
        if ev.kind == "enter":
            active = tuple(ev.active) + (ev.group,)
        else:
            active = tuple(g for g in ev.active if g != ev.group)
        yield GroupKnot(float(ev.tau), int(ev.group), active, _as_map(y, n), ev.candidates, ev.kind == "remove")


def group_knots(model, b_bar, max_knots: int | None = None) -> list:
    """Knots of the group-lasso path, largest first.

    Parameters
    ----------
    model : ArrayModel or ndarray
        Orthogonal model (``P = [I | G]`` is used) or an explicit N x 2N operator.
    b_bar : array_like
        Matched-filter output ``A^H b``.
    max_knots : int, optional
        Stop after this many knots (default: number of groups). Removals count.

    Returns
    -------
    list of GroupKnot
    """
    return list(iter_group_knots(model, b_bar, max_knots))


def _dense(sol: dict, n: int) -> np.ndarray:
    y = np.zeros(2 * n, dtype=complex)
    for g, v in sol.items():
        y[g], y[n + g] = v
    return y


def group_kkt_residual(model, b_bar, sol: dict, tau: float) -> float:
    P = _operator(model)
    n = P.shape[0]
    return kkt_residual(P, np.asarray(b_bar, dtype=complex), group_index(n), _dense(sol, n), tau)


def duality_gap(P: np.ndarray, b: np.ndarray, y: np.ndarray, tau: float) -> float:
    """Primal minus dual objective for a feasible rescaling of the residual."""
    n = P.shape[0]
    gidx = group_index(n)
    r = b - P @ y
    primal = 0.5 * np.vdot(r, r).real + tau * np.sum(np.linalg.norm(y[gidx], axis=1))
    z = P.conj().T @ r
    zmax = np.max(np.linalg.norm(z[gidx], axis=1))
    u = r * min(1.0, tau / zmax) if zmax > 0 else r
    dual = np.vdot(u, b).real - 0.5 * np.vdot(u, u).real
    return float(primal - dual)


def _block_min(Hg: np.ndarray, w: np.ndarray, tau: float) -> np.ndarray:
    """argmin over v in C^2 of 0.5 v^H Hg v - Re(w^H v) + tau ||v||."""
    nw = np.linalg.norm(w)
    if nw <= tau:
        return np.zeros(2, dtype=complex)
    lam, V = np.linalg.eigh(Hg)
    wt = V.conj().T @ w
    # v = (Hg + mu I)^{-1} w with mu = tau / ||v||:  solve ||v(mu)|| * mu = tau
    def f(mu):
        return np.linalg.norm(wt / (lam + mu)) * mu - tau

    hi = tau + 1.0
    while f(hi) < 0:
        hi *= 2.0
    mu = brentq(f, 0.0, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps) if f(0.0) < 0 else 0.0
    return V @ (wt / (lam + mu))


def _bcd(P, b, tau, y0=None, tol=TOL.solver_tol, max_sweeps=TOL.max_sweeps):
    n = P.shape[0]
    gidx = group_index(n)
    y = np.zeros(2 * n, dtype=complex) if y0 is None else y0.astype(complex).copy()
    r = b - P @ y
    blocks = [P[:, gi] for gi in gidx]
    grams = [B.conj().T @ B for B in blocks]
    scale = max(np.linalg.norm(b), 1e-300)
    for _ in range(max_sweeps):
        delta = 0.0
        for g in range(n):
            gi = gidx[g]
            old = y[gi]
            w = blocks[g].conj().T @ r + grams[g] @ old
            new = _block_min(grams[g], w, tau)
            d = new - old
            if np.any(d != 0):
                r -= blocks[g] @ d
                y[gi] = new
                delta = max(delta, float(np.linalg.norm(d)))
        if delta <= tol * scale:
            return y
    raise SolverFailure("block coordinate descent hit the sweep cap", tau, [g for g in range(n) if np.any(y[gidx[g]])])


def group_solve_at(model, b_bar, tau: float) -> dict:
    """Group-lasso minimiser at ``tau``: block coordinate descent, then a Newton polish.

    Returns a map from active group to its 2-vector ``(y_g1, y_g2)``.
    """
    P = _operator(model)
    n = P.shape[0]
    b = np.asarray(b_bar, dtype=complex)
    if tau < 0:
        raise ContractViolation("tau must be non-negative")
    gidx = group_index(n)
    z0 = P.conj().T @ b
    if tau >= np.max(np.linalg.norm(z0[gidx], axis=1)):
        return {}
    y = _bcd(P, b, tau)
    if tau > 0 and kkt_residual(P, b, gidx, y, tau) > TOL.kkt_tol:
        J = [g for g in range(n) if np.any(y[gidx[g]] != 0)]
        eng = GroupHomotopy(P, b, gidx)
        yj = y[gidx[J]].ravel()
        nrm = np.repeat(np.linalg.norm(y[gidx[J]], axis=1), 2)
        polished = eng.solve_active(J, tau, yj / nrm, yj)
        if polished is not None:
            cand = eng.dense(J, polished)
            if kkt_residual(P, b, gidx, cand, tau) < kkt_residual(P, b, gidx, y, tau):
                y = cand
    return _as_map(y, n)
