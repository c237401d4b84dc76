"""Knot search for complex (group) lasso paths.

Both estimators minimise ``0.5 ||b - Phi y||^2 + tau * sum_g ||y_g||`` over a
partition of the columns of ``Phi`` into equal-sized groups: the lasso uses
singleton groups, the grid-matching estimator uses column pairs. Between two
knots the active set ``J`` is fixed and the solution solves

    H y + tau * U(y) = c,     H = Phi_J^H Phi_J,  c = Phi_J^H b,

with ``U(y)_g = y_g / ||y_g||``. The path is followed by continuation in
``tau``: an exact tangent of this system predicts where the next group enters
(``||z_j|| = tau`` for an inactive group) or leaves (``y_g -> 0``), Newton's
method certifies the state at the predicted point, and the knot is bracketed
and located to ``knot_xtol * tau_1`` by Brent's method (entries) or bisection
(removals).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .config import TOL


class SolverFailure(RuntimeError):
    """Inner solver did not converge; carries the path position."""

    def __init__(self, msg: str, tau: float, active):
        super().__init__(f"{msg} (tau={tau:.6g}, active={list(active)})")
        self.tau = tau
        self.active = tuple(active)


def _realify(H: np.ndarray) -> np.ndarray:
    return np.block([[H.real, -H.imag], [H.imag, H.real]])


def _solve(H, rhs):
    try:
        return np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, rhs, rcond=None)[0]


def _ri(v: np.ndarray) -> np.ndarray:
    return np.concatenate([v.real, v.imag])


def _cx(v: np.ndarray) -> np.ndarray:
    h = v.size // 2
    return v[:h] + 1j * v[h:]


@dataclass
class Event:
    tau: float
    group: int
    kind: str  # "enter" | "remove"
    y: np.ndarray  # active coefficients at the knot, groups in J order
    active: list
    candidates: dict = field(default_factory=dict)


class GroupHomotopy:
    """Homotopy over groups of equal size ``s`` (columns ``gidx[g]``)."""

    def __init__(self, Phi: np.ndarray, b: np.ndarray, gidx: np.ndarray, tol=TOL):
        self.Phi = np.asarray(Phi, dtype=complex)
        self.b = np.asarray(b, dtype=complex)
        self.gidx = np.asarray(gidx, dtype=int)
        self.ng, self.s = self.gidx.shape
        self.gram = self.Phi.conj().T @ self.Phi
        self.corr0 = self.Phi.conj().T @ self.b
        self.tol = tol
        self.tau1 = float(self.group_norms(self.corr0).max()) if self.ng else 0.0
        # (group, tau_until): a group just removed is ignored above tau_until
        self._mute = None
        self._sys = None
        self._collapsed = None

    # -- helpers ---------------------------------------------------------
    def group_norms(self, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(v[self.gidx]) ** 2, axis=1))

    def cols(self, J) -> np.ndarray:
        return self.gidx[list(J)].ravel()

    def correlations(self, J, y) -> np.ndarray:
        """``Phi^H (b - Phi_J y)`` for every column."""
        if len(J) == 0:
            return self.corr0.copy()
        return self.corr0 - self.gram[:, self.cols(J)] @ y

    def dense(self, J, y) -> np.ndarray:
        out = np.zeros(self.Phi.shape[1], dtype=complex)
        if len(J):
            out[self.cols(J)] = y
        return out

    def _units(self, y, n):
        yy = y.reshape(n, self.s)
        nrm = np.sqrt(np.sum(np.abs(yy) ** 2, axis=1))
        return nrm, (yy / np.where(nrm > 0, nrm, 1.0)[:, None]).ravel()

    def _muted(self, tau) -> bool:
        return self._mute is not None and tau > self._mute[1]

    def _inactive_ratio(self, J, y, tau):
        ratio = self.group_norms(self.correlations(J, y)) / tau
        ratio[list(J)] = -np.inf
        if self._muted(tau):
            ratio[self._mute[0]] = -np.inf
        return ratio

    # -- restricted solve ------------------------------------------------
    def _system(self, J):
        key = tuple(J)
        if self._sys is None or self._sys[0] != key:
            cols = self.cols(J)
            H = self.gram[np.ix_(cols, cols)]
            L = max(float(np.linalg.eigvalsh(H).max()), 1e-300)
            self._sys = (key, H, self.corr0[cols], L, _realify(H), None)
        return self._sys

    def _jacobian(self, n, wn, uw, th, Hr, L):
        """Real Jacobians ``dF/dw`` and ``dy/dw`` of the prox-argument system."""
        ns = n * self.s
        eye = np.eye(2 * ns)
        ur = _ri(uw)
        Dy = eye.copy()
        for g in range(n):
            ri = np.r_[g * self.s : (g + 1) * self.s, ns + g * self.s : ns + (g + 1) * self.s]
            ug = ur[ri]
            Dy[np.ix_(ri, ri)] -= th / wn[g] * (np.eye(2 * self.s) - np.outer(ug, ug))
        return eye - (eye - Hr / L) @ Dy, Dy

    def _newton_w(self, n, H, c, L, Hr, th, w):
        """Newton on the prox argument; returns ``(y, |w_g|, w, converged)``."""
        goal = self.tol.newton_tol * max(self.tau1, 1e-300)

        def parts(w):
            wn, uw = self._units(w, n)
            if np.any(wn <= 0):
                return None
            yv = w - th * uw
            return wn, uw, yv, (w - yv) + (H @ yv - c) / L

        pr = parts(w)
        if pr is None:
            return None, None, w, False
        wn, uw, y, F = pr
        fn = np.linalg.norm(F) * L
        for _ in range(60):
            if fn <= goal:
                return y, wn, w, True
            Jac, _ = self._jacobian(n, wn, uw, th, Hr, L)
            dw = _cx(_solve(Jac, _ri(F)))
            alpha = 1.0
            while alpha > 1e-8:
                trial = parts(w - alpha * dw)
                if trial is not None:
                    fn_new = np.linalg.norm(trial[3]) * L
                    if fn_new < fn or fn_new <= goal:
                        break
                alpha *= 0.5
            else:
                break
            w = w - alpha * dw
            wn, uw, y, F = trial
            fn = fn_new
        return y, wn, w, fn <= 1e3 * goal

    def solve_active(self, J, tau, U_guess, y_guess=None):
        """Solution on ``J`` with every group nonzero, or ``None`` if it collapses.

        Newton runs on the prox argument ``w`` with ``y_g = (1 - t/|w_g|) w_g``
        and ``t = tau / L``. Unlike Newton on ``y`` itself this stays well
        conditioned while a freshly entered group is still tiny, and a group
        that collapses shows up as ``|w_g| < t`` at a converged point (its
        position is left in ``self._collapsed``). When Newton stalls, the
        solve is continued in ``tau`` from the last converged point on the
        same active set.
        """
        self._collapsed = None
        n = len(J)
        key, H, c, L, Hr, last = self._system(J)
        th = tau / L
        y0 = _solve(H, c - tau * U_guess) if y_guess is None else np.asarray(y_guess, dtype=complex)
        nrm, Uy = self._units(y0, n)
        Uw = np.where(np.repeat(nrm, self.s) > 0, Uy, U_guess)
        y, wn, w, ok = self._newton_w(n, H, c, L, Hr, th, y0 + th * Uw)
        if not ok and last is not None:
            t0, w0 = last
            for pieces in (4, 16, 64, 256):
                w_i, t_prev, ok = w0, t0, True
                for t_i in np.linspace(t0, tau, pieces + 1)[1:]:
                    # keep y fixed and move w to the new threshold
                    _, u_i = self._units(w_i, n)
                    w_i = w_i + (t_i - t_prev) / L * u_i
                    y, wn, w_i, ok = self._newton_w(n, H, c, L, Hr, t_i / L, w_i)
                    t_prev = t_i
                    if not ok:
                        break
                if ok:
                    w = w_i
                    break
        if not ok:
            return None
        self._sys = (key, H, c, L, Hr, (tau, w))
        gap = wn - th * (1.0 + 1e-14)
        if np.any(gap <= 0):
            self._collapsed = int(np.argmin(gap))
            return None
        return y

    def state(self, J, tau, U_guess, y_guess=None):
        """Return ``(y, event_flag, inactive_ratio)`` at ``tau`` for active set ``J``."""
        y = self.solve_active(J, tau, U_guess, y_guess)
        if y is None:
            return None, True, None
        ratio = self._inactive_ratio(J, y, tau)
        return y, bool(ratio.max() > 1.0 + 1e-12), ratio

    # -- prediction ------------------------------------------------------
    def tangent(self, J, tau, y, U):
        """Exact tangent of the active-set solution at ``tau``.

        Returns ``(t_next, dy)`` with ``dy = dy/dtau`` and ``t_next`` the
        largest Newton root below ``tau`` of the entry functions
        ``||z_j|| - tau`` and the removal functions ``|w_g| - tau / L``
        (``None`` when no event is predicted).
        """
        n = len(J)
        _, H, c, L, Hr, _ = self._system(J)
        th = tau / L
        nrm, Uy = self._units(y, n)
        uw = np.where(np.repeat(nrm, self.s) > 0, Uy, U)
        Jac, Dy = self._jacobian(n, nrm + th, uw, th, Hr, L)
        dw = -_cx(_solve(Jac, _ri((uw - H @ uw / L) / L)))
        dy = _cx(Dy @ _ri(dw)) - uw / L
        upper = tau * (1.0 - 1e-12)
        roots = []
        # removal: |w_g(t)| - t/L reaches 0
        gp = np.real(np.sum((np.conj(uw) * dw).reshape(n, self.s), axis=1)) - 1.0 / L
        pos = (gp > 0) & (nrm > 0)
        roots += list(tau - nrm[pos] / gp[pos])
        # entry: ||z_j(t)|| - t reaches 0
        if n < self.ng:
            zz = self.correlations(J, y)[self.gidx]
            dz = (-self.gram[:, self.cols(J)] @ dy)[self.gidx]
            nz = np.sqrt(np.sum(np.abs(zz) ** 2, axis=1))
            hp = np.real(np.sum(np.conj(zz) * dz, axis=1)) / np.where(nz > 0, nz, 1.0) - 1.0
            ok = (hp < 0) & (nz <= tau)
            ok[list(J)] = False
            if self._muted(tau):
                ok[self._mute[0]] = False
            roots += list(tau - (nz[ok] - tau) / hp[ok])
        roots = [t for t in roots if 0.0 < t < upper]
        return (max(roots) if roots else None), dy

    def lambda_candidates(self, J, tau, U) -> dict:
        """Per-candidate entry values ``Lambda_j`` with the active directions frozen.

        For each inactive ``j`` this solves ``||z_j(Lambda)|| = Lambda`` with
        ``y(Lambda) = H^{-1}(c - Lambda U)``; 0 when infeasible below ``tau``.
        """
        cols = self.cols(J)
        H = self.gram[np.ix_(cols, cols)]
        p = _solve(H, self.corr0[cols])
        q = _solve(H, U)
        a0 = (self.corr0 - self.gram[:, cols] @ p)[self.gidx]
        aw = (self.gram[:, cols] @ q)[self.gidx]
        qa = np.sum(np.abs(aw) ** 2, axis=1) - 1.0
        qb = np.sum(np.real(np.conj(a0) * aw), axis=1)
        qc = np.sum(np.abs(a0) ** 2, axis=1)
        disc = qb * qb - qa * qc
        upper = tau * (1.0 - 1e-12)
        out = {}
        for g in range(self.ng):
            if g in J:
                continue
            roots = []
            if abs(qa[g]) < 1e-14:
                if qb[g] < 0:
                    roots.append(-qc[g] / (2 * qb[g]))
            elif disc[g] >= 0:
                sq = np.sqrt(disc[g])
                roots += [(-qb[g] + sq) / qa[g], (-qb[g] - sq) / qa[g]]
            roots = [r for r in roots if 0.0 <= r < upper]
            out[g] = float(max(roots)) if roots else 0.0
        return out

    # -- path ------------------------------------------------------------
    def first(self):
        norms = self.group_norms(self.corr0)
        g = int(np.argmax(norms))
        return norms[g], g

    def next_event(self, J, tau_a, U_a, y_a) -> Event | None:
        xtol = self.tol.knot_xtol * self.tau1
        tau_hi, y_hi, U_hi = tau_a, y_a, U_a
        candidates = self.lambda_candidates(J, tau_a, U_a)
        for _ in range(400):
            if tau_hi <= xtol:
                return None
            t_pred, dy = self.tangent(J, tau_hi, y_hi, U_hi)
            t = 0.5 * tau_hi if t_pred is None else max(t_pred, 0.5 * tau_hi)
            y, ev, ratio = self.state(J, t, U_hi, y_hi + (t - tau_hi) * dy)
            if ev:
                return self._refine(J, t, tau_hi, U_hi, y_hi, dy, candidates)
            nrm, U = self._units(y, len(J))
            at_event = ratio.max() >= 1.0 - xtol / t or nrm.min() <= 1e-9 * self.tau1
            if at_event or (t == t_pred and tau_hi - t <= xtol):
                return self._make_event(J, t, y, candidates)
            tau_hi, y_hi, U_hi = t, y, U
        raise SolverFailure("knot search did not converge", tau_hi, J)

    def _make_event(self, J, tau, y, candidates, remove_pos=None):
        ratio = self._inactive_ratio(J, y, tau)
        nrm, U = self._units(y, len(J))
        inactive_max = ratio.max() if len(J) < self.ng else -np.inf
        if remove_pos is None:
            kmin = int(np.argmin(nrm))
            if nrm[kmin] <= 1e-9 * self.tau1 and inactive_max < 1.0 - 1e-9:
                remove_pos = kmin
        if remove_pos is not None:
            # the leaving group is exactly zero at its knot: re-solve without it
            yy = y.reshape(len(J), self.s).copy()
            keep = [k for k in range(len(J)) if k != remove_pos]
            if keep:
                Uk = U.reshape(len(J), self.s)[keep].ravel()
                red = self.solve_active([J[k] for k in keep], tau, Uk, yy[keep].ravel())
                if red is not None:
                    yy[keep] = red.reshape(len(keep), self.s)
            yy[remove_pos] = 0.0
            return Event(tau, J[remove_pos], "remove", yy.ravel(), list(J), candidates)
        top = np.flatnonzero(ratio >= inactive_max - 1e-12)
        return Event(tau, int(top[0]), "enter", y, list(J), candidates)

    def _refine(self, J, lo, hi, U_hi, y_hi, dy_hi, candidates):
        """Locate the first event in ``(lo, hi]``; the state at ``hi`` is valid."""
        xtol = self.tol.knot_xtol * self.tau1

        def guess(t):
            return y_hi + (t - hi) * dy_hi

        y_lo, _, _ = self.state(J, lo, U_hi, guess(lo))
        if y_lo is not None and len(J) < self.ng:
            # a group enters: max ratio - 1 changes sign on [lo, hi]
            def f(t):
                y, _, r = self.state(J, t, U_hi, guess(t))
                return 1.0 if y is None else float(r.max() - 1.0)

            try:
                t = brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=200)
            except ValueError:
                t = None
            if t is not None:
                for tt in (t, min(t + xtol, hi), hi):
                    y, _, _ = self.state(J, tt, U_hi, guess(tt))
                    if y is not None:
                        return self._make_event(J, tt, y, candidates)
        # a group collapses: bisect on the event flag
        y_keep, pos = y_hi, None
        while hi - lo > xtol:
            mid = 0.5 * (lo + hi)
            y, ev, _ = self.state(J, mid, U_hi, guess(mid))
            if ev:
                lo = mid
                if y is None:
                    pos = self._collapsed
            else:
                hi, y_keep = mid, y
        if pos is None:
            self.state(J, lo, U_hi, guess(lo))
            pos = self._collapsed
        return self._make_event(J, hi, y_keep, candidates, remove_pos=pos)

    def run(self, max_knots: int):
        """Yield events from the first knot downwards."""
        if self.ng == 0 or self.tau1 <= 0:
            return
        tau, g = self.first()
        ev = Event(float(tau), g, "enter", np.zeros(0, dtype=complex), [],
                   {k: float(v) for k, v in enumerate(self.group_norms(self.corr0)) if k != g})
        count = 0
        while True:
            yield ev
            count += 1
            if count >= max_knots:
                return
            # state right after the event
            J_prev = list(ev.active)
            z = self.correlations(J_prev, ev.y)
            if ev.kind == "enter":
                J = J_prev + [ev.group]
                yz = np.concatenate([ev.y, np.zeros(self.s, dtype=complex)])
            else:
                k = J_prev.index(ev.group)
                J = J_prev[:k] + J_prev[k + 1 :]
                yz = np.delete(ev.y.reshape(-1, self.s), k, axis=0).ravel()
            if not J:
                return
            U = np.empty(len(J) * self.s, dtype=complex)
            for k, gg in enumerate(J):
                blk = yz[k * self.s : (k + 1) * self.s]
                nb = np.linalg.norm(blk)
                if nb > 0:
                    U[k * self.s : (k + 1) * self.s] = blk / nb
                else:
                    zg = z[self.gidx[gg]]
                    U[k * self.s : (k + 1) * self.s] = zg / np.linalg.norm(zg)
            # simultaneous entries at the same tau (ties)
            ratio = self.group_norms(z) / ev.tau
            ratio[J] = -np.inf
            if ev.kind == "remove":
                ratio[ev.group] = -np.inf
            tied = np.flatnonzero(ratio >= 1.0 - 1e-12) if len(J) < self.ng else []
            if len(tied):
                ev = Event(ev.tau, int(tied[0]), "enter", yz, list(J), {})
                continue
            if ev.kind == "remove":
                self._mute = (ev.group, ev.tau - 1e3 * self.tol.knot_xtol * self.tau1)
            try:
                nxt = self.next_event(J, ev.tau, U, yz)
            finally:
                self._mute = None
            if nxt is None:
                return
            ev = nxt


def kkt_residual(Phi, b, gidx, y_dense, tau):
    """Largest violation of the (group) lasso optimality conditions."""
    Phi = np.asarray(Phi)
    z = Phi.conj().T @ (b - Phi @ y_dense)
    worst = 0.0
    for g in np.asarray(gidx):
        yg = y_dense[g]
        ny = np.linalg.norm(yg)
        zg = z[g]
        if ny > 0:
            worst = max(worst, float(np.linalg.norm(zg - tau * yg / ny)))
        else:
            worst = max(worst, float(np.linalg.norm(zg) - tau))
    return worst
