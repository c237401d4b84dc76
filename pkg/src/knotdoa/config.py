"""Numerical tolerances shared by the solvers, CDFs and threshold search."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # inner (group) lasso solvers
    solver_tol: float = 1e-10
    newton_tol: float = 1e-13
    max_sweeps: int = 100_000
    kkt_tol: float = 1e-8
    # knot location, relative to the first knot
    knot_xtol: float = 1e-10
    # quadrature for the exact covariance-test CDF
    quad_rtol: float = 1e-9
    quad_floor: float = 1e-14
    # CDF inversion
    invert_xtol: float = 1e-10
    invert_ftol: float = 1e-12
    invert_max_doublings: int = 1024
    # eigenvalue cutoff for the projected correlation matrices
    eig_cutoff: float = 1e-10
    # |y_g1| below this leaves the recovered offset undefined
    offset_floor: float = 1e-12
    # Marcum-Q series
    marcum_atol: float = 1e-12


TOL = Tolerances()
