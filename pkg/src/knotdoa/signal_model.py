"""ULA steering structures and single-snapshot synthesis.

The steering vector of an ``M``-element ULA with spacing ``spacing`` (in
wavelengths) is ``a(theta)_d = exp(i 2 pi spacing d sin(theta)) / sqrt(M)`` for
``d = 0..M-1``. Columns are unit norm.

Two grids are supported:

* ``orthogonal`` -- ``N = M`` angles uniformly spaced in ``sin(theta)`` so
  that ``A^H A = I`` (a DFT basis). Only this mode carries the grid-matching
  operator ``G = A^H D A``.
* ``oversampled`` -- ``N`` bin centres uniformly spaced in ``sin(theta)``
  over ``[sin k1, sin k2]``. With ``N = M`` and half-wavelength spacing this
  is the orthogonal grid; larger ``N`` oversamples the same DFT basis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InvalidConfigError(ValueError):
    """Raised for array configurations that violate their invariants."""


class ConstructionError(RuntimeError):
    """Raised when a built model fails its own consistency checks."""


def _pairs(z) -> list:
    return [[float(np.real(v)), float(np.imag(v))] for v in np.atleast_1d(z)]


def _from_pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    return arr[:, 0] + 1j * arr[:, 1]


@dataclass(frozen=True)
class ArrayConfig:
    num_elements: int
    num_grid: int
    spacing: float = 0.5
    angle_interval: tuple[float, float] = (-math.pi / 2, math.pi / 2)

    def __post_init__(self):
        object.__setattr__(self, "angle_interval", tuple(float(a) for a in self.angle_interval))
        if int(self.num_elements) != self.num_elements or self.num_elements < 2:
            raise InvalidConfigError("num_elements must be an integer >= 2")
        if int(self.num_grid) != self.num_grid or self.num_grid < self.num_elements:
            raise InvalidConfigError("num_grid must be an integer >= num_elements")
        if not self.spacing > 0:
            raise InvalidConfigError("spacing must be positive")
        k1, k2 = self.angle_interval
        if not k1 < k2:
            raise InvalidConfigError("angle_interval must satisfy k1 < k2")

    @property
    def bin_width(self) -> float:
        """Angular width of one estimation bin, ``(k2 - k1) / N``."""
        k1, k2 = self.angle_interval
        return (k2 - k1) / self.num_grid

    def to_dict(self) -> dict:
        return {
            "num_elements": self.num_elements,
            "num_grid": self.num_grid,
            "spacing": self.spacing,
            "angle_interval": list(self.angle_interval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayConfig":
        kw = {k: d[k] for k in ("num_elements", "num_grid") if k in d}
        if "spacing" in d:
            kw["spacing"] = float(d["spacing"])
        if "angle_interval" in d:
            kw["angle_interval"] = tuple(d["angle_interval"])
        return cls(**kw)


@dataclass(frozen=True)
class Scenario:
    """Ground-truth sources on the estimation grid.

    ``source_indices`` are 0-based grid indices, ``offsets`` the angular
    displacement (radians) of each source from its grid point and ``weights``
    the complex amplitudes, normalised to unit total power.
    """

    source_indices: tuple[int, ...]
    weights: tuple[complex, ...]
    snr_db: float
    offsets: tuple[float, ...] = ()

    def __post_init__(self):
        idx = tuple(int(i) for i in self.source_indices)
        w = tuple(complex(v) for v in self.weights)
        off = tuple(float(p) for p in self.offsets) or (0.0,) * len(idx)
        if list(idx) != sorted(set(idx)):
            raise InvalidConfigError("source_indices must be sorted and distinct")
        if len(w) != len(idx) or len(off) != len(idx):
            raise InvalidConfigError("weights/offsets must match source_indices")
        if idx and abs(sum(abs(v) ** 2 for v in w) - 1.0) > 1e-12:
            raise InvalidConfigError("weights must have unit total power")
        if any(v == 0 and p != 0 for v, p in zip(w, off)):
            raise InvalidConfigError("offsets may only be attached to nonzero weights")
        object.__setattr__(self, "source_indices", idx)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offsets", off)

    @classmethod
    def equal_power(cls, indices: Sequence[int], snr_db: float, offsets=None, phases=None):
        s = len(indices)
        ph = np.zeros(s) if phases is None else np.asarray(phases, dtype=float)
        w = np.exp(1j * ph) / math.sqrt(s) if s else np.zeros(0)
        off = () if offsets is None else tuple(np.broadcast_to(offsets, (s,)))
        return cls(tuple(indices), tuple(w), float(snr_db), off)

    @property
    def num_sources(self) -> int:
        return len(self.source_indices)

    @property
    def noise_variance(self) -> float:
        """Per-element complex noise variance.

        The SNR is measured with unit-modulus steering entries and independent
        source phases, ``E||sqrt(M) A x||^2 / E||v||^2 = ||x||^2 / sigma^2``.
        """
        power = sum(abs(v) ** 2 for v in self.weights) or 1.0
        return power / 10.0 ** (self.snr_db / 10.0)

    def to_dict(self) -> dict:
        return {
            "source_indices": list(self.source_indices),
            "offsets": list(self.offsets),
            "weights": _pairs(self.weights),
            "snr_db": self.snr_db,
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            tuple(d["source_indices"]),
            tuple(_from_pairs(d["weights"])) if d["weights"] else (),
            float(d["snr_db"]),
            tuple(d.get("offsets", ())),
        )


@dataclass(frozen=True, eq=False)
class ArrayModel:
    cfg: ArrayConfig
    mode: str
    grid: np.ndarray
    A: np.ndarray
    A1: np.ndarray
    D: np.ndarray
    G: np.ndarray | None = field(default=None)

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    @property
    def is_orthogonal(self) -> bool:
        return self.mode == "orthogonal"

    def steering(self, theta) -> np.ndarray:
        return steering(self.cfg, theta)

    @property
    def P(self) -> np.ndarray:
        """Grid-matching operator ``[I | G]`` acting on ``[x; c*x]``."""
        if self.G is None:
            raise InvalidConfigError("grid-matching operator needs an orthogonal model")
        return np.hstack([np.eye(self.N), self.G])

    def c_factor(self) -> np.ndarray:
        """``i 2 pi spacing cos(rho_k)``; multiply by an offset to get ``c_k``."""
        return 1j * 2 * np.pi * self.cfg.spacing * np.cos(self.grid)


def steering(cfg: ArrayConfig, theta) -> np.ndarray:
    d = np.arange(cfg.num_elements)[:, None]
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.exp(1j * 2 * np.pi * cfg.spacing * d * np.sin(theta)[None, :]) / math.sqrt(
        cfg.num_elements
    )


def steering_derivative(cfg: ArrayConfig, theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d = np.arange(cfg.num_elements)[:, None]
    return 1j * 2 * np.pi * cfg.spacing * d * np.cos(theta)[None, :] * steering(cfg, theta)


def orthogonal_grid(cfg: ArrayConfig) -> np.ndarray:
    n = cfg.num_grid
    k = np.arange(1, n + 1)
    s = (2 * k - n - 1) / (n * 2 * cfg.spacing)
    if np.any(np.abs(s) > 1):
        raise InvalidConfigError("spacing too small for an orthogonal grid")
    return np.arcsin(s)


def oversampled_grid(cfg: ArrayConfig) -> np.ndarray:
    s1, s2 = np.sin(cfg.angle_interval)
    width = (s2 - s1) / cfg.num_grid
    return np.arcsin(np.clip(s1 + (np.arange(cfg.num_grid) + 0.5) * width, -1.0, 1.0))


def build_array_model(cfg: ArrayConfig, mode: str = "orthogonal") -> ArrayModel:
    if mode not in ("orthogonal", "oversampled"):
        raise InvalidConfigError(f"unknown mode {mode!r}")
    if mode == "orthogonal":
        if cfg.num_grid != cfg.num_elements:
            raise InvalidConfigError("orthogonal mode requires num_grid == num_elements")
        grid = orthogonal_grid(cfg)
    else:
        grid = oversampled_grid(cfg)
    A = steering(cfg, grid)
    A1 = steering_derivative(cfg, grid)
    D = np.diag(np.arange(cfg.num_elements, dtype=float))
    G = None
    if mode == "orthogonal":
        err = np.max(np.abs(A.conj().T @ A - np.eye(cfg.num_grid)))
        if err > 1e-10:
            raise ConstructionError(f"orthogonal grid not unitary (err={err:.3g})")
        G = A.conj().T @ D @ A
    return ArrayModel(cfg, mode, grid, A, A1, D, G)


@dataclass(frozen=True, eq=False)
class Snapshot:
    b: np.ndarray
    b_bar: np.ndarray | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        d = {"b": _pairs(self.b), "seed": self.seed}
        if self.b_bar is not None:
            d["b_bar"] = _pairs(self.b_bar)
        return d

    @classmethod
    def from_dict(cls, d: dict, model: ArrayModel | None = None) -> "Snapshot":
        b = _from_pairs(d["b"])
        b_bar = _from_pairs(d["b_bar"]) if d.get("b_bar") is not None else None
        if b_bar is None and model is not None and model.is_orthogonal:
            b_bar = model.A.conj().T @ b
        return cls(b, b_bar, d.get("seed"))


def source_signal(model: ArrayModel, scen: Scenario) -> np.ndarray:
    """Noiseless measurement built from exact (off-grid) steering vectors."""
    if not scen.source_indices:
        return np.zeros(model.M, dtype=complex)
    if max(scen.source_indices) >= model.N:
        raise InvalidConfigError("source index outside the grid")
    theta = model.grid[list(scen.source_indices)] + np.asarray(scen.offsets)
    return model.steering(theta) @ np.asarray(scen.weights)


def complex_normal(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circular complex Gaussian samples with ``E|z|^2 = variance``."""
    s = math.sqrt(variance / 2.0)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize(model: ArrayModel, scen: Scenario, seed: int, noiseless: bool = False) -> Snapshot:
    rng = np.random.default_rng(seed)
    b = source_signal(model, scen)
    if not noiseless:
        b = b + complex_normal(rng, model.M, scen.noise_variance)
    b_bar = model.A.conj().T @ b if model.is_orthogonal else None
    return Snapshot(b, b_bar, seed)


def taylor_residual(model: ArrayModel, scen: Scenario) -> float:
    """Norm of the first-order Taylor model error for a noiseless scenario."""
    exact = source_signal(model, scen)
    idx = list(scen.source_indices)
    if not idx:
        return 0.0
    x = np.asarray(scen.weights)
    p = np.asarray(scen.offsets)
    approx = model.A[:, idx] @ x + model.A1[:, idx] @ (p * x)
    return float(np.linalg.norm(exact - approx))


def load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
