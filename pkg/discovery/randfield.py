"""
Karhunen-Loeve random fields with exponential covariance

C(x, y) = sigma^2 exp(-|x - y| / eta) on [0, L] has closed-form eigenpairs
once the roots w_i of (eta^2 w^2 - 1) sin(w L) - 2 eta w cos(w L) = 0 are
known. Sampled parameters are log-normal: parameter(x) = exp(R(x)).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import optimize, special

from discovery.errors import RootSearchError

logger = logging.getLogger(__name__)

SCAN_POINTS_PER_ROOT = 64


@dataclass(frozen=True)
class KleSpec:
    length: float
    correlation_length: Optional[float] = None
    variance: float = 1.0
    n_modes: int = 12
    mean: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.correlation_length is None:
            object.__setattr__(self, "correlation_length", 0.4 * self.length)
        if self.length <= 0 or self.correlation_length <= 0 or self.variance <= 0:
            raise ValueError("length, correlation_length and variance must be positive")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def characteristic(omega: np.ndarray, eta: float, length: float) -> np.ndarray:
    return (eta ** 2 * omega ** 2 - 1.0) * np.sin(omega * length) - 2.0 * eta * omega * np.cos(omega * length)


def _scan(eta: float, length: float, n: int, upper: float) -> List[float]:
    grid = np.linspace(0.0, upper, SCAN_POINTS_PER_ROOT * (n + 2) + 1)[1:]
    values = characteristic(grid, eta, length)
    roots: List[float] = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], values[:-1], values[1:]):
        if fa == 0.0:
            roots.append(float(a))
        elif fa * fb < 0:
            roots.append(optimize.brentq(characteristic, a, b, args=(eta, length), xtol=1e-15, rtol=4 * np.finfo(float).eps))
        if len(roots) == n:
            break
    return roots


def char_roots(eta: float, length: float, n: int) -> np.ndarray:
    """The n smallest positive roots, ascending"""
    if n < 1:
        raise ValueError("n must be >= 1")
    # one root per interval of width pi / L, so this range always holds n roots
    upper = (n + 1) * math.pi / length
    roots = _scan(eta, length, n, upper)
    if len(roots) < n:
        roots = _scan(eta, length, n, 2.0 * upper)
    if len(roots) < n:
        raise RootSearchError(f"Found {len(roots)} of {n} characteristic roots below {2.0 * upper:.4g}")
    return np.array(roots)


def eigenvalues(omega: np.ndarray, spec: KleSpec) -> np.ndarray:
    eta = spec.correlation_length
    return 2.0 * eta * spec.variance / (eta ** 2 * omega ** 2 + 1.0)


def eigenfunctions(x: np.ndarray, omega: np.ndarray, spec: KleSpec) -> np.ndarray:
    """f_i(x) = (eta w cos(w x) + sin(w x)) / sqrt((eta^2 w^2 + 1) L / 2 + eta); shape (len(x), n)"""
    eta = spec.correlation_length
    xs = np.asarray(x, dtype=np.float64)[..., None]
    norm = np.sqrt((eta ** 2 * omega ** 2 + 1.0) * spec.length / 2.0 + eta)
    return (eta * omega * np.cos(omega * xs) + np.sin(omega * xs)) / norm


def eigenpair(i: int, spec: KleSpec):
    """(lambda_i, w_i) for the zero-based mode index i"""
    if not 0 <= i < spec.n_modes:
        raise ValueError(f"Mode index {i} outside [0, {spec.n_modes})")
    omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
    return float(eigenvalues(omega, spec)[i]), float(omega[i])


def energy_fraction(spec: KleSpec) -> float:
    omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
    return float(eigenvalues(omega, spec).sum() / (spec.variance * spec.length))


def standard_normals(seed: int, n: int) -> np.ndarray:
    """Inverse-CDF standard normals from a seeded uniform stream"""
    rng = np.random.default_rng(seed)
    return special.ndtri(rng.uniform(size=n))


class KleField:
    """Sampled realisation; calling it returns exp(R(x))"""

    def __init__(self, spec: KleSpec, xi: Optional[np.ndarray] = None):
        self.spec = spec
        self.omega = char_roots(spec.correlation_length, spec.length, spec.n_modes)
        self.eigenvalues = eigenvalues(self.omega, spec)
        self.xi = standard_normals(spec.seed, spec.n_modes) if xi is None else np.asarray(xi, dtype=np.float64)
        if self.xi.shape != (spec.n_modes,):
            raise ValueError(f"Expected {spec.n_modes} modal weights, got {self.xi.shape}")
        self.__name__ = f"kle(seed={spec.seed})"

    def log_field(self, x: np.ndarray) -> np.ndarray:
        modes = eigenfunctions(x, self.omega, self.spec)
        return self.spec.mean + modes @ (np.sqrt(self.eigenvalues) * self.xi)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_field(x))

    def to_frame(self, nx: int = 401) -> pd.DataFrame:
        x = np.linspace(0.0, self.spec.length, nx)
        r = self.log_field(x)
        return pd.DataFrame({"x": x, "R": r, "parameter": np.exp(r)})

    def to_csv(self, csv_path: str, json_path: str, nx: int = 401) -> None:
        self.to_frame(nx).to_csv(csv_path, index=False, float_format="%.17g")
        payload = {
            "spec": self.spec.to_dict(),
            "omega": self.omega.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "xi": self.xi.tolist(),
            "energy_fraction": float(self.eigenvalues.sum() / (self.spec.variance * self.spec.length)),
        }
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)


def sample_field(spec: KleSpec) -> KleField:
    field = KleField(spec)
    logger.debug(f"KLE field: L={spec.length}, eta={spec.correlation_length}, {spec.n_modes} modes, seed {spec.seed}")
    return field
