"""
Fourier pseudo-spectral integration of u_t = d/dx(sum_n c_n F_n(u))

Terms whose flux is a single derivative u^(m) are linear and go into the
diagonal symbol c_n (ik)^(m+1); product fluxes are evaluated in physical
space with 2/3-rule dealiasing. Time stepping is exponential time
differencing RK4 with contour-integral coefficients.
"""

import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from discovery.errors import InstabilityError
from discovery.genome import Module

logger = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e3
CONTOUR_POINTS = 32


def ik_power(k: np.ndarray, p: int) -> np.ndarray:
    """(ik)^p with the power of i taken exactly"""
    return (1, 1j, -1, -1j)[p % 4] * k ** p


class EtdRk4:
    """Exponential time differencing RK4 for v' = L v + N(v) with diagonal L"""

    def __init__(self, linear: np.ndarray, nonlinear: Callable[[np.ndarray], np.ndarray], dt: float):
        self.linear = np.asarray(linear, dtype=np.complex128)
        self.nonlinear = nonlinear
        self.dt = dt
        hL = dt * self.linear
        self.E = np.exp(hL)
        self.E2 = np.exp(hL / 2.0)
        r = np.exp(1j * np.pi * (np.arange(1, CONTOUR_POINTS + 1) - 0.5) / CONTOUR_POINTS)
        LR = hL[:, None] + r[None, :]
        self.Q = dt * np.mean((np.exp(LR / 2.0) - 1.0) / LR, axis=1)
        self.f1 = dt * np.mean((-4.0 - LR + np.exp(LR) * (4.0 - 3.0 * LR + LR ** 2)) / LR ** 3, axis=1)
        self.f2 = dt * np.mean((2.0 + LR + np.exp(LR) * (-2.0 + LR)) / LR ** 3, axis=1)
        self.f3 = dt * np.mean((-4.0 - 3.0 * LR - LR ** 2 + np.exp(LR) * (4.0 - LR)) / LR ** 3, axis=1)
        # real symbols give real coefficients up to roundoff
        if np.all(self.linear.imag == 0):
            for name in ("Q", "f1", "f2", "f3"):
                setattr(self, name, getattr(self, name).real)

    def step(self, v: np.ndarray) -> np.ndarray:
        Nv = self.nonlinear(v)
        a = self.E2 * v + self.Q * Nv
        Na = self.nonlinear(a)
        b = self.E2 * v + self.Q * Na
        Nb = self.nonlinear(b)
        c = self.E2 * a + self.Q * (2.0 * Nb - Nv)
        Nc = self.nonlinear(c)
        return self.E * v + Nv * self.f1 + 2.0 * (Na + Nb) * self.f2 + Nc * self.f3


class PeriodicFluxModel:
    """
    Spectral model on a periodic grid of n points and the given period

    form="integral" reads each module as a flux under d/dx; form="differential"
    reads it as a pointwise term of u_t.
    """

    def __init__(
        self,
        n: int,
        period: float,
        terms: Sequence[Tuple[float, Module]],
        dealias: bool = True,
        form: str = "integral",
    ):
        if n < 4 or n % 2:
            raise ValueError("Spectral grid needs an even number of points >= 4")
        if form not in ("integral", "differential"):
            raise ValueError(f"Unknown form '{form}'")
        self.form = form
        shift = 1 if form == "integral" else 0
        self.n = n
        self.period = period
        self.k = 2.0 * np.pi * fft.rfftfreq(n, d=period / n)
        self.ik = 1j * self.k
        self.mask = np.ones(self.k.size)
        if dealias:
            self.mask[np.arange(self.k.size) > n // 3] = 0.0

        self.linear = np.zeros(self.k.size, dtype=np.complex128)
        self.products = []
        for coef, module in terms:
            if len(module) == 1:
                self.linear += coef * ik_power(self.k, module[0] + shift)
            else:
                self.products.append((float(coef), tuple(module)))
        self.orders = sorted({g for _, m in self.products for g in m})

    def to_spectral(self, u: np.ndarray) -> np.ndarray:
        return fft.rfft(u)

    def to_physical(self, v: np.ndarray) -> np.ndarray:
        return fft.irfft(v, n=self.n)

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        if not self.products:
            return np.zeros_like(v)
        derivs = {g: self.to_physical(ik_power(self.k, g) * v * self.mask) for g in self.orders}
        flux = np.zeros(self.n)
        for coef, module in self.products:
            prod = np.full(self.n, coef)
            for g in module:
                prod = prod * derivs[g]
            flux += prod
        spectral = self.to_spectral(flux) * self.mask
        return self.ik * spectral if self.form == "integral" else spectral

    def integrate(
        self,
        u0: np.ndarray,
        dt: float,
        steps_per_record: int,
        n_records: int,
        project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ) -> Tuple[np.ndarray, int]:
        """Returns records shaped (n, n_records), first column u0, and the step count"""
        stepper = EtdRk4(self.linear, self.nonlinear, dt)
        v = self.to_spectral(np.asarray(u0, dtype=np.float64))
        if project is not None:
            v = project(v)
        out = np.empty((self.n, n_records))
        out[:, 0] = u0
        steps = 0
        for r in range(1, n_records):
            for _ in range(steps_per_record):
                v = stepper.step(v)
                if project is not None:
                    v = project(v)
                steps += 1
            u = self.to_physical(v)
            peak = np.max(np.abs(u))
            if not np.isfinite(peak) or peak > BLOWUP_LIMIT:
                raise InstabilityError(f"Spectral solution blew up at record {r} (max |u| = {peak:.3e})")
            out[:, r] = u
        return out, steps


def odd_projection(v: np.ndarray) -> np.ndarray:
    """Keep the sine part; an odd real signal has purely imaginary coefficients"""
    return 1j * v.imag
