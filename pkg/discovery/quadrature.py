"""
Integral-form regression: Gauss-Legendre quadrature of the temporal term
over short intervals, boundary evaluation of flux terms, assembly of the
design matrices and their least-squares solve.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from discovery.errors import AssemblyError, DegenerateSystemError, GenomeError
from discovery.genome import Genome, Module, lhs_name, term_name
from discovery.surrogate import DifferentiableField, MAX_DX_ORDER

logger = logging.getLogger(__name__)

DEFAULT_RULE_SIZE = 5
RCOND = 1e-10


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return int(self.nodes.size)


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> QuadratureRule:
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1]"""
    if not 1 <= n <= 16:
        raise ValueError(f"Rule size must be in [1, 16], got {n}")
    i = np.arange(1, n + 1)
    x = np.cos(np.pi * (i - 0.25) / (n + 0.5))

    def legendre(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p_prev, p = np.ones_like(x), x.copy()
        for k in range(2, n + 1):
            p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
        if n == 1:
            return x.copy(), np.ones_like(x)
        dp = n * (x * p - p_prev) / (x * x - 1.0)
        return p, dp

    for _ in range(100):
        p, dp = legendre(x)
        step = p / dp
        x = x - step
        if np.max(np.abs(step)) < 1e-16:
            break
    p, dp = legendre(x)
    if np.max(np.abs(p)) >= 1e-14:
        raise ArithmeticError(f"Legendre root refinement did not converge for n={n}")
    weights = 2.0 / ((1.0 - x * x) * dp * dp)

    nodes = x[::-1]
    weights = weights[::-1]
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights)


@dataclass(frozen=True)
class IntegralInterval:
    midpoint: float
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"Interval length must be positive, got {self.length}")

    @property
    def left(self) -> float:
        return self.midpoint - 0.5 * self.length

    @property
    def right(self) -> float:
        return self.midpoint + 0.5 * self.length


def place_intervals(x_grid: Sequence[float], length: float) -> List[IntegralInterval]:
    """Intervals centred on grid nodes, keeping those that fit inside the grid range"""
    x = np.asarray(x_grid, dtype=np.float64)
    lo, hi = float(x[0]), float(x[-1])
    tol = 1e-12 * max(1.0, hi - lo)
    out = [
        IntegralInterval(float(xk), float(length))
        for xk in x
        if xk - 0.5 * length >= lo - tol and xk + 0.5 * length <= hi + tol
    ]
    if not out:
        raise ValueError(f"No interval of length {length} fits in [{lo}, {hi}]")
    return out


def integrate_lhs(
    net: DifferentiableField,
    interval: IntegralInterval,
    t: float,
    temporal_order: int,
    rule: QuadratureRule,
) -> float:
    return float(integrate_lhs_grid(net, [interval.midpoint], [t], interval.length, temporal_order, rule)[0, 0])


def integrate_lhs_grid(
    net: DifferentiableField,
    midpoints: Sequence[float],
    times: Sequence[float],
    length: float,
    temporal_order: int,
    rule: QuadratureRule,
) -> np.ndarray:
    """(L/2) sum_l A_l u_T(L/2 x_l + x_k, t_j) for every (k, j), shape (K, J)"""
    xk = np.asarray(midpoints, dtype=np.float64)
    tj = np.asarray(times, dtype=np.float64)
    half = 0.5 * length
    X = xk[:, None, None] + half * rule.nodes[None, None, :]
    T = np.broadcast_to(tj[None, :, None], (xk.size, tj.size, rule.size))
    X = np.broadcast_to(X, T.shape)
    table = net.derivative_table(X.ravel(), T.ravel(), 0, temporal_order)
    values = table[:, 0, temporal_order].reshape(T.shape)
    return half * values @ rule.weights


def boundary_term(net: DifferentiableField, term: Module, interval: IntegralInterval, t: float) -> float:
    if max(term) > MAX_DX_ORDER:
        raise ValueError(f"Factor order above {MAX_DX_ORDER} in {term}")
    table = net.derivative_table(np.array([interval.right, interval.left]), np.array([t, t]), max(term), 0)
    right = np.prod([table[0, g, 0] for g in term])
    left = np.prod([table[1, g, 0] for g in term])
    return float(right - left)


@dataclass(frozen=True)
class DesignMatrices:
    """Regression system; rows are t-major, row = j*K + k"""

    u_t: np.ndarray
    u_x: np.ndarray
    n_intervals: int
    n_times: int
    lhs: str
    terms: Tuple[str, ...]

    def row_index(self, k: int, j: int) -> int:
        return j * self.n_intervals + k

    def row_position(self, row: int) -> Tuple[int, int]:
        j, k = divmod(row, self.n_intervals)
        return k, j

    def to_frame(self) -> pd.DataFrame:
        k = np.tile(np.arange(self.n_intervals), self.n_times)
        j = np.repeat(np.arange(self.n_times), self.n_intervals)
        data = {"k": k, "j": j, self.lhs: self.u_t}
        for i, name in enumerate(self.terms):
            data[name] = self.u_x[:, i]
        return pd.DataFrame(data)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def check_finite(design: DesignMatrices) -> DesignMatrices:
    bad_t = ~np.isfinite(design.u_t)
    if bad_t.any():
        k, j = design.row_position(int(np.argmax(bad_t)))
        raise AssemblyError(k, j, design.lhs)
    bad_x = ~np.isfinite(design.u_x)
    if bad_x.any():
        row, col = np.argwhere(bad_x)[0]
        k, j = design.row_position(int(row))
        raise AssemblyError(k, j, design.terms[int(col)])
    return design


class TermLibrary:
    """
    Precomputed integral-form channels for a fixed set of intervals and times

    Every genome evaluated against the same intervals reuses the LHS integrals
    and the endpoint derivative values, so assembling a design matrix reduces
    to products and one subtraction per column.
    """

    def __init__(
        self,
        lhs: Dict[int, np.ndarray],
        right: np.ndarray,
        left: np.ndarray,
        n_intervals: int,
        n_times: int,
        length: float,
    ):
        self.lhs = lhs
        self.right = right
        self.left = left
        self.n_intervals = n_intervals
        self.n_times = n_times
        self.length = length
        self.max_order = right.shape[0] - 1

    @classmethod
    def build(
        cls,
        net: DifferentiableField,
        intervals: Sequence[IntegralInterval],
        times: Sequence[float],
        rule: QuadratureRule,
        max_order: int,
        lhs_orders: Sequence[int] = (1, 2),
    ) -> "TermLibrary":
        lengths = {iv.length for iv in intervals}
        if len(lengths) != 1:
            raise ValueError("All intervals in a library must share one length")
        length = lengths.pop()
        mids = np.array([iv.midpoint for iv in intervals])
        tj = np.asarray(times, dtype=np.float64)
        K, J = mids.size, tj.size

        lhs = {}
        for order in lhs_orders:
            lhs[order] = integrate_lhs_grid(net, mids, tj, length, order, rule).T.ravel()

        # t-major flattening: row = j*K + k
        T = np.repeat(tj, K)
        right_x = np.tile(mids + 0.5 * length, J)
        left_x = np.tile(mids - 0.5 * length, J)
        right = net.derivative_table(right_x, T, max_order, 0)[:, :, 0].T.copy()
        left = net.derivative_table(left_x, T, max_order, 0)[:, :, 0].T.copy()
        logger.debug(f"Term library: {K} intervals x {J} times, L={length}, max order {max_order}")
        return cls(lhs, right, left, K, J, length)

    def column(self, module: Module) -> np.ndarray:
        r = np.ones(self.right.shape[1])
        l = np.ones(self.left.shape[1])
        for g in module:
            r = r * self.right[g]
            l = l * self.left[g]
        return r - l

    def design(self, genome: Genome) -> DesignMatrices:
        if not genome.is_canonical():
            raise GenomeError(f"Genome {genome.notation()} is not canonical")
        if genome.lhs not in self.lhs:
            raise GenomeError(f"Library has no LHS order {genome.lhs}")
        if genome.max_order > self.max_order:
            raise GenomeError(f"Genome {genome.notation()} exceeds library order {self.max_order}")
        u_x = np.column_stack([self.column(m) for m in genome.modules])
        design = DesignMatrices(
            u_t=self.lhs[genome.lhs],
            u_x=u_x,
            n_intervals=self.n_intervals,
            n_times=self.n_times,
            lhs=lhs_name(genome.lhs, "integral"),
            terms=tuple(term_name(m) for m in genome.modules),
        )
        return check_finite(design)


def assemble(
    net: DifferentiableField,
    genome: Genome,
    intervals: Sequence[IntegralInterval],
    times: Sequence[float],
    rule: QuadratureRule,
) -> DesignMatrices:
    if not genome.is_canonical():
        raise GenomeError(f"Genome {genome.notation()} is not canonical")
    library = TermLibrary.build(net, intervals, times, rule, genome.max_order, (genome.lhs,))
    return library.design(genome)


@dataclass(frozen=True)
class LstsqResult:
    coefficients: np.ndarray
    mse: float
    rank: int
    singular_values: np.ndarray


def least_squares(u_x: np.ndarray, u_t: np.ndarray, rcond: float = RCOND) -> LstsqResult:
    """Minimum-norm least squares by SVD with a relative singular-value cutoff"""
    A = np.asarray(u_x, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    b = np.asarray(u_t, dtype=np.float64).ravel()
    if A.shape[0] < A.shape[1]:
        raise ValueError(f"Underdetermined system: {A.shape[0]} rows < {A.shape[1]} columns")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise DegenerateSystemError("Non-finite entries in the regression system")
    U, s, Vt = linalg.svd(A, full_matrices=False, check_finite=False)
    if s.size == 0 or not np.isfinite(s[0]) or s[0] == 0.0:
        raise DegenerateSystemError("All singular values vanish")
    keep = s > rcond * s[0]
    coefs = Vt[keep].T @ ((U[:, keep].T @ b) / s[keep])
    residual = b - A @ coefs
    mse = float(residual @ residual) / b.size
    return LstsqResult(coefs, mse, int(keep.sum()), s)
