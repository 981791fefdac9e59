"""
Stepwise discovery for spatially varying coefficients

Step one searches for a structure independently in several local windows
and votes. Step two keeps the winning structure fixed and solves one global
overdetermined system for the coefficient value at every grid node.
"""

import json
import logging
import math
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as sparse_linalg

from discovery.errors import (
    AssemblyError,
    DegenerateDiscoveryError,
    DegeneratePopulationError,
    DegenerateSystemError,
    ExtrapolationError,
    HeteroSolveDegenerateError,
)
from discovery.evolution import GaConfig, evolve
from discovery.genome import Genome, display_equation, term_name
from discovery.quadrature import (
    DEFAULT_RULE_SIZE,
    TermLibrary,
    gauss_legendre,
    integrate_lhs_grid,
    least_squares,
    place_intervals,
)
from discovery.surrogate import DifferentiableField

logger = logging.getLogger(__name__)

CV_THRESHOLD = 5.0
DENSE_FALLBACK_LIMIT = 4000


@dataclass(frozen=True)
class WindowPlan:
    windows: Tuple[Tuple[float, float], ...]
    t_range: Tuple[float, float]
    nx: int = 200
    nt: int = 100

    def __post_init__(self):
        if not self.windows:
            raise ValueError("WindowPlan needs at least one window")
        if self.nx < 3 or self.nt < 2:
            raise ValueError("Local meta grid needs nx >= 3 and nt >= 2")

    @classmethod
    def from_span(
        cls,
        span: Sequence[float],
        n_local: int,
        t_range: Sequence[float],
        nx: int = 200,
        nt: int = 100,
    ) -> "WindowPlan":
        if n_local < 1:
            raise ValueError("n_local must be >= 1")
        edges = np.linspace(span[0], span[1], n_local + 1)
        windows = tuple((float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]))
        return cls(windows, (float(t_range[0]), float(t_range[1])), nx, nt)

    @property
    def n_local(self) -> int:
        return len(self.windows)


@dataclass
class WindowOutcome:
    index: int
    x_range: Tuple[float, float]
    genome: Optional[Genome]
    fitness: float
    equation: str


@dataclass
class StabilityReport:
    outcomes: List[WindowOutcome]
    frequencies: Dict[str, int]
    best: Genome
    stability: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "window": o.index,
                    "x_start": o.x_range[0],
                    "x_end": o.x_range[1],
                    "structure": o.genome.notation() if o.genome else "none",
                    "fitness": o.fitness,
                    "equation": o.equation,
                }
                for o in self.outcomes
            ]
        )


def summarize_structures(outcomes: Sequence[WindowOutcome]) -> StabilityReport:
    """Modal structure and S = N_best / N_local; ties go to the lowest mean window fitness"""
    counts: Counter = Counter()
    fitnesses: Dict[Genome, List[float]] = {}
    for o in outcomes:
        counts[o.genome] += 1
        if o.genome is not None:
            fitnesses.setdefault(o.genome, []).append(o.fitness)
    candidates = [g for g in counts if g is not None]
    if not candidates:
        raise DegenerateDiscoveryError("No local window produced a structure")
    best = min(candidates, key=lambda g: (-counts[g], float(np.mean(fitnesses[g])), g.notation()))
    frequencies = {(g.notation() if g else "none"): n for g, n in counts.most_common()}
    return StabilityReport(list(outcomes), frequencies, best, counts[best] / len(outcomes))


def window_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def discover_windows(
    net: DifferentiableField,
    plan: WindowPlan,
    ga: GaConfig,
    rule_size: int = DEFAULT_RULE_SIZE,
    interval_length: Optional[float] = None,
    window_threads: int = 1,
    show_progress: bool = False,
) -> StabilityReport:
    """
    Run the GA in every local window and vote on the structure

    Each window samples its own meta grid; intervals default to 2 local grid
    steps. A window whose population degenerates counts as "no structure".
    """
    bounds = getattr(net, "bounds", None)
    for x_range in plan.windows:
        if bounds is not None and not bounds.contains(x_range, plan.t_range):
            raise ExtrapolationError(f"Window {x_range} x {plan.t_range} lies outside the surrogate domain")
    rule = gauss_legendre(rule_size)
    times = np.linspace(plan.t_range[0], plan.t_range[1], plan.nt)

    def run_window(i: int) -> WindowOutcome:
        x_range = plan.windows[i]
        x = np.linspace(x_range[0], x_range[1], plan.nx)
        length = interval_length if interval_length is not None else 2.0 * (x[1] - x[0])
        library = TermLibrary.build(
            net, place_intervals(x, length), times, rule, ga.bounds.max_order, ga.bounds.lhs_choices
        )
        cfg = replace(ga, seed=window_seed(ga.seed, i))
        try:
            report = evolve(cfg, library, show_progress=show_progress and window_threads == 1)
        except DegeneratePopulationError as e:
            logger.warning(f"Window {i} {x_range}: no structure ({e})")
            return WindowOutcome(i, x_range, None, math.inf, "")
        logger.info(f"Window {i} {x_range}: {report.equation}")
        return WindowOutcome(i, x_range, report.best_genome, report.best.fitness, report.equation)

    indices = range(plan.n_local)
    if window_threads > 1:
        with ThreadPoolExecutor(max_workers=window_threads) as pool:
            outcomes = list(pool.map(run_window, indices))
    else:
        outcomes = [run_window(i) for i in indices]
    report = summarize_structures(outcomes)
    logger.info(f"Best structure {report.best.notation()} with stability S={report.stability:.2f}")
    return report


@dataclass(frozen=True)
class CoefficientStats:
    mean: float
    std: float
    cv: Optional[float]
    kind: str
    zero_mean: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "std": self.std, "cv_percent": self.cv, "kind": self.kind, "zero_mean": self.zero_mean}


def classify(series: Sequence[float], threshold_percent: float = CV_THRESHOLD) -> CoefficientStats:
    """Constant when the coefficient of variation is below the threshold"""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise ValueError("Cannot classify an empty series")
    mu = float(np.mean(values))
    sigma = float(np.std(values))
    if mu == 0.0:
        return CoefficientStats(mu, sigma, None, "heterogeneous", zero_mean=True)
    cv = abs(sigma / mu) * 100.0
    return CoefficientStats(mu, sigma, cv, "constant" if cv < threshold_percent else "heterogeneous")


@dataclass
class HeteroSolveResult:
    x: np.ndarray
    structure: Genome
    terms: Tuple[str, ...]
    series: Dict[str, np.ndarray]
    stats: Dict[str, CoefficientStats]
    n_unknowns: int
    n_unknowns_interior: int
    n_components: int
    low_support_nodes: List[int]
    residual_mse: float
    solver: str

    def to_frame(self) -> pd.DataFrame:
        data = {"x": self.x}
        for i, name in enumerate(self.terms):
            data[f"C_{i}"] = self.series[name]
        return pd.DataFrame(data)

    def summary(self) -> Dict[str, Any]:
        return {
            "structure": self.structure.notation(),
            "terms": {f"C_{i}": name for i, name in enumerate(self.terms)},
            "stats": {f"C_{i}": self.stats[name].to_dict() for i, name in enumerate(self.terms)},
            "n_unknowns": self.n_unknowns,
            "n_unknowns_interior": self.n_unknowns_interior,
            "n_components": self.n_components,
            "low_support_nodes": self.low_support_nodes,
            "residual_mse": self.residual_mse,
            "solver": self.solver,
        }

    def save(self, csv_path: str, json_path: str) -> None:
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2)


def node_components(A: sparse.spmatrix, nx: int) -> int:
    """Connected components of the node graph induced by the column pattern of A"""
    pattern = sparse.csr_matrix(A, copy=True)
    pattern.data = np.ones_like(pattern.data)
    n_terms = pattern.shape[1] // nx
    # column n * nx + m belongs to node m
    fold = sparse.vstack([sparse.identity(nx, format="csr")] * n_terms, format="csr")
    nodes = pattern @ fold
    graph = (nodes.T @ nodes).tocsr()
    n_components, _ = csgraph.connected_components(graph, directed=False)
    return int(n_components)


def _solve_sparse(A: sparse.csr_matrix, b: np.ndarray) -> Tuple[np.ndarray, str]:
    normal = (A.T @ A).tocsc()
    rhs = A.T @ b
    with warnings.catch_warnings():
        warnings.simplefilter("error", sparse_linalg.MatrixRankWarning)
        try:
            solution = sparse_linalg.spsolve(normal, rhs)
            if np.all(np.isfinite(solution)):
                return solution, "normal_equations"
        except (sparse_linalg.MatrixRankWarning, RuntimeError) as e:
            logger.warning(f"Sparse normal equations failed ({e}); falling back")
    if A.shape[1] <= DENSE_FALLBACK_LIMIT:
        try:
            return least_squares(A.toarray(), b).coefficients, "svd"
        except DegenerateSystemError as e:
            raise HeteroSolveDegenerateError(str(e)) from e
    solution = sparse_linalg.lsqr(A, b, atol=1e-14, btol=1e-14, iter_lim=20 * A.shape[1])[0]
    if not np.all(np.isfinite(solution)):
        raise HeteroSolveDegenerateError("Iterative least squares produced non-finite coefficients")
    return solution, "lsqr"


def solve_hetero(
    net: DifferentiableField,
    structure: Genome,
    x_range: Sequence[float],
    t_range: Sequence[float],
    nx: int,
    nt: int,
    rule_size: int = DEFAULT_RULE_SIZE,
    threshold_percent: float = CV_THRESHOLD,
) -> HeteroSolveResult:
    """
    Solve for node-wise coefficients C_n(x_m) of a fixed structure

    For each interior node k and time t_j:
        int_{x_{k-1}}^{x_{k+1}} u_T dx = sum_n C_n(x_{k+1}) F_n(x_{k+1}, t_j) - C_n(x_{k-1}) F_n(x_{k-1}, t_j)
    Indices k +/- 1 only couple nodes of equal parity, so the node graph read
    off the column pattern of A has two components; endpoint nodes enter a
    single interval each.
    """
    if nx < 4:
        raise ValueError("Global meta grid needs nx >= 4")
    n_terms = len(structure.modules)
    if nt <= n_terms:
        raise ValueError(f"Need nt > number of terms ({nt} <= {n_terms})")
    bounds = getattr(net, "bounds", None)
    if bounds is not None and not bounds.contains(x_range, t_range):
        raise ExtrapolationError(f"Global meta range {tuple(x_range)} x {tuple(t_range)} outside the surrogate domain")

    x = np.linspace(x_range[0], x_range[1], nx)
    t = np.linspace(t_range[0], t_range[1], nt)
    dx = x[1] - x[0]
    X, T = np.meshgrid(x, t, indexing="ij")
    table = net.derivative_table(X.ravel(), T.ravel(), structure.max_order, 0)
    flux = np.empty((n_terms, nx, nt))
    for n, module in enumerate(structure.modules):
        prod = np.ones(X.size)
        for g in module:
            prod = prod * table[:, g, 0]
        flux[n] = prod.reshape(nx, nt)

    K = nx - 2
    lhs = integrate_lhs_grid(net, x[1:-1], t, 2.0 * dx, structure.lhs, gauss_legendre(rule_size))
    b = lhs.T.ravel()

    rows, cols, vals = [], [], []
    kk, jj = np.meshgrid(np.arange(1, nx - 1), np.arange(nt), indexing="xy")
    row_ids = (jj * K + (kk - 1)).ravel()
    k_flat, j_flat = kk.ravel(), jj.ravel()
    for n in range(n_terms):
        rows.extend([row_ids, row_ids])
        cols.extend([n * nx + k_flat + 1, n * nx + k_flat - 1])
        vals.extend([flux[n, k_flat + 1, j_flat], -flux[n, k_flat - 1, j_flat]])
    data = np.concatenate(vals)
    names = tuple(term_name(m) for m in structure.modules)
    if not np.all(np.isfinite(b)):
        row = int(np.argmax(~np.isfinite(b)))
        raise AssemblyError(row % K + 1, row // K, "lhs")
    if not np.all(np.isfinite(data)):
        bad = int(np.argmax(~np.isfinite(data)))
        per_term = 2 * row_ids.size
        row = int(np.concatenate(rows)[bad])
        raise AssemblyError(row % K + 1, row // K, names[bad // per_term])
    A = sparse.csr_matrix(
        (data, (np.concatenate(rows), np.concatenate(cols))), shape=(K * nt, n_terms * nx)
    )

    coefs, solver = _solve_sparse(A, b)
    residual = b - A @ coefs
    residual_mse = float(residual @ residual) / b.size

    touches = np.zeros(nx, dtype=int)
    touches[2:] += 1
    touches[:-2] += 1
    low_support = [int(m) for m in np.flatnonzero(touches < 2)]
    n_components = node_components(A, nx)
    if n_components != 2:
        logger.warning(f"Expected two node components (even and odd), found {n_components}")
    logger.info(
        f"Hetero solve: {A.shape[0]} equations, {A.shape[1]} unknowns "
        f"({n_terms * K} interior), solver={solver}, low-support nodes {low_support}"
    )

    series = {name: coefs[n * nx:(n + 1) * nx].copy() for n, name in enumerate(names)}
    stats = {name: classify(values, threshold_percent) for name, values in series.items()}
    for name, s in stats.items():
        cv = "undefined" if s.cv is None else f"{s.cv:.3f}%"
        logger.info(f"{name}: mean={s.mean:.4g}, std={s.std:.4g}, cv={cv} -> {s.kind}")
    return HeteroSolveResult(
        x=x,
        structure=structure,
        terms=names,
        series=series,
        stats=stats,
        n_unknowns=n_terms * nx,
        n_unknowns_interior=n_terms * K,
        n_components=n_components,
        low_support_nodes=low_support,
        residual_mse=residual_mse,
        solver=solver,
    )


def hetero_equation(result: HeteroSolveResult) -> str:
    """Display with each coefficient replaced by its mean"""
    means = [result.stats[name].mean for name in result.terms]
    return display_equation(result.structure, means, "integral")
