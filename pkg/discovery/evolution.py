"""
Genetic search over PDE structures

Fitness is the regression MSE plus a parsimony penalty on the genome
length. Every random decision draws from a stream derived from
(seed, generation, pair/child, role), so the result does not depend on the
number of worker threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from discovery.errors import (
    AssemblyError,
    DegeneratePopulationError,
    DegenerateSystemError,
    GenomeError,
)
from discovery.genome import (
    Genome,
    GenomeBounds,
    Module,
    canonicalize,
    display_equation,
    lhs_name,
    random_genome,
    random_module,
    term_name,
    translate,
)
from discovery.quadrature import DesignMatrices, check_finite, least_squares
from discovery.surrogate import MetaGrid

logger = logging.getLogger(__name__)

MUTATION_KINDS = ("order", "add", "delete")

# stream roles
_INIT, _SHUFFLE, _CROSS, _MUTATE = range(4)


@dataclass
class GaConfig:
    population_size: int = 200
    generations: int = 100
    p_cross: float = 0.8
    p_mut: float = 0.2
    epsilon: float = 1e-3
    seed: int = 0
    bounds: GenomeBounds = field(default_factory=GenomeBounds)
    mode: str = "integral"
    threads: int = 1

    def __post_init__(self):
        if self.population_size < 2 or self.population_size % 2:
            raise ValueError("population_size must be even and >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        for name in ("p_cross", "p_mut"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.mode not in ("integral", "differential"):
            raise ValueError(f"Unknown mode '{self.mode}'")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        self.threads = max(1, int(self.threads))

    @classmethod
    def from_dict(cls, data: Dict[str, Any], **overrides) -> "GaConfig":
        bounds = data.get("genome", {})
        cfg = cls(
            population_size=data.get("population_size", 200),
            generations=data.get("generations", 100),
            p_cross=data.get("p_cross", 0.8),
            p_mut=data.get("p_mut", 0.2),
            epsilon=data.get("epsilon", 1e-3),
            seed=data.get("seed", 0),
            bounds=GenomeBounds(
                max_order=bounds.get("max_order", 3),
                max_genes_per_module=bounds.get("max_genes_per_module", 3),
                max_modules=bounds.get("max_modules", 5),
                lhs_choices=tuple(bounds.get("lhs_choices", (1, 2))),
            ),
            mode=data.get("mode", "integral"),
            threads=data.get("threads", 1),
        )
        return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class FitnessResult:
    mse: float
    length: int
    fitness: float
    coefficients: Tuple[float, ...] = ()

    @property
    def is_sentinel(self) -> bool:
        return math.isinf(self.fitness)


def sentinel(genome: Genome) -> FitnessResult:
    return FitnessResult(math.inf, genome.length, math.inf, ())


class RegressionContext(Protocol):
    def design(self, genome: Genome) -> DesignMatrices:
        ...


class PointwiseLibrary:
    """
    Differential-form context: pointwise derivative channels on a grid

    The LHS column is u_t (or u_tt) and each term column is the product of the
    module's derivative channels at every grid point.
    """

    def __init__(self, lhs: Dict[int, np.ndarray], channels: np.ndarray, n_x: int, n_t: int):
        self.lhs = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in lhs.items()}
        self.channels = np.asarray(channels, dtype=np.float64)
        self.n_x = n_x
        self.n_t = n_t
        self.max_order = self.channels.shape[0] - 1

    @classmethod
    def from_meta_grid(cls, grid: MetaGrid, max_order: int, lhs_orders: Sequence[int] = (1, 2)) -> "PointwiseLibrary":
        # t-major flattening to match the integral-form row order
        lhs = {q: grid.channel(0, q).T.ravel() for q in lhs_orders}
        channels = np.stack([grid.channel(p, 0).T.ravel() for p in range(max_order + 1)])
        return cls(lhs, channels, grid.x.size, grid.t.size)

    @classmethod
    def from_columns(cls, lhs: np.ndarray, channels: np.ndarray, lhs_order: int = 1) -> "PointwiseLibrary":
        n = np.asarray(lhs).size
        return cls({lhs_order: lhs}, channels, n, 1)

    def column(self, module: Module) -> np.ndarray:
        col = np.ones(self.channels.shape[1])
        for g in module:
            col = col * self.channels[g]
        return col

    def design(self, genome: Genome) -> DesignMatrices:
        if not genome.is_canonical():
            raise GenomeError(f"Genome {genome.notation()} is not canonical")
        if genome.lhs not in self.lhs or genome.max_order > self.max_order:
            raise GenomeError(f"Genome {genome.notation()} is outside this library")
        design = DesignMatrices(
            u_t=self.lhs[genome.lhs],
            u_x=np.column_stack([self.column(m) for m in genome.modules]),
            n_intervals=self.n_x,
            n_times=self.n_t,
            lhs=lhs_name(genome.lhs, "differential"),
            terms=tuple(term_name(m) for m in genome.modules),
        )
        return check_finite(design)


def fitness(genome: Genome, context: RegressionContext, epsilon: float) -> FitnessResult:
    """MSE + epsilon * total gene count; degenerate or non-finite systems score +inf"""
    if not genome.is_canonical():
        raise GenomeError(f"Genome {genome.notation()} is not canonical")
    try:
        design = context.design(genome)
        result = least_squares(design.u_x, design.u_t)
    except (AssemblyError, DegenerateSystemError) as e:
        logger.debug(f"{genome.notation()}: sentinel fitness ({e})")
        return sentinel(genome)
    if not (math.isfinite(result.mse) and np.all(np.isfinite(result.coefficients))):
        return sentinel(genome)
    value = result.mse + epsilon * genome.length
    return FitnessResult(result.mse, genome.length, value, tuple(float(c) for c in result.coefficients))


def fitness_differential(genome: Genome, context: PointwiseLibrary, epsilon: float) -> FitnessResult:
    if not isinstance(context, PointwiseLibrary):
        raise TypeError("Differential fitness needs a PointwiseLibrary context")
    return fitness(genome, context, epsilon)


def crossover(a: Genome, b: Genome, rng: np.random.Generator) -> Tuple[Genome, Genome]:
    """Swap one uniformly chosen module between the parents"""
    i = int(rng.integers(len(a.modules)))
    j = int(rng.integers(len(b.modules)))
    a_mods, b_mods = list(a.modules), list(b.modules)
    a_mods[i], b_mods[j] = b.modules[j], a.modules[i]
    return canonicalize(Genome(a.lhs, tuple(a_mods))), canonicalize(Genome(b.lhs, tuple(b_mods)))


def order_mutation(genome: Genome, bounds: GenomeBounds, rng: np.random.Generator) -> Genome:
    """Lower one gene's order by one; order 0 wraps to the highest order"""
    flat = [(mi, gi) for mi, m in enumerate(genome.modules) for gi in range(len(m))]
    mi, gi = flat[int(rng.integers(len(flat)))]
    module = list(genome.modules[mi])
    module[gi] = bounds.max_order if module[gi] == 0 else module[gi] - 1
    modules = list(genome.modules)
    modules[mi] = tuple(module)
    return canonicalize(Genome(genome.lhs, tuple(modules)))


def add_module_mutation(genome: Genome, bounds: GenomeBounds, rng: np.random.Generator) -> Genome:
    if len(genome.modules) >= bounds.max_modules:
        return genome
    return canonicalize(Genome(genome.lhs, genome.modules + (random_module(bounds, rng),)))


def delete_module_mutation(genome: Genome, bounds: GenomeBounds, rng: np.random.Generator) -> Genome:
    if len(genome.modules) == 1:
        return genome
    drop = int(rng.integers(len(genome.modules)))
    return Genome(genome.lhs, tuple(m for i, m in enumerate(genome.modules) if i != drop))


_MUTATIONS = {
    "order": order_mutation,
    "add": add_module_mutation,
    "delete": delete_module_mutation,
}


def choose_mutation(rng: np.random.Generator, p_mut: float) -> Optional[str]:
    """Which mutation fires, or None"""
    if rng.random() >= p_mut:
        return None
    return MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]


def mutate(
    genome: Genome,
    bounds: GenomeBounds,
    rng: np.random.Generator,
    p_mut: float = 0.2,
    kind: Optional[str] = None,
) -> Genome:
    if kind is None:
        kind = choose_mutation(rng, p_mut)
        if kind is None:
            return genome
    return _MUTATIONS[kind](genome, bounds, rng)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


@dataclass
class EvolutionReport:
    best_genome: Genome
    best: FitnessResult
    trace: List[float]
    evaluations: int
    mode: str = "integral"
    history: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def equation(self) -> str:
        return display_equation(self.best_genome, self.best.coefficients, self.mode)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["generation", "best_fitness", "best_equation", "mse", "length"])

    def write_trace(self, path: str) -> None:
        self.trace_frame().to_csv(path, index=False, float_format="%.17g")


class GeneticSearch:
    """Generational GA with a best-ever incumbent"""

    def __init__(self, cfg: GaConfig, context: RegressionContext, show_progress: bool = False):
        self.cfg = cfg
        self.context = context
        self.show_progress = show_progress
        self.logger = logging.getLogger(f"{__name__}.GeneticSearch")
        self._memo: Dict[Genome, FitnessResult] = {}
        self._display: Dict[Genome, str] = {}
        self.evaluations = 0

    def _score(self, genome: Genome) -> FitnessResult:
        return fitness(genome, self.context, self.cfg.epsilon)

    def evaluate(self, genomes: Sequence[Genome], executor: Optional[ThreadPoolExecutor]) -> List[FitnessResult]:
        pending = [g for g in dict.fromkeys(genomes) if g not in self._memo]
        if executor is not None and len(pending) > 1:
            results = list(executor.map(self._score, pending))
        else:
            results = [self._score(g) for g in pending]
        for g, r in zip(pending, results):
            self._memo[g] = r
        self.evaluations += len(pending)
        return [self._memo[g] for g in genomes]

    def display(self, genome: Genome) -> str:
        text = self._display.get(genome)
        if text is None:
            text = translate(genome, self.cfg.mode)[1]
            self._display[genome] = text
        return text

    def _rank_key(self, genome: Genome, result: FitnessResult) -> Tuple[float, str]:
        return (result.fitness, self.display(genome))

    def run(self) -> EvolutionReport:
        cfg = self.cfg
        P = cfg.population_size
        executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        try:
            population = [random_genome(cfg.bounds, stream(cfg.seed, 0, _INIT, i)) for i in range(P)]
            scores = self.evaluate(population, executor)
            if all(s.is_sentinel for s in scores):
                raise DegeneratePopulationError(0)
            best_i = min(range(P), key=lambda i: self._rank_key(population[i], scores[i]))
            incumbent, incumbent_fit = population[best_i], scores[best_i]
            trace = [incumbent_fit.fitness]
            history = [self._history_row(0, incumbent, incumbent_fit)]

            for gen in tqdm(range(1, cfg.generations + 1), desc="evolve", disable=not self.show_progress):
                order = stream(cfg.seed, gen, _SHUFFLE).permutation(P)
                children: List[Genome] = []
                for pair in range(P // 2):
                    a, b = population[order[2 * pair]], population[order[2 * pair + 1]]
                    for cross_pass in range(2):
                        rng = stream(cfg.seed, gen, _CROSS, pair, cross_pass)
                        if rng.random() < cfg.p_cross:
                            children.extend(crossover(a, b, rng))
                        else:
                            children.extend((a, b))
                children = [
                    mutate(c, cfg.bounds, stream(cfg.seed, gen, _MUTATE, i), cfg.p_mut)
                    for i, c in enumerate(children)
                ]
                scores = self.evaluate(children, executor)
                if all(s.is_sentinel for s in scores):
                    raise DegeneratePopulationError(gen)
                ranked = sorted(range(len(children)), key=lambda i: self._rank_key(children[i], scores[i]))
                population = [children[i] for i in ranked[:P]]
                top = ranked[0]
                if self._rank_key(children[top], scores[top]) < self._rank_key(incumbent, incumbent_fit):
                    incumbent, incumbent_fit = children[top], scores[top]
                trace.append(incumbent_fit.fitness)
                history.append(self._history_row(gen, incumbent, incumbent_fit))
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        report = EvolutionReport(incumbent, incumbent_fit, trace, self.evaluations, cfg.mode, history)
        self.logger.info(
            f"Best after {cfg.generations} generations: {report.equation} "
            f"(fitness={incumbent_fit.fitness:.4e}, {self.evaluations} evaluations)"
        )
        return report

    def _history_row(self, gen: int, genome: Genome, result: FitnessResult) -> Dict[str, Any]:
        return {
            "generation": gen,
            "best_fitness": result.fitness,
            "best_equation": display_equation(genome, result.coefficients, self.cfg.mode),
            "mse": result.mse,
            "length": result.length,
        }


def evolve(cfg: GaConfig, context: RegressionContext, show_progress: bool = False) -> EvolutionReport:
    return GeneticSearch(cfg, context, show_progress).run()
