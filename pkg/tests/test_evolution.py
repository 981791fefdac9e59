"""
Tests for the genetic structure search
"""

import itertools
import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from discovery.errors import DegeneratePopulationError
from discovery.evolution import (
    MUTATION_KINDS,
    GaConfig,
    PointwiseLibrary,
    add_module_mutation,
    choose_mutation,
    crossover,
    delete_module_mutation,
    evolve,
    fitness,
    fitness_differential,
    mutate,
    order_mutation,
)
from discovery.genome import Genome, GenomeBounds, canonicalize, parse_genome, random_genome
from discovery.quadrature import least_squares
from discovery.surrogate import MetaGrid

PLANTED = "[1],{[0,0],[1]}"


def planted_library(seed: int = 0, n: int = 300) -> PointwiseLibrary:
    """u_t = -0.5 u^2 + 2 u_x over random, independent channels of order 0..2"""
    rng = np.random.default_rng(seed)
    channels = rng.standard_normal((3, n))
    lhs = -0.5 * channels[0] ** 2 + 2.0 * channels[1]
    return PointwiseLibrary.from_columns(lhs, channels)


class TestFitness:
    """Regression fitness with a parsimony penalty"""

    @pytest.fixture
    def library(self):
        return planted_library()

    def test_planted_model_has_zero_mse(self, library):
        result = fitness(parse_genome(PLANTED), library, 1e-3)
        assert result.mse < 1e-25
        assert result.length == 3
        assert result.fitness == pytest.approx(3e-3)
        np.testing.assert_allclose(result.coefficients, [-0.5, 2.0], rtol=1e-10)

    def test_planted_model_is_the_global_minimum_up_to_two_modules(self, library):
        bounds = GenomeBounds(max_order=2, max_genes_per_module=2, max_modules=2, lhs_choices=(1,))
        candidates = [m for size in (1, 2) for m in itertools.combinations_with_replacement(range(3), size)]
        best = None
        for count in (1, 2):
            for modules in itertools.combinations(candidates, count):
                genome = canonicalize(Genome(1, modules))
                assert genome.within(bounds)
                score = fitness(genome, library, 1e-3).fitness
                if best is None or score < best[0]:
                    best = (score, genome)
        assert best[1].notation() == PLANTED

    def test_non_finite_channels_give_sentinel(self):
        channels = np.ones((2, 10))
        channels[1, 3] = np.nan
        library = PointwiseLibrary.from_columns(np.ones(10), channels)
        assert fitness(parse_genome("[1],{[1]}"), library, 1e-3).is_sentinel
        assert not fitness(parse_genome("[1],{[0]}"), library, 1e-3).is_sentinel

    def test_differential_fitness_needs_pointwise_context(self, library):
        assert fitness_differential(parse_genome(PLANTED), library, 1e-3).mse < 1e-25
        with pytest.raises(TypeError):
            fitness_differential(parse_genome(PLANTED), object(), 1e-3)

    def test_zero_penalty_fitness_is_the_mse(self, library):
        bounds = GenomeBounds(max_order=2, max_genes_per_module=2, max_modules=3, lhs_choices=(1,))
        rng = np.random.default_rng(2)
        for _ in range(50):
            genome = random_genome(bounds, rng)
            result = fitness(genome, library, 0.0)
            design = library.design(genome)
            assert result.fitness == result.mse
            assert result.mse == least_squares(design.u_x, design.u_t).mse

    def test_uniform_rescaling_keeps_rankings_within_a_degree_class(self, library):
        c = 3.0
        scaled = PointwiseLibrary.from_columns(c * library.lhs[1], c * library.channels)
        groups = [
            ["[1],{[0]}", "[1],{[1]}", "[1],{[2]}"],
            ["[1],{[0],[1]}", "[1],{[0],[2]}", "[1],{[1],[2]}"],
            ["[1],{[0,0]}", "[1],{[0,1]}", "[1],{[0,2]}", "[1],{[1,1]}", "[1],{[1,2]}", "[1],{[2,2]}"],
        ]
        for group in groups:
            genomes = [parse_genome(text) for text in group]
            before = np.argsort([fitness(g, library, 1e-3).fitness for g in genomes])
            after = np.argsort([fitness(g, scaled, 1e-3).fitness for g in genomes])
            assert before.tolist() == after.tolist()

    def test_constant_field_makes_derivative_terms_degenerate(self):
        x = np.linspace(0.0, 1.0, 6)
        t = np.linspace(0.0, 1.0, 4)
        X, _ = np.meshgrid(x, t, indexing="ij")
        zero = np.zeros_like(X)
        grid = MetaGrid(x=x, t=t, channels={(0, 0): np.full_like(X, 2.0), (1, 0): zero, (2, 0): zero, (0, 1): zero})
        library = PointwiseLibrary.from_meta_grid(grid, max_order=2, lhs_orders=(1,))
        for text in ("[1],{[1]}", "[1],{[2]}", "[1],{[1,2]}", "[1],{[0,1],[2]}"):
            assert fitness_differential(parse_genome(text), library, 1e-3).is_sentinel


class TestOperators:
    """Crossover and the three mutations"""

    @pytest.fixture
    def bounds(self):
        return GenomeBounds(max_order=3, max_genes_per_module=3, max_modules=3)

    def test_crossover_exchanges_modules(self):
        a, b = parse_genome("[1],{[0],[1]}"), parse_genome("[2],{[2],[3]}")
        c, d = crossover(a, b, np.random.default_rng(0))
        assert c.lhs == 1 and d.lhs == 2
        assert len(c.modules) == 2 and len(d.modules) == 2
        assert set(c.modules) | set(d.modules) == {(0,), (1,), (2,), (3,)}
        assert c.is_canonical() and d.is_canonical()

    def test_order_mutation_wraps_zero_to_max_order(self, bounds):
        assert order_mutation(parse_genome("[1],{[0]}"), bounds, np.random.default_rng(0)) == parse_genome("[1],{[3]}")
        assert order_mutation(parse_genome("[1],{[2]}"), bounds, np.random.default_rng(0)) == parse_genome("[1],{[1]}")

    def test_add_mutation_respects_module_cap(self, bounds):
        full = parse_genome("[1],{[0],[1],[2]}")
        assert add_module_mutation(full, bounds, np.random.default_rng(0)) == full
        grown = add_module_mutation(parse_genome("[1],{[3,3,3]}"), bounds, np.random.default_rng(1))
        assert 1 <= len(grown.modules) <= 2
        assert grown.within(bounds)

    def test_delete_mutation_keeps_one_module(self, bounds):
        single = parse_genome("[1],{[1]}")
        assert delete_module_mutation(single, bounds, np.random.default_rng(0)) == single
        assert len(delete_module_mutation(parse_genome("[1],{[0],[1]}"), bounds, np.random.default_rng(0)).modules) == 1

    def test_mutation_probability_zero_is_identity(self, bounds):
        genome = parse_genome("[1],{[0],[1]}")
        for seed in range(20):
            assert mutate(genome, bounds, np.random.default_rng(seed), p_mut=0.0) == genome

    def test_mutation_kinds_are_equally_likely(self):
        rng = np.random.default_rng(4)
        counts = dict.fromkeys(MUTATION_KINDS, 0)
        draws = 0
        while sum(counts.values()) < 10000:
            kind = choose_mutation(rng, 0.2)
            draws += 1
            if kind is not None:
                counts[kind] += 1
        for kind in MUTATION_KINDS:
            assert abs(counts[kind] / 10000 - 1 / 3) < 0.03
        assert abs(10000 / draws - 0.2) < 0.01

    def test_crossover_children_are_canonical_and_bounded(self, bounds):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            a, b = random_genome(bounds, rng), random_genome(bounds, rng)
            c, d = crossover(a, b, rng)
            for child in (c, d):
                assert child.is_canonical()
                assert child.within(bounds)
            assert (c.lhs, d.lhs) == (a.lhs, b.lhs)
            assert len(c.modules) + len(d.modules) <= len(a.modules) + len(b.modules)
            assert set(c.modules) | set(d.modules) <= set(a.modules) | set(b.modules)


class TestGeneticSearch:
    """End-to-end search on synthetic libraries"""

    @pytest.fixture
    def config(self):
        return GaConfig(
            population_size=40,
            generations=40,
            p_cross=0.8,
            p_mut=0.2,
            epsilon=1e-3,
            bounds=GenomeBounds(max_order=2, max_genes_per_module=2, max_modules=3, lhs_choices=(1,)),
            mode="differential",
        )

    def test_planted_support_is_recovered_across_seeds(self, config):
        library = planted_library()
        hits = 0
        for seed in range(10):
            cfg = replace(config, seed=seed)
            report = evolve(cfg, library)
            hits += report.best_genome.notation() == PLANTED
        assert hits >= 9

    def test_trace_never_gets_worse(self, config):
        report = evolve(config, planted_library())
        assert len(report.trace) == config.generations + 1
        assert all(b <= a for a, b in zip(report.trace, report.trace[1:]))

    def test_final_best_is_never_worse_than_the_initial_best(self, config):
        library = planted_library(seed=1)
        for seed in range(5):
            initial = evolve(replace(config, seed=seed, generations=0), library)
            final = evolve(replace(config, seed=seed, generations=20), library)
            assert final.trace[0] == initial.best.fitness
            assert final.best.fitness <= initial.best.fitness
            assert final.trace[-1] <= final.trace[0]

    def test_result_does_not_depend_on_threads(self, config):
        library = planted_library(seed=3)
        serial = evolve(replace(config, seed=7, threads=1), library)
        threaded = evolve(replace(config, seed=7, threads=4), library)
        assert serial.best_genome == threaded.best_genome
        assert serial.trace == threaded.trace
        assert serial.best.coefficients == threaded.best.coefficients

    def test_all_sentinel_population_is_degenerate(self, config):
        library = PointwiseLibrary.from_columns(np.ones(10), np.full((3, 10), np.nan))
        with pytest.raises(DegeneratePopulationError) as info:
            evolve(config, library)
        assert info.value.generation == 0

    def test_trace_file_has_one_row_per_generation(self, config, tmp_path):
        report = evolve(replace(config, generations=5), planted_library())
        path = tmp_path / "trace.csv"
        report.write_trace(str(path))
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["generation", "best_fitness", "best_equation", "mse", "length"]
        assert frame["generation"].tolist() == list(range(6))
        assert report.equation.startswith("u_t = ")


class TestGaConfig:
    """Validation and construction from config sections"""

    def test_odd_population_is_rejected(self):
        with pytest.raises(ValueError):
            GaConfig(population_size=11)

    def test_probabilities_must_be_in_unit_interval(self):
        with pytest.raises(ValueError):
            GaConfig(p_mut=1.5)

    def test_from_dict_reads_nested_bounds(self):
        cfg = GaConfig.from_dict(
            {"population_size": 20, "genome": {"max_order": 4, "lhs_choices": [2]}}, epsilon=1e-5, threads=0
        )
        assert cfg.population_size == 20
        assert cfg.bounds.max_order == 4
        assert cfg.bounds.lhs_choices == (2,)
        assert cfg.epsilon == 1e-5
        assert cfg.threads == 1


class TestPointwiseLibrary:
    """Differential-form context built from meta-data"""

    def test_rows_follow_time_major_order(self):
        x = np.linspace(0.0, 1.0, 4)
        t = np.linspace(0.0, 1.0, 3)
        X, T = np.meshgrid(x, t, indexing="ij")
        grid = MetaGrid(x=x, t=t, channels={(0, 0): X + 10 * T, (1, 0): np.ones_like(X), (0, 1): 10 * np.ones_like(X)})
        library = PointwiseLibrary.from_meta_grid(grid, max_order=1, lhs_orders=(1,))
        design = library.design(parse_genome("[1],{[0]}"))
        assert design.u_x.shape == (12, 1)
        row = design.row_index(2, 1)
        assert design.u_x[row, 0] == pytest.approx(x[2] + 10 * t[1])
        assert design.lhs == "u_t"
        assert math.isclose(design.u_t[row], 10.0)
