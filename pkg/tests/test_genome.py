"""
Tests for genome encoding, notation and equation rendering
"""

import numpy as np
import pytest

from discovery.errors import GenomeError
from discovery.genome import (
    Genome,
    GenomeBounds,
    canonicalize,
    display_differential,
    display_equation,
    format_genome,
    parse_genome,
    random_genome,
    random_module,
    term_name,
    to_differential,
    translate,
)


class TestGenomeNotation:
    """Bracket notation and canonical form"""

    def test_parse_canonicalizes(self):
        genome = parse_genome("[1], {[2], [0,0], [2]}")
        assert genome == Genome(1, ((0, 0), (2,)))
        assert format_genome(genome) == "[1],{[0,0],[2]}"

    def test_genes_are_sorted_inside_modules(self):
        assert parse_genome("[2],{[1,0]}").modules == ((0, 1),)

    @pytest.mark.parametrize("text", ["[3],{[0]}", "[1],{}", "[1],{[a]}", "1,{[0]}", "[1],{[0]x}"])
    def test_malformed_notation(self, text):
        with pytest.raises(GenomeError):
            parse_genome(text)

    def test_length_counts_genes(self):
        assert parse_genome("[1],{[0,0],[2],[0,1,3]}").length == 6

    def test_canonical_check(self):
        raw = Genome(1, ((2,), (0, 0)))
        assert not raw.is_canonical()
        assert canonicalize(raw).is_canonical()

    def test_within_bounds(self):
        bounds = GenomeBounds(max_order=2, max_genes_per_module=2, max_modules=2, lhs_choices=(1,))
        assert parse_genome("[1],{[0,0],[2]}").within(bounds)
        assert not parse_genome("[1],{[3]}").within(bounds)
        assert not parse_genome("[2],{[1]}").within(bounds)
        assert not parse_genome("[1],{[0,0,0]}").within(bounds)

    def test_canonical_form_ignores_gene_and_module_order(self):
        bounds = GenomeBounds(max_order=3, max_genes_per_module=3, max_modules=5)
        rng = np.random.default_rng(21)
        for _ in range(1000):
            modules = [random_module(bounds, rng) for _ in range(int(rng.integers(1, 6)))]
            raw = Genome(int(rng.integers(1, 3)), tuple(modules))
            shuffled = [tuple(rng.permutation(m)) for m in modules]
            shuffled = [shuffled[i] for i in rng.permutation(len(shuffled))]
            canonical = canonicalize(raw)
            assert canonicalize(canonical) == canonical
            assert canonicalize(Genome(raw.lhs, tuple(shuffled))) == canonical
            assert set(canonical.modules) == {tuple(sorted(m)) for m in modules}


class TestRandomGenomes:
    """Sampling respects the configured bounds"""

    def test_random_genomes_are_canonical_and_bounded(self):
        bounds = GenomeBounds(max_order=3, max_genes_per_module=3, max_modules=5)
        for i in range(200):
            genome = random_genome(bounds, np.random.default_rng(i))
            assert genome.is_canonical()
            assert genome.within(bounds)

    def test_sampling_is_seeded(self):
        bounds = GenomeBounds()
        a = random_genome(bounds, np.random.default_rng([5, 0]))
        b = random_genome(bounds, np.random.default_rng([5, 0]))
        assert a == b

    def test_gene_orders_are_uniform(self):
        bounds = GenomeBounds(max_order=3, max_genes_per_module=3, max_modules=5)
        rng = np.random.default_rng(13)
        counts = np.zeros(4)
        for _ in range(10000):
            for module in random_genome(bounds, rng).modules:
                for gene in module:
                    counts[gene] += 1
        np.testing.assert_allclose(counts / counts.sum(), 0.25, atol=0.02)


class TestEquationDisplay:
    """Rendering of learned equations"""

    def test_term_names(self):
        assert term_name((0, 0)) == "u^2"
        assert term_name((0, 0, 1)) == "u^2*u_x"
        assert term_name((3,)) == "u_xxx"

    def test_integral_display(self):
        genome = parse_genome("[1],{[0,0],[2]}")
        text = display_equation(genome, [-0.497, -0.00249])
        assert text == "∫u_t dx = -0.497*u^2 - 0.00249*u_xx"

    def test_translate_leaves_coefficients_symbolic(self):
        modules, text = translate(parse_genome("[2],{[1]}"))
        assert modules == ((1,),)
        assert text == "∫u_tt dx = c0*u_x"

    def test_translate_rejects_non_canonical(self):
        with pytest.raises(GenomeError):
            translate(Genome(1, ((2,), (0,))))

    def test_coefficient_count_must_match(self):
        with pytest.raises(ValueError):
            display_equation(parse_genome("[1],{[1]}"), [1.0, 2.0])

    def test_distinct_genomes_translate_differently(self):
        bounds = GenomeBounds(max_order=3, max_genes_per_module=3, max_modules=5)
        rng = np.random.default_rng(17)
        genomes = {random_genome(bounds, rng) for _ in range(10000)}
        translations = {translate(g) for g in genomes}
        assert len(translations) == len(genomes)


class TestDifferentialForm:
    """Product-rule expansion of integral-form fluxes"""

    def test_kdv_flux_expands_to_pointwise_terms(self):
        terms = to_differential(parse_genome("[1],{[0,0],[2]}"), [-0.5, -0.0025])
        assert terms == [(-1.0, (0, 1)), (-0.0025, (3,))]

    def test_like_terms_are_merged(self):
        # d/dx(u u_x) = u_x^2 + u u_xx
        terms = dict((m, c) for c, m in to_differential(parse_genome("[1],{[0,1]}"), [2.0]))
        assert terms == {(1, 1): 2.0, (0, 2): 2.0}

    def test_differential_display(self):
        text = display_differential(parse_genome("[1],{[0,0],[1],[3]}"), [-0.5, -1.0, -1.0])
        assert text == "u_t = -1*u*u_x - 1*u_xx - 1*u_xxxx"
