"""
Genome encoding of candidate PDE structures

A genome is an LHS temporal order plus a set of modules. Each module is a
multiset of spatial derivative orders whose product forms one flux term,
e.g. (0, 0) is u^2 and (0, 1) is u*u_x. Genomes are kept canonical: genes
sorted inside each module, modules sorted and deduplicated.
"""

import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from discovery.errors import GenomeError

Module = Tuple[int, ...]

LHS_CHOICES = (1, 2)


@dataclass(frozen=True)
class GenomeBounds:
    max_order: int = 3
    max_genes_per_module: int = 3
    max_modules: int = 5
    lhs_choices: Tuple[int, ...] = LHS_CHOICES

    def __post_init__(self):
        if self.max_order < 0 or self.max_genes_per_module < 1 or self.max_modules < 1:
            raise ValueError(f"Invalid genome bounds: {self}")
        choices = tuple(sorted(set(int(c) for c in self.lhs_choices)))
        if not choices or any(c not in LHS_CHOICES for c in choices):
            raise ValueError(f"lhs_choices must be a non-empty subset of {LHS_CHOICES}")
        object.__setattr__(self, "lhs_choices", choices)


@dataclass(frozen=True)
class Genome:
    lhs: int
    modules: Tuple[Module, ...]

    def __post_init__(self):
        if self.lhs not in LHS_CHOICES:
            raise GenomeError(f"LHS order must be one of {LHS_CHOICES}, got {self.lhs}")
        mods = tuple(tuple(int(g) for g in m) for m in self.modules)
        if not mods:
            raise GenomeError("Genome needs at least one module")
        for m in mods:
            if not m:
                raise GenomeError("Empty module")
            if any(g < 0 for g in m):
                raise GenomeError(f"Negative derivative order in module {m}")
        object.__setattr__(self, "modules", mods)

    @property
    def length(self) -> int:
        """Total gene count"""
        return sum(len(m) for m in self.modules)

    @property
    def max_order(self) -> int:
        return max(max(m) for m in self.modules)

    def is_canonical(self) -> bool:
        return self == canonicalize(self)

    def within(self, bounds: GenomeBounds) -> bool:
        return (
            self.lhs in bounds.lhs_choices
            and len(self.modules) <= bounds.max_modules
            and all(len(m) <= bounds.max_genes_per_module for m in self.modules)
            and self.max_order <= bounds.max_order
        )

    def notation(self) -> str:
        mods = ",".join("[" + ",".join(str(g) for g in m) + "]" for m in self.modules)
        return f"[{self.lhs}],{{{mods}}}"

    def __str__(self) -> str:
        return self.notation()


def canonicalize(genome: Genome) -> Genome:
    modules = sorted(set(tuple(sorted(m)) for m in genome.modules))
    return Genome(genome.lhs, tuple(modules))


def random_module(bounds: GenomeBounds, rng: np.random.Generator) -> Module:
    size = int(rng.integers(1, bounds.max_genes_per_module + 1))
    return tuple(int(g) for g in rng.integers(0, bounds.max_order + 1, size=size))


def random_genome(bounds: GenomeBounds, rng: np.random.Generator) -> Genome:
    lhs = int(bounds.lhs_choices[rng.integers(len(bounds.lhs_choices))])
    count = int(rng.integers(1, bounds.max_modules + 1))
    modules = [random_module(bounds, rng) for _ in range(count)]
    return canonicalize(Genome(lhs, tuple(modules)))


_GENOME_RE = re.compile(r"^\s*\[\s*(\d+)\s*\]\s*,\s*\{(.*)\}\s*$")
_MODULE_RE = re.compile(r"\[([^\[\]]*)\]")


def parse_genome(text: str) -> Genome:
    """Parse the bracket notation, e.g. "[1],{[0,0],[2]}", into a canonical genome"""
    match = _GENOME_RE.match(text)
    if not match:
        raise GenomeError(f"Cannot parse genome '{text}'")
    body = match.group(2)
    modules = []
    for part in _MODULE_RE.findall(body):
        genes = [g.strip() for g in part.split(",") if g.strip()]
        if not genes or not all(g.isdigit() for g in genes):
            raise GenomeError(f"Bad module '[{part}]' in '{text}'")
        modules.append(tuple(int(g) for g in genes))
    if _MODULE_RE.sub("", body).replace(",", "").strip():
        raise GenomeError(f"Unexpected characters in '{text}'")
    return canonicalize(Genome(int(match.group(1)), tuple(modules)))


def format_genome(genome: Genome) -> str:
    return genome.notation()


def _factor_name(order: int) -> str:
    return "u" if order == 0 else "u_" + "x" * order


def term_name(module: Module) -> str:
    """Render a module as a product, repeated factors as powers: (0, 0, 1) -> u^2*u_x"""
    parts = []
    for order in sorted(set(module)):
        count = module.count(order)
        name = _factor_name(order)
        parts.append(name if count == 1 else f"{name}^{count}")
    return "*".join(parts)


def lhs_name(lhs: int, mode: str = "integral") -> str:
    base = "u_" + "t" * lhs
    return f"∫{base} dx" if mode == "integral" else base


def _format_coefficient(c: float) -> str:
    return f"{abs(c):.4g}"


def render(lhs: str, terms: Sequence[Tuple[Optional[float], str]]) -> str:
    out = []
    for i, (coef, name) in enumerate(terms):
        if coef is None:
            piece = f"c{i}*{name}"
            out.append(piece if i == 0 else f"+ {piece}")
            continue
        piece = f"{_format_coefficient(coef)}*{name}"
        if i == 0:
            out.append(f"-{piece}" if coef < 0 else piece)
        else:
            out.append(f"{'-' if coef < 0 else '+'} {piece}")
    return f"{lhs} = " + " ".join(out)


def translate(genome: Genome, mode: str = "integral") -> Tuple[Tuple[Module, ...], str]:
    """
    Turn a canonical genome into its term descriptors and display string

    Integral mode reads each module as a flux F_n so that the column is
    F_n(right endpoint) - F_n(left endpoint); differential mode reads it as
    a pointwise product term.
    """
    if not genome.is_canonical():
        raise GenomeError(f"Genome {genome.notation()} is not canonical")
    text = render(lhs_name(genome.lhs, mode), [(None, term_name(m)) for m in genome.modules])
    return genome.modules, text


def display_equation(genome: Genome, coefficients: Sequence[float], mode: str = "integral") -> str:
    if len(coefficients) != len(genome.modules):
        raise ValueError("One coefficient per module is required")
    return render(lhs_name(genome.lhs, mode), [(float(c), term_name(m)) for c, m in zip(coefficients, genome.modules)])


def differentiate_module(module: Module) -> Dict[Module, int]:
    """Product rule: d/dx of a product of derivatives, like terms merged with multiplicity"""
    out: Dict[Module, int] = {}
    for i in range(len(module)):
        raised = list(module)
        raised[i] += 1
        key = tuple(sorted(raised))
        out[key] = out.get(key, 0) + 1
    return out


def to_differential(genome: Genome, coefficients: Sequence[float]) -> List[Tuple[float, Module]]:
    """Expand an integral-form equation u_T = d/dx(sum c_n F_n) into pointwise terms"""
    merged: Dict[Module, float] = {}
    for coef, module in zip(coefficients, genome.modules):
        for term, mult in differentiate_module(module).items():
            merged[term] = merged.get(term, 0.0) + float(coef) * mult
    return [(c, m) for m, c in sorted(merged.items())]


def display_differential(genome: Genome, coefficients: Sequence[float]) -> str:
    terms = to_differential(genome, coefficients)
    return render(lhs_name(genome.lhs, "differential"), [(c, term_name(m)) for c, m in terms])
