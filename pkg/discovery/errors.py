"""
Exception hierarchy for PDE discovery

Every error carries the process exit code the CLI reports for it.
"""

from typing import Dict, Optional


class PdeDiscoveryError(Exception):
    """Base class for all discovery failures"""

    exit_code = 1


class ConfigError(PdeDiscoveryError):
    """Invalid or inconsistent experiment configuration"""

    exit_code = 2


class NumericalError(PdeDiscoveryError):
    """A numerical stage could not produce a finite, trustworthy result"""

    exit_code = 3


class TrainingDivergedError(NumericalError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"Training diverged at step {step} (loss={loss})")


class UnsupportedOrderError(NumericalError, ValueError):
    def __init__(self, dx_order: int, dt_order: int, max_dx: int = 4, max_dt: int = 2):
        self.dx_order = dx_order
        self.dt_order = dt_order
        super().__init__(
            f"Derivative order (dx={dx_order}, dt={dt_order}) outside supported "
            f"range (dx<={max_dx}, dt<={max_dt})"
        )


class ExtrapolationError(NumericalError):
    """Meta-data requested outside the surrogate's training domain"""


class AssemblyError(NumericalError):
    def __init__(self, row_k: int, row_j: int, term: str):
        self.row_k = row_k
        self.row_j = row_j
        self.term = term
        super().__init__(f"Non-finite design entry at interval k={row_k}, time j={row_j}, term '{term}'")


class DegenerateSystemError(NumericalError):
    """All singular values fell below the cutoff"""


class InstabilityError(NumericalError):
    """A forward solver blew up"""


class CFLViolationError(NumericalError):
    def __init__(self, dt: float, suggested_dt: float):
        self.dt = dt
        self.suggested_dt = suggested_dt
        super().__init__(f"Time step {dt:.3e} violates the stability limit; use dt <= {suggested_dt:.3e}")


class NegativityError(NumericalError):
    """Solution left the non-negative regime the scheme requires"""


class RootSearchError(NumericalError):
    """Characteristic-equation roots could not be bracketed"""


class UnsupportedStructureError(NumericalError):
    """Discovered PDE cannot be re-solved by any reference scheme"""


class HeteroSolveDegenerateError(NumericalError):
    """Global heterogeneous-coefficient system is rank deficient beyond the fallback"""


class DegenerateDiscoveryError(PdeDiscoveryError):
    exit_code = 4


class DegeneratePopulationError(DegenerateDiscoveryError):
    def __init__(self, generation: int):
        self.generation = generation
        super().__init__(f"Every genome in generation {generation} has sentinel fitness")


class GenomeError(ValueError):
    """Genome violates the canonical-form or bound invariants"""


class StageError(PdeDiscoveryError):
    """A pipeline stage failed; records the stage and its upstream artifact hashes"""

    def __init__(self, stage: str, cause: BaseException, upstream_hashes: Optional[Dict[str, str]] = None):
        self.stage = stage
        self.cause = cause
        self.upstream_hashes = dict(upstream_hashes or {})
        self.exit_code = getattr(cause, "exit_code", 1)
        chain = ", ".join(f"{k}={v[:12]}" for k, v in self.upstream_hashes.items()) or "none"
        super().__init__(f"Stage '{stage}' failed: {cause} (upstream: {chain})")
