"""
Reference datasets for the benchmark PDEs

Periodic problems (KdV, Kuramoto-Sivashinsky) use the pseudo-spectral
ETDRK4 engine. The heterogeneous problems (convection-diffusion, wave,
Boussinesq) use conservative second-order finite differences with
half-node coefficients and explicit stepping under a checked time-step
limit. Every solver records a fixed number of frames on a uniform grid.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from discovery.errors import (
    CFLViolationError,
    InstabilityError,
    NegativityError,
    UnsupportedStructureError,
)
from discovery.genome import Genome, Module
from discovery.spectral import BLOWUP_LIMIT, PeriodicFluxModel, odd_projection
from discovery.surrogate import DomainBounds, SampleSet

logger = logging.getLogger(__name__)

FieldLike = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]

DT_SAFETY = 0.9

KS_TERMS: Tuple[Tuple[float, Module], ...] = ((-0.5, (0, 0)), (-1.0, (1,)), (-1.0, (3,)))


@dataclass(frozen=True)
class GridDataset:
    """u sampled on a uniform (x, t) grid; arrays are read-only"""

    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64)
        u = np.array(self.u, dtype=np.float64)
        if u.shape != (x.size, t.size):
            raise ValueError(f"u shape {u.shape} does not match grid ({x.size}, {t.size})")
        if x.size < 2 or t.size < 1:
            raise ValueError("Grid too small")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(t) <= 0):
            raise ValueError("Grid axes must be strictly increasing")
        if not np.all(np.isfinite(u)):
            raise ValueError("Dataset contains non-finite values")
        for a in (x, t, u):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def pde(self) -> str:
        return self.provenance.get("pde", "unknown")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    @property
    def size(self) -> int:
        return int(self.u.size)

    @property
    def bounds(self) -> DomainBounds:
        return DomainBounds(float(self.x[0]), float(self.x[-1]), float(self.t[0]), float(self.t[-1]))

    def with_values(self, u: np.ndarray, **provenance) -> "GridDataset":
        return GridDataset(self.x, self.t, u, {**self.provenance, **provenance})

    def header(self) -> str:
        dx = float(self.x[1] - self.x[0])
        dt = float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0
        return (
            f"pde={self.pde} nx={self.x.size} nt={self.t.size} x0={float(self.x[0])!r} dx={dx!r} "
            f"t0={float(self.t[0])!r} dt={dt!r} seed={int(self.provenance.get('seed', 0))} "
            f"gamma={float(self.provenance.get('gamma', 0.0))!r}"
        )

    def to_csv(self, path: str) -> None:
        """t-major CSV with a one-line header and a JSON provenance sidecar"""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("# " + self.header() + "\n")
            np.savetxt(f, self.u.T, fmt="%.17g", delimiter=",")
        with open(sidecar_path(path), "w", encoding="utf-8") as f:
            json.dump(self.provenance, f, indent=2, sort_keys=True, default=str)

    @classmethod
    def from_csv(cls, path: str) -> "GridDataset":
        with open(path, "r", encoding="utf-8") as f:
            first = f.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing dataset header")
        meta = dict(item.split("=", 1) for item in first[1:].split())
        nx, nt = int(meta["nx"]), int(meta["nt"])
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        if data.shape != (nt, nx):
            raise ValueError(f"{path}: body shape {data.shape} does not match header ({nt}, {nx})")
        x = float(meta["x0"]) + float(meta["dx"]) * np.arange(nx)
        t = float(meta["t0"]) + float(meta["dt"]) * np.arange(nt)
        provenance: Dict[str, Any] = {}
        side = sidecar_path(path)
        if os.path.exists(side):
            with open(side, "r", encoding="utf-8") as f:
                provenance = json.load(f)
        provenance.setdefault("pde", meta["pde"])
        provenance.setdefault("seed", int(meta["seed"]))
        provenance.setdefault("gamma", float(meta["gamma"]))
        return cls(x, t, data.T, provenance)


def sidecar_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".json"


def field_values(value: FieldLike, x: np.ndarray) -> np.ndarray:
    """Evaluate a coefficient given as a constant, an array or a callable of x"""
    if callable(value):
        out = np.array(value(x), dtype=np.float64)
    elif np.isscalar(value):
        out = np.full(x.shape, float(value))
    else:
        out = np.array(value, dtype=np.float64)
    if out.shape != x.shape:
        raise ValueError(f"Field evaluates to shape {out.shape}, expected {x.shape}")
    return out


def describe_field(value: FieldLike) -> Any:
    spec = getattr(value, "spec", None)
    if spec is not None and hasattr(spec, "to_dict"):
        return {"kle": spec.to_dict()}
    if np.isscalar(value):
        return float(value)
    if callable(value):
        return getattr(value, "__name__", "callable")
    return "array"


def _record_times(t_end: float, nt: int) -> np.ndarray:
    return np.linspace(0.0, t_end, nt)


def _substeps(record_dt: float, dt: float) -> Tuple[int, float]:
    n = max(1, int(math.ceil(record_dt / dt - 1e-9)))
    return n, record_dt / n


# --- periodic spectral problems -------------------------------------------

def _kdv_run(params: Dict[str, Any], terms: Sequence[Tuple[float, Module]], form: str = "integral") -> np.ndarray:
    n = params["n_modes"]
    x = -1.0 + 2.0 * np.arange(n) / n
    model = PeriodicFluxModel(n, 2.0, terms, form=form)
    steps_per_record, dt = _substeps(params["t_end"] / (params["nt"] - 1), params["dt"])
    u, _ = model.integrate(np.cos(np.pi * x), dt, steps_per_record, params["nt"])
    return u


def solve_kdv(
    nu: float = 0.0025,
    n_modes: int = 512,
    t_end: float = 1.0,
    nt: int = 201,
    dt: float = 1e-4,
) -> GridDataset:
    """u_t = -u u_x - nu u_xxx on [-1, 1) periodic, u(0, x) = cos(pi x)"""
    params = {"nu": nu, "n_modes": n_modes, "t_end": t_end, "nt": nt, "dt": dt}
    terms = ((-0.5, (0, 0)), (-nu, (2,)))
    u = _kdv_run(params, terms)
    x = -1.0 + 2.0 * np.arange(n_modes) / n_modes
    logger.info(f"KdV: {n_modes} modes, {nt} records to t={t_end}, dt={dt}")
    return GridDataset(x, _record_times(t_end, nt), u, {"pde": "kdv", "params": params, "scheme": "fourier-etdrk4"})


def _ks_run(params: Dict[str, Any], terms: Sequence[Tuple[float, Module]], form: str = "integral") -> np.ndarray:
    n_fine = params["n_fine"]
    h = 20.0 / n_fine
    # odd extension of [-10, 10] to a period of 40 enforces u = u_xx = 0 at both walls
    y = h * np.arange(2 * n_fine)
    model = PeriodicFluxModel(2 * n_fine, 40.0, terms, form=form)
    steps_per_record, dt = _substeps(params["t_end"] / (params["nt"] - 1), params["dt"])
    u, _ = model.integrate(np.sin(np.pi * y / 10.0), dt, steps_per_record, params["nt"], project=odd_projection)
    return u[:n_fine:2]


def solve_ks(
    n_fine: int = 1024,
    t_end: float = 50.0,
    nt: int = 251,
    dt: float = 1e-3,
) -> GridDataset:
    """u_t = -u u_x - u_xx - u_xxxx on [-10, 10], u(0, x) = sin(-pi x / 10), recorded on every other fine node"""
    if n_fine % 4:
        raise ValueError("n_fine must be a multiple of 4")
    params = {"n_fine": n_fine, "t_end": t_end, "nt": nt, "dt": dt}
    u = _ks_run(params, KS_TERMS)
    x = -10.0 + 20.0 * np.arange(0, n_fine, 2) / n_fine
    logger.info(f"KS: {2 * n_fine}-point odd extension, {nt} records to t={t_end}, dt={dt}")
    return GridDataset(x, _record_times(t_end, nt), u, {"pde": "ks", "params": params, "scheme": "odd-extension-etdrk4"})


# --- conservative finite differences --------------------------------------

def _half_nodes(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x[:-1] + x[1:])


def _check_dt(dt: Optional[float], limit: float, record_dt: float) -> Tuple[int, float]:
    if dt is not None:
        if dt > limit:
            raise CFLViolationError(dt, DT_SAFETY * limit)
        return _substeps(record_dt, dt)
    return _substeps(record_dt, min(record_dt, DT_SAFETY * limit))


def _check_blowup(u: np.ndarray, record: int, pde: str) -> None:
    peak = float(np.max(np.abs(u)))
    if not math.isfinite(peak) or peak > BLOWUP_LIMIT:
        raise InstabilityError(f"{pde} solution blew up at record {record} (max |u| = {peak:.3e})")


def _heun(
    rhs: Callable[[np.ndarray], np.ndarray],
    u0: np.ndarray,
    dt: float,
    steps_per_record: int,
    nt: int,
    pde: str,
    check: Optional[Callable[[np.ndarray, int], None]] = None,
) -> Tuple[np.ndarray, int]:
    u = u0.copy()
    out = np.empty((u.size, nt))
    out[:, 0] = u
    steps = 0
    for r in range(1, nt):
        for _ in range(steps_per_record):
            k1 = rhs(u)
            k2 = rhs(u + dt * k1)
            u = u + 0.5 * dt * (k1 + k2)
            steps += 1
        _check_blowup(u, r, pde)
        if check is not None:
            check(u, r)
        out[:, r] = u
    return out, steps


def solve_convdiff(
    D: FieldLike,
    v: float = -1.0,
    nx: int = 801,
    nt: int = 251,
    t_end: float = 2.5,
    length: float = 8.0,
    dt: Optional[float] = None,
    ic: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    boundary: str = "dirichlet",
) -> GridDataset:
    """
    u_t = d/dx(D(x) u_x + v u) with flux D_{i+1/2}(u_{i+1} - u_i)/dx + v (u_i + u_{i+1})/2

    boundary="dirichlet" pins both ends to zero; "noflux" closes the domain so
    that sum(u) dx is conserved.
    """
    if boundary not in ("dirichlet", "noflux"):
        raise ValueError(f"Unknown boundary '{boundary}'")
    x = np.linspace(0.0, length, nx)
    h = x[1] - x[0]
    d_half = field_values(D, _half_nodes(x))
    if np.any(d_half < 0):
        raise ValueError("Diffusivity must be non-negative")
    u0 = field_values(ic, x) if ic is not None else (length - x) * np.sin(x)
    if boundary == "dirichlet":
        u0[0] = u0[-1] = 0.0

    d_max = float(d_half.max())
    limit = min(
        h * h / (2.0 * d_max) if d_max > 0 else math.inf,
        h / abs(v) if v else math.inf,
    )
    steps_per_record, step = _check_dt(dt, limit, t_end / (nt - 1))

    def rhs(u: np.ndarray) -> np.ndarray:
        flux = d_half * (u[1:] - u[:-1]) / h + v * 0.5 * (u[1:] + u[:-1])
        du = np.zeros_like(u)
        du[1:-1] = (flux[1:] - flux[:-1]) / h
        if boundary == "noflux":
            du[0] = flux[0] / h
            du[-1] = -flux[-1] / h
        return du

    u, steps = _heun(rhs, u0, step, steps_per_record, nt, "convdiff")
    params = {"v": v, "nx": nx, "nt": nt, "t_end": t_end, "length": length, "dt": step, "boundary": boundary}
    logger.info(f"Conv-diffusion: {nx} nodes, {steps} Heun steps of {step:.3e}")
    return GridDataset(
        x, _record_times(t_end, nt), u,
        {"pde": "convdiff", "params": params, "D": describe_field(D), "scheme": "fv-central-heun", "steps": steps},
    )


def solve_wave(
    EA: FieldLike,
    nx: int = 401,
    nt: int = 251,
    t_end: float = 6.0,
    length: float = 8.0,
    dt: Optional[float] = None,
    ic: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> GridDataset:
    """
    u_tt = d/dx(EA(x) u_x), zero Dirichlet ends, zero initial velocity

    Default initial state is 0.5 sin(pi x / 4). Leapfrog in time; the staggered
    discrete energy at every record is kept in provenance["energy"].
    """
    x = np.linspace(0.0, length, nx)
    h = x[1] - x[0]
    ea_half = field_values(EA, _half_nodes(x))
    if np.any(ea_half <= 0):
        raise ValueError("EA must be positive")
    u0 = field_values(ic, x) if ic is not None else 0.5 * np.sin(np.pi * x / 4.0)
    u0[0] = u0[-1] = 0.0
    limit = h / math.sqrt(float(ea_half.max()))
    steps_per_record, step = _check_dt(dt, limit, t_end / (nt - 1))

    def accel(u: np.ndarray) -> np.ndarray:
        flux = ea_half * (u[1:] - u[:-1]) / h
        a = np.zeros_like(u)
        a[1:-1] = (flux[1:] - flux[:-1]) / h
        return a

    def energy(prev: np.ndarray, cur: np.ndarray) -> float:
        vel = (cur - prev) / step
        strain = ea_half * ((cur[1:] - cur[:-1]) / h) * ((prev[1:] - prev[:-1]) / h)
        return float(0.5 * h * (vel @ vel) + 0.5 * h * strain.sum())

    out = np.empty((nx, nt))
    out[:, 0] = u0
    prev = u0
    cur = u0 + 0.5 * step * step * accel(u0)
    energies = [energy(prev, cur)]
    steps = 1
    for r in range(1, nt):
        todo = steps_per_record - 1 if r == 1 else steps_per_record
        for _ in range(todo):
            prev, cur = cur, 2.0 * cur - prev + step * step * accel(cur)
            steps += 1
        _check_blowup(cur, r, "wave")
        out[:, r] = cur
        # energy between the recorded level and the next one
        nxt = 2.0 * cur - prev + step * step * accel(cur)
        energies.append(energy(cur, nxt))

    params = {"nx": nx, "nt": nt, "t_end": t_end, "length": length, "dt": step}
    logger.info(f"Wave: {nx} nodes, {steps} leapfrog steps of {step:.3e}")
    return GridDataset(
        x, _record_times(t_end, nt), out,
        {"pde": "wave", "params": params, "EA": describe_field(EA), "scheme": "leapfrog", "steps": steps, "energy": energies},
    )


def solve_boussinesq(
    K: FieldLike,
    nx: int = 401,
    nt: int = 251,
    t_end: float = 1.0,
    length: float = 1.0,
    dt: Optional[float] = None,
    ic: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> GridDataset:
    """u_t = d/dx(K(x) u u_x), u(0, x) = x sin(pi x), u = 0 at both ends"""
    x = np.linspace(0.0, length, nx)
    h = x[1] - x[0]
    k_half = field_values(K, _half_nodes(x))
    if np.any(k_half < 0):
        raise ValueError("K must be non-negative")
    u0 = field_values(ic, x) if ic is not None else x * np.sin(np.pi * x)
    u0[0] = u0[-1] = 0.0
    if np.any(u0 < 0):
        raise NegativityError("Initial state must be non-negative")
    # max principle: u never exceeds its initial peak
    diff_max = float(k_half.max()) * max(float(u0.max()), 1e-12)
    limit = h * h / (2.0 * diff_max) if diff_max > 0 else math.inf
    steps_per_record, step = _check_dt(dt, limit, t_end / (nt - 1))
    floor = -1e-10 * max(float(u0.max()), 1.0)

    def rhs(u: np.ndarray) -> np.ndarray:
        flux = k_half * 0.5 * (u[1:] + u[:-1]) * (u[1:] - u[:-1]) / h
        du = np.zeros_like(u)
        du[1:-1] = (flux[1:] - flux[:-1]) / h
        return du

    def check(u: np.ndarray, r: int) -> None:
        if u.min() < floor:
            raise NegativityError(f"Boussinesq solution went negative at record {r} (min {u.min():.3e})")

    u, steps = _heun(rhs, u0, step, steps_per_record, nt, "boussinesq", check)
    params = {"nx": nx, "nt": nt, "t_end": t_end, "length": length, "dt": step}
    logger.info(f"Boussinesq: {nx} nodes, {steps} Heun steps of {step:.3e}")
    return GridDataset(
        x, _record_times(t_end, nt), u,
        {"pde": "boussinesq", "params": params, "K": describe_field(K), "scheme": "fv-heun", "steps": steps},
    )


# --- observation model ----------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("Noise level must be >= 0")


def add_noise(dataset: GridDataset, spec: NoiseSpec) -> GridDataset:
    """u * (1 + gamma * e), e ~ Uniform(-1, 1) per entry"""
    if spec.gamma == 0.0:
        return dataset.with_values(dataset.u, gamma=0.0, noise_seed=spec.seed)
    rng = np.random.default_rng(spec.seed)
    e = rng.uniform(-1.0, 1.0, size=dataset.shape)
    return dataset.with_values(dataset.u * (1.0 + spec.gamma * e), gamma=spec.gamma, noise_seed=spec.seed)


def subsample(dataset: GridDataset, n: int, seed: int = 0) -> SampleSet:
    """n distinct grid points drawn uniformly without replacement"""
    if not 1 <= n <= dataset.size:
        raise ValueError(f"Sample size must be in [1, {dataset.size}], got {n}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(dataset.size, size=n, replace=False)
    i, j = np.divmod(flat, dataset.t.size)
    return SampleSet(dataset.x[i], dataset.t[j], dataset.u[i, j], dataset.bounds)


# --- posterior error ------------------------------------------------------

def solve_discovered(
    reference: GridDataset,
    genome: Genome,
    coefficients: Sequence[float],
    form: str = "integral",
) -> np.ndarray:
    """Re-solve a discovered constant-coefficient structure with the reference scheme"""
    if genome.lhs != 1:
        raise UnsupportedStructureError("Only first-order-in-time structures can be re-solved")
    if len(coefficients) != len(genome.modules):
        raise ValueError("One coefficient per module is required")
    terms = [(float(c), m) for c, m in zip(coefficients, genome.modules)]
    params = reference.provenance.get("params", {})
    if reference.pde == "kdv":
        return _kdv_run(params, terms, form)
    if reference.pde == "ks":
        return _ks_run(params, terms, form)
    raise UnsupportedStructureError(f"No reference scheme re-solves structures for '{reference.pde}'")


def solution_error(
    reference: GridDataset,
    genome: Genome,
    coefficients: Sequence[float],
    form: str = "integral",
) -> float:
    """Relative L2 discrepancy between the reference and the re-solved field, in percent"""
    try:
        u = solve_discovered(reference, genome, coefficients, form)
    except InstabilityError as e:
        logger.warning(f"Discovered equation is unstable under the reference scheme: {e}")
        return math.inf
    return float(np.linalg.norm(u - reference.u) / np.linalg.norm(reference.u) * 100.0)
