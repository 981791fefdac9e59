"""
Neural surrogate for the observed field u(x, t)

A small sine-activated fully connected network is fitted to scattered
observations with full-batch Adam. Mixed derivatives of the fitted network
are exact: truncated bivariate Taylor series are pushed through every affine
layer and every sine activation.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from discovery.errors import (
    ExtrapolationError,
    TrainingDivergedError,
    UnsupportedOrderError,
)

logger = logging.getLogger(__name__)

MAX_DX_ORDER = 4
MAX_DT_ORDER = 2
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainBounds:
    """Rectangle [x_min, x_max] x [t_min, t_max]"""

    x_min: float
    x_max: float
    t_min: float
    t_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.t_max > self.t_min):
            raise ValueError(f"Degenerate domain bounds: {self}")

    def contains(self, x_range: Sequence[float], t_range: Sequence[float], tol: float = 1e-9) -> bool:
        x_tol = tol * (self.x_max - self.x_min)
        t_tol = tol * (self.t_max - self.t_min)
        return (
            x_range[0] >= self.x_min - x_tol
            and x_range[1] <= self.x_max + x_tol
            and t_range[0] >= self.t_min - t_tol
            and t_range[1] <= self.t_max + t_tol
        )

    def to_dict(self) -> Dict[str, float]:
        return {"x_min": self.x_min, "x_max": self.x_max, "t_min": self.t_min, "t_max": self.t_max}


@dataclass(frozen=True)
class SampleSet:
    """Scattered observations u(x_i, t_i) inside declared bounds"""

    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    bounds: DomainBounds

    def __post_init__(self):
        x, t, u = (np.asarray(a, dtype=np.float64).ravel() for a in (self.x, self.t, self.u))
        if x.size == 0:
            raise ValueError("SampleSet must not be empty")
        if not (x.size == t.size == u.size):
            raise ValueError("x, t and u must have the same length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t)) and np.all(np.isfinite(u))):
            raise ValueError("SampleSet contains non-finite values")
        if not self.bounds.contains((x.min(), x.max()), (t.min(), t.max())):
            raise ValueError("SampleSet points lie outside the declared bounds")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "u", u)

    @classmethod
    def from_points(cls, points: Sequence[Tuple[float, float, float]], bounds: DomainBounds) -> "SampleSet":
        arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], bounds)

    def __len__(self) -> int:
        return int(self.x.size)


@dataclass
class TrainConfig:
    """Adam settings for fitting the surrogate"""

    learning_rate: float = 1e-3
    steps: int = 30000
    betas: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    report_every: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.report_every < 1:
            raise ValueError("report_every must be >= 1")
        self.betas = (float(self.betas[0]), float(self.betas[1]))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls(
            learning_rate=data.get("learning_rate", 1e-3),
            steps=data.get("steps", 30000),
            betas=(data.get("beta1", 0.9), data.get("beta2", 0.999)),
            epsilon=data.get("epsilon", 1e-8),
            batch_size=data.get("batch_size", 0),
            seed=data.get("seed", 0),
            report_every=data.get("report_every", 1000),
        )


class DifferentiableField(Protocol):
    """Anything that can report mixed derivatives of u on arrays of points"""

    bounds: Optional[DomainBounds]

    def derivative_table(self, x: np.ndarray, t: np.ndarray, dx_order: int, dt_order: int) -> np.ndarray:
        """Return array (N, dx_order+1, dt_order+1) of d^p/dx^p d^q/dt^q u"""
        ...


def _check_orders(dx_order: int, dt_order: int) -> None:
    if not (0 <= dx_order <= MAX_DX_ORDER and 0 <= dt_order <= MAX_DT_ORDER):
        raise UnsupportedOrderError(dx_order, dt_order, MAX_DX_ORDER, MAX_DT_ORDER)


# --- truncated bivariate Taylor arithmetic -------------------------------
# A series s[..., p, q] holds the coefficient of h^p k^q in f(x + h, t + k).

def _series_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    P, Q = a.shape[-2:]
    out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
    for p in range(P):
        for q in range(Q):
            acc = out[..., p, q]
            for i in range(p + 1):
                for j in range(q + 1):
                    acc += a[..., i, j] * b[..., p - i, q - j]
    return out


def _sin_series(s: np.ndarray) -> np.ndarray:
    P, Q = s.shape[-2:]
    g0 = s[..., 0, 0]
    delta = s.copy()
    delta[..., 0, 0] = 0.0
    sin0, cos0 = np.sin(g0), np.cos(g0)
    # d^m/dg^m sin(g) cycles sin, cos, -sin, -cos
    cycle = (sin0, cos0, -sin0, -cos0)
    out = np.zeros_like(s)
    out[..., 0, 0] = sin0
    top = (P - 1) + (Q - 1)
    power = delta
    for m in range(1, top + 1):
        out += (cycle[m % 4] / math.factorial(m))[..., None, None] * power
        if m < top:
            power = _series_mul(power, delta)
    return out


class MlpSurrogate:
    """Immutable sine MLP with affine input normalization to [-1, 1]^2"""

    chunk_size = 4096

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], bounds: DomainBounds):
        if len(weights) < 2 or len(weights) != len(biases):
            raise ValueError("Network needs at least one hidden layer and one bias per layer")
        ws = [np.array(w, dtype=np.float64) for w in weights]
        bs = [np.array(b, dtype=np.float64).ravel() for b in biases]
        if ws[0].shape[1] != 2 or ws[-1].shape[0] != 1:
            raise ValueError("Network must map 2 inputs to 1 output")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"Layer {i}: bias shape {b.shape} does not match weight shape {w.shape}")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(f"Layer {i}: fan-in {w.shape[1]} does not match previous width {ws[i - 1].shape[0]}")
        for a in ws + bs:
            a.setflags(write=False)
        self.weights: Tuple[np.ndarray, ...] = tuple(ws)
        self.biases: Tuple[np.ndarray, ...] = tuple(bs)
        self.bounds: Optional[DomainBounds] = bounds
        self.x_scale = 2.0 / (bounds.x_max - bounds.x_min)
        self.t_scale = 2.0 / (bounds.t_max - bounds.t_min)

    @classmethod
    def initialize(cls, hidden_layers: int, width: int, bounds: DomainBounds, seed: int = 0) -> "MlpSurrogate":
        """Glorot-uniform weights, zero biases"""
        if hidden_layers < 1 or width < 1:
            raise ValueError("Architecture needs >= 1 hidden layer of width >= 1")
        rng = np.random.default_rng([seed, 0])
        widths = [2] + [width] * hidden_layers + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, bounds)

    @property
    def widths(self) -> List[int]:
        return [2] + [w.shape[0] for w in self.weights]

    def normalize(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        b = self.bounds
        xh = self.x_scale * (np.asarray(x, dtype=np.float64) - b.x_min) - 1.0
        th = self.t_scale * (np.asarray(t, dtype=np.float64) - b.t_min) - 1.0
        return np.stack([np.ravel(xh), np.ravel(th)], axis=1)

    def forward(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        z = self.normalize(x, t)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = np.sin(z @ w.T + b)
        return (z @ self.weights[-1].T + self.biases[-1])[:, 0]

    def evaluate(self, x: float, t: float) -> float:
        return float(self.forward(np.array([x]), np.array([t]))[0])

    def derivative(self, x: float, t: float, dx_order: int, dt_order: int) -> float:
        table = self.derivative_table(np.array([x]), np.array([t]), dx_order, dt_order)
        return float(table[0, dx_order, dt_order])

    def derivative_table(self, x: np.ndarray, t: np.ndarray, dx_order: int, dt_order: int) -> np.ndarray:
        _check_orders(dx_order, dt_order)
        xf = np.ravel(np.asarray(x, dtype=np.float64))
        tf = np.ravel(np.asarray(t, dtype=np.float64))
        out = np.empty((xf.size, dx_order + 1, dt_order + 1))
        for start in range(0, xf.size, self.chunk_size):
            stop = start + self.chunk_size
            out[start:stop] = self._taylor(xf[start:stop], tf[start:stop], dx_order, dt_order)
        return out

    def _taylor(self, x: np.ndarray, t: np.ndarray, P1: int, Q1: int) -> np.ndarray:
        P, Q = P1 + 1, Q1 + 1
        xh = self.normalize(x, t)
        z = np.zeros((x.size, 2, P, Q))
        z[:, 0, 0, 0] = xh[:, 0]
        z[:, 1, 0, 0] = xh[:, 1]
        # chain rule through the input normalization
        if P > 1:
            z[:, 0, 1, 0] = self.x_scale
        if Q > 1:
            z[:, 1, 0, 1] = self.t_scale
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = np.einsum("oi,nipq->nopq", w, z)
            a[:, :, 0, 0] += b
            z = a if i == len(self.weights) - 1 else _sin_series(a)
        coeffs = z[:, 0]
        factorials = np.array([[math.factorial(p) * math.factorial(q) for q in range(Q)] for p in range(P)])
        return coeffs * factorials

    def with_output_scale(self, c: float) -> "MlpSurrogate":
        weights = list(self.weights)
        biases = list(self.biases)
        weights[-1] = weights[-1] * c
        biases[-1] = biases[-1] * c
        return MlpSurrogate(weights, biases, self.bounds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "widths": self.widths,
            "activation": "sin",
            "bounds": self.bounds.to_dict(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MlpSurrogate":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"Unsupported network format version: {data.get('format_version')}")
        net = cls(
            [np.array(w) for w in data["weights"]],
            [np.array(b) for b in data["biases"]],
            DomainBounds(**data["bounds"]),
        )
        if net.widths != list(data["widths"]):
            raise ValueError("Declared widths do not match weight shapes")
        return net

    def save(self, path: str) -> None:
        # repr-based JSON floats round-trip bit-exactly
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "MlpSurrogate":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class AnalyticField:
    """Closed-form field; derivatives supplied as callables keyed by (dx_order, dt_order)"""

    derivatives: Dict[Tuple[int, int], Any]
    bounds: Optional[DomainBounds] = None

    def derivative_table(self, x: np.ndarray, t: np.ndarray, dx_order: int, dt_order: int) -> np.ndarray:
        _check_orders(dx_order, dt_order)
        xf = np.ravel(np.asarray(x, dtype=np.float64))
        tf = np.ravel(np.asarray(t, dtype=np.float64))
        out = np.full((xf.size, dx_order + 1, dt_order + 1), np.nan)
        for (p, q), fn in self.derivatives.items():
            if p <= dx_order and q <= dt_order:
                out[:, p, q] = np.broadcast_to(fn(xf, tf), xf.shape)
        return out

    def evaluate(self, x: float, t: float) -> float:
        return float(self.derivative_table(np.array([x]), np.array([t]), 0, 0)[0, 0, 0])

    def derivative(self, x: float, t: float, dx_order: int, dt_order: int) -> float:
        return float(self.derivative_table(np.array([x]), np.array([t]), dx_order, dt_order)[0, dx_order, dt_order])


# --- training -------------------------------------------------------------

def _mse_and_grads(net_w: List[np.ndarray], net_b: List[np.ndarray], xh: np.ndarray, u: np.ndarray):
    acts = [xh]
    pre = []
    z = xh
    for w, b in zip(net_w[:-1], net_b[:-1]):
        a = z @ w.T + b
        pre.append(a)
        z = np.sin(a)
        acts.append(z)
    y = (z @ net_w[-1].T + net_b[-1])[:, 0]
    r = y - u
    loss = float(np.mean(r * r))

    g = (2.0 / u.size) * r[:, None]
    grad_w = [None] * len(net_w)
    grad_b = [None] * len(net_b)
    grad_w[-1] = g.T @ acts[-1]
    grad_b[-1] = g.sum(axis=0)
    delta = g @ net_w[-1]
    for i in range(len(net_w) - 2, -1, -1):
        da = delta * np.cos(pre[i])
        grad_w[i] = da.T @ acts[i]
        grad_b[i] = da.sum(axis=0)
        if i > 0:
            delta = da @ net_w[i]
    return loss, grad_w, grad_b


def train(
    samples: SampleSet,
    hidden_layers: int,
    width: int,
    cfg: TrainConfig,
    show_progress: bool = False,
) -> Tuple[MlpSurrogate, List[Tuple[int, float]]]:
    """
    Fit a sine MLP to the samples by minimizing the mean squared error

    Returns:
        The trained network and the loss history as (step, mse) pairs; the last
        entry is the full-data MSE of the returned network.
    """
    init = MlpSurrogate.initialize(hidden_layers, width, samples.bounds, cfg.seed)
    weights = [w.copy() for w in init.weights]
    biases = [b.copy() for b in init.biases]
    xh_all = init.normalize(samples.x, samples.t)
    u_all = samples.u

    params = weights + biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = cfg.betas
    batch_rng = np.random.default_rng([cfg.seed, 1])
    history: List[Tuple[int, float]] = []

    for step in tqdm(range(1, cfg.steps + 1), desc="surrogate", disable=not show_progress):
        if cfg.batch_size and cfg.batch_size < len(samples):
            idx = batch_rng.choice(len(samples), size=cfg.batch_size, replace=False)
            xh, u = xh_all[idx], u_all[idx]
        else:
            xh, u = xh_all, u_all
        loss, gw, gb = _mse_and_grads(weights, biases, xh, u)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        grads = gw + gb
        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * g * g
            m_hat = m[i] / (1.0 - b1 ** step)
            v_hat = v[i] / (1.0 - b2 ** step)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        if step % cfg.report_every == 0:
            history.append((step, loss))
            logger.debug(f"step {step}: mse={loss:.6e}")

    net = MlpSurrogate(weights, biases, samples.bounds)
    final = float(np.mean((net.forward(samples.x, samples.t) - u_all) ** 2))
    if not math.isfinite(final):
        raise TrainingDivergedError(cfg.steps, final)
    history.append((cfg.steps, final))
    logger.info(f"Surrogate trained: {net.widths}, {cfg.steps} steps, final mse={final:.3e}")
    return net, history


def evaluate(net: MlpSurrogate, x: float, t: float) -> float:
    return net.evaluate(x, t)


def derivative(net: MlpSurrogate, x: float, t: float, dx_order: int, dt_order: int) -> float:
    return net.derivative(x, t, dx_order, dt_order)


# --- meta-data ------------------------------------------------------------

@dataclass
class MetaGrid:
    """Dense regular grid of surrogate values and derivative channels, arrays shaped (N_x, N_t)"""

    x: np.ndarray
    t: np.ndarray
    channels: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def n_meta(self) -> int:
        return int(self.x.size * self.t.size)

    def channel(self, dx_order: int, dt_order: int) -> np.ndarray:
        return self.channels[(dx_order, dt_order)]


def make_meta_grid(
    net: DifferentiableField,
    x_range: Sequence[float],
    t_range: Sequence[float],
    nx: int,
    nt: int,
    channels: Sequence[Tuple[int, int]] = ((0, 0),),
    allow_extrapolation: bool = False,
) -> MetaGrid:
    """Sample the surrogate and its requested derivatives on a uniform grid"""
    if nx < 2 or nt < 2:
        raise ValueError("Meta grid needs at least 2 points per axis")
    bounds = getattr(net, "bounds", None)
    if bounds is not None and not bounds.contains(x_range, t_range):
        message = f"Meta range x={tuple(x_range)}, t={tuple(t_range)} outside training domain {bounds.to_dict()}"
        if not allow_extrapolation:
            raise ExtrapolationError(message)
        logger.warning(f"{message}; extrapolating on request")
    for a, b in channels:
        _check_orders(a, b)
    x = np.linspace(x_range[0], x_range[1], nx)
    t = np.linspace(t_range[0], t_range[1], nt)
    X, T = np.meshgrid(x, t, indexing="ij")
    max_a = max(a for a, _ in channels)
    max_b = max(b for _, b in channels)
    table = net.derivative_table(X.ravel(), T.ravel(), max_a, max_b)
    grid = MetaGrid(x=x, t=t)
    for a, b in channels:
        grid.channels[(a, b)] = table[:, a, b].reshape(nx, nt)
    return grid


class SurrogateTrainer:
    """Fits the surrogate from the `surrogate` config section"""

    def __init__(self, config: Dict[str, Any], show_progress: bool = False):
        self.config = config
        self.logger = logging.getLogger(f"{__name__}.SurrogateTrainer")
        section = config.get("surrogate", {})
        self.hidden_layers = section.get("hidden_layers", 5)
        self.width = section.get("width", 50)
        self.train_config = TrainConfig.from_dict(section.get("train", {}))
        self.show_progress = show_progress

    def fit(self, samples: SampleSet) -> Tuple[MlpSurrogate, List[Tuple[int, float]]]:
        self.logger.info(
            f"Training {self.hidden_layers}x{self.width} sine MLP on {len(samples)} samples "
            f"for {self.train_config.steps} steps"
        )
        return train(samples, self.hidden_layers, self.width, self.train_config, self.show_progress)
