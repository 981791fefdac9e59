"""
pdediscover: experiment runner
Orchestrates the discovery pipeline as a LangGraph state graph
"""

import os
import sys
import math
import logging
import functools
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pandas as pd
from langgraph.graph import StateGraph, END
from pydantic import BaseModel, Field
from typing_extensions import TypedDict

from backend.artifact_cache import ArtifactCache
from backend.experiment_config import ExperimentConfig, with_overrides
from backend.performance_monitor import PerformanceMonitor, time_operation
from backend.utils import StageTimer, ensure_directory_exists, load_json_file, save_json_file
from discovery.errors import (
    ConfigError,
    DegenerateDiscoveryError,
    ExtrapolationError,
    NumericalError,
    PdeDiscoveryError,
    StageError,
    UnsupportedStructureError,
)
from discovery.evolution import EvolutionReport, GaConfig, PointwiseLibrary, evolve
from discovery.genome import display_differential, display_equation, parse_genome
from discovery.pdegen import (
    GridDataset,
    NoiseSpec,
    add_noise,
    solution_error,
    solve_boussinesq,
    solve_convdiff,
    solve_kdv,
    solve_ks,
    solve_wave,
    subsample,
)
from discovery.quadrature import TermLibrary, gauss_legendre, place_intervals
from discovery.randfield import KleField, KleSpec, sample_field
from discovery.stepwise import WindowPlan, discover_windows, hetero_equation, solve_hetero
from discovery.surrogate import DomainBounds, MlpSurrogate, SampleSet, SurrogateTrainer, make_meta_grid

# default domain length of the heterogeneous solvers
_DOMAIN_LENGTH = {"convdiff": 8.0, "wave": 8.0, "boussinesq": 1.0}

# term whose node-wise coefficient is the planted field
_FIELD_TERM = {"convdiff": "u_x", "wave": "u_x", "boussinesq": "u*u_x"}

SWEEP_TARGETS = {
    "interval": "discovery.interval_length",
    "noise": "dataset.noise",
    "datasize": "dataset.subsample",
    "variance": "dataset.field.variance",
}


class PipelineState(TypedDict, total=False):
    """State shared across all stages of one run"""
    target: str
    keys: Dict[str, str]
    dataset: GridDataset
    observed: GridDataset
    samples: SampleSet
    network: MlpSurrogate
    context: Any
    evolution: Dict[str, Any]
    solution_error: Optional[float]
    stability: Dict[str, Any]
    hetero: Dict[str, Any]


class DiscoveryReport(BaseModel):
    """Everything a run produced, plus the config that reproduces it"""
    name: str
    mode: str
    equation: str
    structure: str
    differential_form: Optional[str] = None
    coefficients: List[float] = Field(default_factory=list)
    fitness: Optional[float] = None
    mse: Optional[float] = None
    stability: Optional[float] = None
    frequencies: Dict[str, int] = Field(default_factory=dict)
    cv_table: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    coefficient_file: Optional[str] = None
    field_error_percent: Optional[float] = None
    solution_error_percent: Optional[float] = None
    support_recovered: Optional[bool] = None
    hashes: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DiscoveryReport":
        return cls.model_validate_json(text)

    def save(self, path: str) -> None:
        ensure_directory_exists(os.path.dirname(path) or ".")
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "DiscoveryReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def stage(name: str):
    """Time a node and wrap its failures with the stage name and upstream hashes"""
    def decorator(func: Callable) -> Callable:
        timed = time_operation(name)(func)

        @functools.wraps(func)
        def wrapper(self, state: PipelineState) -> Dict[str, Any]:
            try:
                return timed(self, state)
            except (PdeDiscoveryError, ValueError) as e:
                if isinstance(e, StageError):
                    raise
                raise StageError(name, e, state.get("keys", {})) from e
        return wrapper
    return decorator


def planted_field(experiment: ExperimentConfig):
    """Coefficient field for heterogeneous datasets: a constant or exp of a KLE sample"""
    block = experiment.dataset.field
    if block is None:
        return None
    if block.kind == "constant":
        return block.value
    length = float(experiment.dataset.params.get("length", _DOMAIN_LENGTH[experiment.dataset.pde]))
    spec = KleSpec(
        length=length,
        correlation_length=block.correlation_length,
        variance=block.variance,
        n_modes=block.n_modes,
        mean=block.mean,
        seed=block.seed,
    )
    return sample_field(spec)


def generate_dataset(experiment: ExperimentConfig) -> GridDataset:
    """Reference solution for the dataset block (noise-free)"""
    block = experiment.dataset
    if block.file is not None:
        return GridDataset.from_csv(block.file)
    params = dict(block.params)
    if block.pde == "kdv":
        return solve_kdv(**params)
    if block.pde == "ks":
        return solve_ks(**params)
    field = planted_field(experiment)
    if block.pde == "convdiff":
        return solve_convdiff(field, **params)
    if block.pde == "wave":
        return solve_wave(field, **params)
    return solve_boussinesq(field, **params)


class ExperimentRunner:
    """Runs one experiment config through the staged pipeline"""

    def __init__(self, config: Dict[str, Any], experiment: ExperimentConfig, out_dir: Optional[str] = None):
        self.config = config
        self.experiment = experiment
        self.logger = logging.getLogger(f"{__name__}.ExperimentRunner")

        app = config.get("app", {})
        self.threads = max(1, int(app.get("threads", 1)))
        self.show_progress = bool(app.get("progress", False))
        self.out_dir = out_dir or os.path.join(app.get("out_dir", "data/runs"), experiment.name)

        self.cache = ArtifactCache(config)
        self.performance_monitor = PerformanceMonitor()
        self.workflow = self._build_workflow()

    def _build_workflow(self):
        """Build the LangGraph workflow"""
        workflow = StateGraph(PipelineState)

        workflow.add_node("generate", self.generate_node)
        workflow.add_node("noise", self.noise_node)
        workflow.add_node("subsample", self.subsample_node)
        workflow.add_node("train", self.train_node)
        workflow.add_node("meta", self.meta_node)
        workflow.add_node("discover", self.discover_node)
        workflow.add_node("error", self.error_node)
        workflow.add_node("windows", self.windows_node)
        workflow.add_node("hetero_solve", self.hetero_solve_node)

        workflow.add_edge("generate", "noise")
        workflow.add_conditional_edges("noise", self.route_after_noise, {"stop": END, "continue": "subsample"})
        workflow.add_edge("subsample", "train")
        workflow.add_conditional_edges(
            "train",
            self.route_after_train,
            {"stop": END, "constant": "meta", "hetero": "windows"},
        )
        workflow.add_edge("meta", "discover")
        workflow.add_edge("discover", "error")
        workflow.add_edge("error", END)
        workflow.add_edge("windows", "hetero_solve")
        workflow.add_edge("hetero_solve", END)

        workflow.set_entry_point("generate")
        return workflow.compile()

    # --- routing -------------------------------------------------------

    def route_after_noise(self, state: PipelineState) -> str:
        return "stop" if state.get("target") == "generate" else "continue"

    def route_after_train(self, state: PipelineState) -> str:
        if state.get("target") == "train":
            return "stop"
        return "hetero" if self.experiment.discovery.mode == "hetero" else "constant"

    # --- caching helpers -----------------------------------------------

    def _cached(
        self,
        stage_name: str,
        payload: Any,
        upstream: Optional[str],
        save: Callable[[str], None],
        load: Callable[[str], Any],
    ):
        """Compute-or-reuse; fresh artifacts are read back so both paths see identical data"""
        key = self.cache.key(stage_name, payload, upstream)
        path = self.cache.lookup(stage_name, key)
        if path is None:
            path = self.cache.prepare(stage_name, key)
            save(path)
            self.cache.commit(stage_name, key, {"experiment": self.experiment.name, "upstream": upstream})
        else:
            origin = self.cache.metadata(stage_name, key)
            self.logger.info(
                f"Reusing {stage_name} artifact {key[:12]} built by experiment "
                f"'{origin.get('experiment', 'unknown')}' (upstream {str(origin.get('upstream'))[:12]})"
            )
        return key, load(path)

    def _keys(self, state: PipelineState, stage_name: str, key: str) -> Dict[str, str]:
        return {**state.get("keys", {}), stage_name: key}

    def _ga_config(self) -> GaConfig:
        discovery = self.experiment.discovery
        return GaConfig.from_dict(
            discovery.ga.model_dump(),
            epsilon=discovery.effective_epsilon,
            mode="differential" if discovery.mode == "differential" else "integral",
            threads=self.threads,
        )

    # --- nodes ---------------------------------------------------------

    @stage("generate")
    def generate_node(self, state: PipelineState) -> Dict[str, Any]:
        block = self.experiment.dataset
        payload: Dict[str, Any] = {
            "pde": block.pde,
            "params": block.params,
            "field": block.field.model_dump() if block.field else None,
        }
        if block.file is not None:
            payload["file"] = {"path": os.path.abspath(block.file), "mtime": os.path.getmtime(block.file)}

        def save(path: str) -> None:
            generate_dataset(self.experiment).to_csv(os.path.join(path, "dataset.csv"))
            field = planted_field(self.experiment)
            if isinstance(field, KleField):
                field.to_csv(os.path.join(path, "field.csv"), os.path.join(path, "field_spec.json"))

        key, dataset = self._cached(
            "generate", payload, None, save, lambda p: GridDataset.from_csv(os.path.join(p, "dataset.csv"))
        )
        self.logger.info(f"Dataset {dataset.pde}: grid {dataset.shape}")
        return {"dataset": dataset, "keys": self._keys(state, "generate", key)}

    @stage("noise")
    def noise_node(self, state: PipelineState) -> Dict[str, Any]:
        block = self.experiment.dataset
        spec = NoiseSpec(block.noise, block.noise_seed)

        def save(path: str) -> None:
            add_noise(state["dataset"], spec).to_csv(os.path.join(path, "observed.csv"))

        key, observed = self._cached(
            "noise",
            {"gamma": spec.gamma, "seed": spec.seed},
            state["keys"]["generate"],
            save,
            lambda p: GridDataset.from_csv(os.path.join(p, "observed.csv")),
        )
        if spec.gamma > 0:
            self.logger.info(f"Added {100 * spec.gamma:.1f}% multiplicative noise")
        return {"observed": observed, "keys": self._keys(state, "noise", key)}

    @stage("subsample")
    def subsample_node(self, state: PipelineState) -> Dict[str, Any]:
        block = self.experiment.dataset

        def save(path: str) -> None:
            samples = subsample(state["observed"], block.subsample, block.subsample_seed)
            pd.DataFrame({"x": samples.x, "t": samples.t, "u": samples.u}).to_csv(
                os.path.join(path, "samples.csv"), index=False, float_format="%.17g"
            )
            save_json_file(samples.bounds.to_dict(), os.path.join(path, "bounds.json"))

        def load(path: str) -> SampleSet:
            frame = pd.read_csv(os.path.join(path, "samples.csv"), float_precision="round_trip")
            bounds = DomainBounds(**load_json_file(os.path.join(path, "bounds.json")))
            return SampleSet(frame["x"].to_numpy(), frame["t"].to_numpy(), frame["u"].to_numpy(), bounds)

        key, samples = self._cached(
            "subsample",
            {"n": block.subsample, "seed": block.subsample_seed},
            state["keys"]["noise"],
            save,
            load,
        )
        self.logger.info(f"Drew {len(samples)} observations")
        return {"samples": samples, "keys": self._keys(state, "subsample", key)}

    @stage("train")
    def train_node(self, state: PipelineState) -> Dict[str, Any]:
        block = self.experiment.surrogate
        payload = block.model_dump()
        if block.network_file is not None:
            payload["network_file"] = {
                "path": os.path.abspath(block.network_file),
                "mtime": os.path.getmtime(block.network_file),
            }

        def save(path: str) -> None:
            if block.network_file is not None:
                net, history = MlpSurrogate.load(block.network_file), []
                self.logger.info(f"Using pretrained network {block.network_file}")
            else:
                trainer = SurrogateTrainer({"surrogate": block.model_dump()}, self.show_progress)
                net, history = trainer.fit(state["samples"])
            net.save(os.path.join(path, "network.json"))
            pd.DataFrame(history, columns=["step", "mse"]).to_csv(
                os.path.join(path, "loss.csv"), index=False, float_format="%.17g"
            )

        key, net = self._cached(
            "train", payload, state["keys"]["subsample"], save,
            lambda p: MlpSurrogate.load(os.path.join(p, "network.json")),
        )
        return {"network": net, "keys": self._keys(state, "train", key)}

    @stage("meta")
    def meta_node(self, state: PipelineState) -> Dict[str, Any]:
        meta = self.experiment.meta
        discovery = self.experiment.discovery
        bounds = discovery.ga.genome
        payload = {
            "meta": meta.model_dump(),
            "mode": discovery.mode,
            "interval_length": discovery.interval_length,
            "quadrature_nodes": discovery.quadrature_nodes,
            "max_order": bounds.max_order,
            "lhs_choices": bounds.lhs_choices,
        }
        net = state["network"]

        def save(path: str) -> None:
            if discovery.mode == "differential":
                channels = [(p, 0) for p in range(bounds.max_order + 1)] + [(0, q) for q in bounds.lhs_choices]
                grid = make_meta_grid(
                    net, meta.x_range, meta.t_range, meta.nx, meta.nt, channels, meta.allow_extrapolation
                )
                library = PointwiseLibrary.from_meta_grid(grid, bounds.max_order, bounds.lhs_choices)
                arrays = {f"lhs_{q}": v for q, v in library.lhs.items()}
                np.savez(os.path.join(path, "library.npz"), channels=library.channels, **arrays)
                save_json_file({"kind": "pointwise", "n_x": library.n_x, "n_t": library.n_t}, os.path.join(path, "library.json"))
                return
            self._check_domain(net, meta.x_range, meta.t_range)
            x = np.linspace(meta.x_range[0], meta.x_range[1], meta.nx)
            times = np.linspace(meta.t_range[0], meta.t_range[1], meta.nt)
            length = 2.0 * (x[1] - x[0]) if discovery.interval_length == "2dx" else float(discovery.interval_length)
            library = TermLibrary.build(
                net, place_intervals(x, length), times, gauss_legendre(discovery.quadrature_nodes),
                bounds.max_order, bounds.lhs_choices,
            )
            arrays = {f"lhs_{q}": v for q, v in library.lhs.items()}
            np.savez(os.path.join(path, "library.npz"), right=library.right, left=library.left, **arrays)
            save_json_file(
                {"kind": "integral", "n_intervals": library.n_intervals, "n_times": library.n_times, "length": library.length},
                os.path.join(path, "library.json"),
            )

        key, context = self._cached("meta", payload, state["keys"]["train"], save, self._load_library)
        return {"context": context, "keys": self._keys(state, "meta", key)}

    def _check_domain(self, net: MlpSurrogate, x_range, t_range) -> None:
        if net.bounds.contains(x_range, t_range):
            return
        message = f"Meta range x={tuple(x_range)}, t={tuple(t_range)} outside training domain {net.bounds.to_dict()}"
        if not self.experiment.meta.allow_extrapolation:
            raise ExtrapolationError(message)
        self.logger.warning(f"{message}; extrapolating on request")

    @staticmethod
    def _load_library(path: str):
        info = load_json_file(os.path.join(path, "library.json"))
        with np.load(os.path.join(path, "library.npz")) as data:
            lhs = {int(name.split("_")[1]): data[name] for name in data.files if name.startswith("lhs_")}
            if info["kind"] == "pointwise":
                return PointwiseLibrary(lhs, data["channels"], info["n_x"], info["n_t"])
            return TermLibrary(lhs, data["right"], data["left"], info["n_intervals"], info["n_times"], info["length"])

    @stage("discover")
    def discover_node(self, state: PipelineState) -> Dict[str, Any]:
        ga = self._ga_config()
        payload = {"ga": self.experiment.discovery.ga.model_dump(), "epsilon": ga.epsilon, "mode": ga.mode}

        def save(path: str) -> None:
            report: EvolutionReport = evolve(ga, state["context"], self.show_progress)
            report.write_trace(os.path.join(path, "evolution_trace.csv"))
            save_json_file(
                {
                    "structure": report.best_genome.notation(),
                    "coefficients": list(report.best.coefficients),
                    "fitness": report.best.fitness,
                    "mse": report.best.mse,
                    "evaluations": report.evaluations,
                },
                os.path.join(path, "evolution.json"),
            )

        def load(path: str) -> Dict[str, Any]:
            result = load_json_file(os.path.join(path, "evolution.json"))
            result["trace_file"] = os.path.join(path, "evolution_trace.csv")
            return result

        key, result = self._cached("discover", payload, state["keys"]["meta"], save, load)
        genome = parse_genome(result["structure"])
        self.logger.info(f"Discovered: {display_equation(genome, result['coefficients'], ga.mode)}")
        return {"evolution": result, "keys": self._keys(state, "discover", key)}

    @stage("error")
    def error_node(self, state: PipelineState) -> Dict[str, Any]:
        if not self.experiment.evaluation.solution_error:
            return {"solution_error": None}
        result = state["evolution"]
        form = "differential" if self.experiment.discovery.mode == "differential" else "integral"

        def save(path: str) -> None:
            try:
                value = solution_error(
                    state["dataset"], parse_genome(result["structure"]), result["coefficients"], form
                )
            except UnsupportedStructureError as e:
                self.logger.warning(f"Solution error not evaluable: {e}")
                value = None
            save_json_file({"solution_error_percent": _finite(value)}, os.path.join(path, "error.json"))

        key, value = self._cached(
            "error", {"form": form}, state["keys"]["discover"], save,
            lambda p: load_json_file(os.path.join(p, "error.json"))["solution_error_percent"],
        )
        if value is not None:
            self.logger.info(f"Solution error: {value:.3f}%")
        return {"solution_error": value, "keys": self._keys(state, "error", key)}

    @stage("windows")
    def windows_node(self, state: PipelineState) -> Dict[str, Any]:
        discovery = self.experiment.discovery
        block = discovery.windows
        plan = WindowPlan.from_span(block.span, block.n_local, block.t_range, block.nx, block.nt)
        ga = self._ga_config()
        length = None if discovery.interval_length == "2dx" else float(discovery.interval_length)
        payload = {
            "windows": block.model_dump(),
            "ga": discovery.ga.model_dump(),
            "epsilon": ga.epsilon,
            "interval_length": discovery.interval_length,
            "quadrature_nodes": discovery.quadrature_nodes,
        }

        def save(path: str) -> None:
            report = discover_windows(
                state["network"], plan, replace(ga, threads=1) if self.threads > 1 else ga, discovery.quadrature_nodes, length,
                window_threads=self.threads, show_progress=self.show_progress,
            )
            report.to_frame().to_csv(os.path.join(path, "windows.csv"), index=False, float_format="%.17g")
            save_json_file(
                {"best": report.best.notation(), "stability": report.stability, "frequencies": report.frequencies},
                os.path.join(path, "windows.json"),
            )

        def load(path: str) -> Dict[str, Any]:
            result = load_json_file(os.path.join(path, "windows.json"))
            result["table_file"] = os.path.join(path, "windows.csv")
            return result

        key, result = self._cached("windows", payload, state["keys"]["train"], save, load)
        return {"stability": result, "keys": self._keys(state, "windows", key)}

    @stage("hetero_solve")
    def hetero_solve_node(self, state: PipelineState) -> Dict[str, Any]:
        meta = self.experiment.meta
        discovery = self.experiment.discovery
        structure = parse_genome(state["stability"]["best"])
        payload = {
            "meta": meta.model_dump(),
            "quadrature_nodes": discovery.quadrature_nodes,
            "cv_threshold": discovery.cv_threshold,
        }

        def save(path: str) -> None:
            result = solve_hetero(
                state["network"], structure, meta.x_range, meta.t_range, meta.nx, meta.nt,
                discovery.quadrature_nodes, discovery.cv_threshold,
            )
            result.save(os.path.join(path, "coefficients.csv"), os.path.join(path, "coefficients.json"))
            save_json_file({"equation": hetero_equation(result)}, os.path.join(path, "equation.json"))

        def load(path: str) -> Dict[str, Any]:
            summary = load_json_file(os.path.join(path, "coefficients.json"))
            summary["equation"] = load_json_file(os.path.join(path, "equation.json"))["equation"]
            summary["series_file"] = os.path.join(path, "coefficients.csv")
            return summary

        key, result = self._cached("hetero_solve", payload, state["keys"]["windows"], save, load)
        self.logger.info(f"Heterogeneous equation (means): {result['equation']}")
        return {"hetero": result, "keys": self._keys(state, "hetero_solve", key)}

    # --- entry points --------------------------------------------------

    def execute(self, target: str = "report") -> PipelineState:
        """Run the graph up to `target` ("generate", "train" or "report")"""
        self.performance_monitor.start_workflow()
        try:
            return self.workflow.invoke({"target": target, "keys": {}}, config={"recursion_limit": 20})
        finally:
            self.performance_monitor.end_workflow()

    def run(self) -> DiscoveryReport:
        state = self.execute("report")
        report = self.build_report(state)
        self.write_outputs(state, report)
        self.logger.info(f"Report written to {os.path.join(self.out_dir, 'report.json')}")
        self.logger.debug(self.performance_monitor.get_formatted_report())
        return report

    def build_report(self, state: PipelineState) -> DiscoveryReport:
        discovery = self.experiment.discovery
        common = {
            "name": self.experiment.name,
            "mode": discovery.mode,
            "hashes": dict(state.get("keys", {})),
            "timings": self.performance_monitor.stage_durations(),
            "config": self.experiment.echo(),
        }
        if discovery.mode == "hetero":
            windows, hetero = state["stability"], state["hetero"]
            structure = windows["best"]
            return DiscoveryReport(
                equation=hetero["equation"],
                structure=structure,
                stability=windows["stability"],
                frequencies=windows["frequencies"],
                cv_table={hetero["terms"][c]: stats for c, stats in hetero["stats"].items()},
                coefficient_file="coefficients.csv",
                field_error_percent=self._field_error(hetero),
                support_recovered=self._recovered(structure),
                **common,
            )
        result = state["evolution"]
        genome = parse_genome(result["structure"])
        form = "differential" if discovery.mode == "differential" else "integral"
        return DiscoveryReport(
            equation=display_equation(genome, result["coefficients"], form),
            structure=result["structure"],
            differential_form=display_differential(genome, result["coefficients"]) if form == "integral" else None,
            coefficients=result["coefficients"],
            fitness=_finite(result["fitness"]),
            mse=_finite(result["mse"]),
            solution_error_percent=state.get("solution_error"),
            support_recovered=self._recovered(result["structure"]),
            **common,
        )

    def _recovered(self, structure: str) -> Optional[bool]:
        expected = self.experiment.discovery.expected
        return None if expected is None else structure == expected

    def _field_error(self, hetero: Dict[str, Any]) -> Optional[float]:
        """Median pointwise relative error of the recovered coefficient against the planted field"""
        field = planted_field(self.experiment)
        name = _FIELD_TERM.get(self.experiment.dataset.pde)
        if field is None or self.experiment.dataset.file is not None or name not in hetero["terms"].values():
            return None
        column = next(c for c, term in hetero["terms"].items() if term == name)
        frame = pd.read_csv(hetero["series_file"], float_precision="round_trip")
        x = frame["x"].to_numpy()
        truth = np.full(x.shape, float(field)) if np.isscalar(field) else field(x)
        return float(np.median(np.abs(frame[column].to_numpy() - truth) / np.abs(truth)) * 100.0)

    def write_outputs(self, state: PipelineState, report: DiscoveryReport) -> None:
        ensure_directory_exists(self.out_dir)
        report.save(os.path.join(self.out_dir, "report.json"))
        if report.mode == "hetero":
            hetero = state["hetero"]
            pd.read_csv(hetero["series_file"], float_precision="round_trip").to_csv(
                os.path.join(self.out_dir, "coefficients.csv"), index=False, float_format="%.17g"
            )
            save_json_file({k: v for k, v in hetero.items() if k != "series_file"}, os.path.join(self.out_dir, "coefficients.json"))
            pd.read_csv(state["stability"]["table_file"]).to_csv(os.path.join(self.out_dir, "windows.csv"), index=False)
            field = planted_field(self.experiment)
            if isinstance(field, KleField):
                field.to_csv(os.path.join(self.out_dir, "field.csv"), os.path.join(self.out_dir, "field_spec.json"))
        else:
            pd.read_csv(state["evolution"]["trace_file"]).to_csv(
                os.path.join(self.out_dir, "evolution_trace.csv"), index=False
            )


# --- sweeps ---------------------------------------------------------------

def sweep(
    config: Dict[str, Any],
    experiment: ExperimentConfig,
    kind: str,
    values: List[float],
    out_dir: Optional[str] = None,
) -> pd.DataFrame:
    """Repeat the run varying one knob; one table row per value"""
    if kind not in SWEEP_TARGETS:
        raise ConfigError(f"Unknown sweep kind '{kind}'")
    if not values:
        raise ConfigError(f"Sweep '{kind}' needs at least one value")
    if kind == "variance" and experiment.dataset.field is None:
        raise ConfigError("A variance sweep needs a heterogeneous dataset with a coefficient field")
    logger = logging.getLogger(f"{__name__}.sweep")
    base_dir = out_dir or os.path.join(config.get("app", {}).get("out_dir", "data/runs"), experiment.name)

    rows = []
    for i, value in enumerate(values):
        value = int(value) if kind == "datasize" else float(value)
        run_config = with_overrides(experiment, {SWEEP_TARGETS[kind]: value})
        row: Dict[str, Any] = {kind: value}
        failure: Optional[StageError] = None
        with StageTimer(f"sweep {kind}={value}") as timer:
            try:
                report = ExperimentRunner(config, run_config, os.path.join(base_dir, f"{kind}_{i}")).run()
            except StageError as e:
                if not isinstance(e.cause, (NumericalError, DegenerateDiscoveryError, ValueError)):
                    raise
                logger.warning(f"{kind}={value} failed: {e}")
                failure = e
        if failure is not None:
            row.update({"status": "failed", "message": str(failure.cause)})
        else:
            row.update(_sweep_row(report))
        row["seconds"] = timer.duration
        rows.append(row)

    table = pd.DataFrame(rows)
    ensure_directory_exists(base_dir)
    table.to_csv(os.path.join(base_dir, f"sweep_{kind}.csv"), index=False, float_format="%.10g")
    return table


def _sweep_row(report: DiscoveryReport) -> Dict[str, Any]:
    row: Dict[str, Any] = {
        "status": "ok",
        "message": "",
        "equation": report.equation,
        "structure": report.structure,
        "support_recovered": report.support_recovered,
    }
    if report.mode == "hetero":
        row["stability"] = report.stability
        row["field_error_percent"] = report.field_error_percent
        for term, stats in report.cv_table.items():
            row[f"{term}_mean"] = stats["mean"]
            row[f"{term}_std"] = stats["std"]
            row[f"{term}_cv_percent"] = stats["cv_percent"]
            row[f"{term}_kind"] = stats["kind"]
    else:
        row["fitness"] = report.fitness
        row["solution_error_percent"] = report.solution_error_percent
        for i, c in enumerate(report.coefficients):
            row[f"c{i}"] = c
    return row


def sweep_interval(config: Dict[str, Any], experiment: ExperimentConfig, values: List[float], out_dir: Optional[str] = None) -> pd.DataFrame:
    return sweep(config, experiment, "interval", values, out_dir)


def sweep_noise(config: Dict[str, Any], experiment: ExperimentConfig, values: List[float], out_dir: Optional[str] = None) -> pd.DataFrame:
    return sweep(config, experiment, "noise", values, out_dir)


def sweep_datasize(config: Dict[str, Any], experiment: ExperimentConfig, values: List[float], out_dir: Optional[str] = None) -> pd.DataFrame:
    return sweep(config, experiment, "datasize", values, out_dir)


def sweep_variance(config: Dict[str, Any], experiment: ExperimentConfig, values: List[float], out_dir: Optional[str] = None) -> pd.DataFrame:
    return sweep(config, experiment, "variance", values, out_dir)
