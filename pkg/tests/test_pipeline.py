"""
Tests for experiment configs, the artifact cache, the staged runner and the CLI
"""

import glob
import json
import logging
import math
import os

import pandas as pd
import pytest
import yaml

from backend.artifact_cache import ArtifactCache
from backend.cli import main
from backend.experiment_config import load_experiment, validate_experiment, with_overrides, with_seed
from backend.experiment_runner import DiscoveryReport, ExperimentRunner, sweep
from backend.utils import StageTimer
from discovery.errors import (
    ConfigError,
    DegeneratePopulationError,
    StageError,
    TrainingDivergedError,
)
from discovery.genome import GenomeBounds, parse_genome

PRESET_DIR = os.path.join(os.path.dirname(__file__), "..", "config", "presets")


def tiny_kdv() -> dict:
    """A KdV experiment small enough to run end to end in seconds"""
    return {
        "name": "kdv_tiny",
        "dataset": {
            "pde": "kdv",
            "params": {"nu": 0.0025, "n_modes": 64, "t_end": 0.2, "nt": 21, "dt": 1.0e-4},
            "subsample": 400,
        },
        "surrogate": {"hidden_layers": 1, "width": 8, "train": {"steps": 40, "learning_rate": 1.0e-2, "report_every": 10}},
        "meta": {"x_range": [-0.9, 0.9], "t_range": [0.02, 0.18], "nx": 20, "nt": 5},
        "discovery": {
            "interval_length": 0.2,
            "expected": "[1],{[2],[0,0]}",
            "ga": {
                "population_size": 10,
                "generations": 2,
                "genome": {"max_order": 2, "max_genes_per_module": 2, "max_modules": 2, "lhs_choices": [1]},
            },
        },
    }


@pytest.fixture
def app_config(tmp_path):
    return {
        "app": {
            "out_dir": str(tmp_path / "runs"),
            "cache_dir": str(tmp_path / "cache"),
            "cache_enabled": True,
            "threads": 1,
        },
        "logging": {"level": "WARNING", "file_path": ""},
    }


class TestExperimentConfig:
    """Validation of experiment files"""

    def test_presets_are_valid(self):
        paths = sorted(glob.glob(os.path.join(PRESET_DIR, "*.yaml")))
        assert paths
        for path in paths:
            experiment = load_experiment(path)
            assert experiment.name == os.path.splitext(os.path.basename(path))[0]

    def test_expected_structure_is_canonicalized(self):
        experiment = validate_experiment(tiny_kdv())
        assert experiment.discovery.expected == "[1],{[0,0],[2]}"

    @pytest.mark.parametrize(
        "path, value",
        [
            ("dataset.extra", 1),
            ("dataset.params.viscosity", 0.1),
            ("discovery.ga.population_size", 11),
            ("discovery.mode", "hetero"),
            ("discovery.interval_length", -0.1),
            ("discovery.expected", "[3],{[0]}"),
            ("dataset.subsample", 10 ** 6),
            ("meta.x_range", [0.5, -0.5]),
        ],
    )
    def test_invalid_settings_are_config_errors(self, path, value):
        data = tiny_kdv()
        node = data
        keys = path.split(".")
        for key in keys[:-1]:
            node = node[key]
        node[keys[-1]] = value
        with pytest.raises(ConfigError):
            validate_experiment(data)

    def test_kdv_takes_no_coefficient_field(self):
        data = tiny_kdv()
        data["dataset"]["field"] = {"kind": "constant", "value": 1.0}
        with pytest.raises(ConfigError):
            validate_experiment(data)

    def test_heterogeneous_pde_gets_a_default_field(self):
        data = {
            "name": "cd",
            "dataset": {"pde": "convdiff", "params": {"nx": 41, "nt": 11}, "subsample": 100},
            "meta": {"x_range": [1, 7], "t_range": [0.25, 2.25]},
        }
        experiment = validate_experiment(data)
        assert experiment.dataset.field.kind == "kle"
        assert experiment.discovery.effective_epsilon == 1e-3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment(str(tmp_path / "missing.yaml"))

    def test_overrides_and_master_seed(self):
        experiment = validate_experiment(tiny_kdv())
        noisy = with_overrides(experiment, {"dataset.noise": 0.05})
        assert noisy.dataset.noise == 0.05
        assert experiment.dataset.noise == 0.0
        seeded = with_seed(experiment, 9)
        assert seeded.dataset.noise_seed == 9
        assert seeded.dataset.subsample_seed == 9
        assert seeded.surrogate.train.seed == 9
        assert seeded.discovery.ga.seed == 9


class TestArtifactCache:
    """Content-addressed stage storage"""

    def test_keys_chain_through_upstream_stages(self, app_config):
        cache = ArtifactCache(app_config)
        a = cache.key("noise", {"gamma": 0.1}, "up1")
        assert a == cache.key("noise", {"gamma": 0.1}, "up1")
        assert a != cache.key("noise", {"gamma": 0.1}, "up2")
        assert a != cache.key("noise", {"gamma": 0.2}, "up1")
        assert a != cache.key("subsample", {"gamma": 0.1}, "up1")

    def test_only_committed_artifacts_are_hits(self, app_config):
        cache = ArtifactCache(app_config)
        key = cache.key("train", {"steps": 1})
        path = cache.prepare("train", key)
        assert cache.lookup("train", key) is None
        cache.commit("train", key, {"note": "x"})
        assert cache.lookup("train", key) == path
        assert cache.metadata("train", key)["note"] == "x"

    def test_disabled_cache_never_hits(self, app_config):
        app_config["app"]["cache_enabled"] = False
        cache = ArtifactCache(app_config)
        key = cache.key("train", {})
        cache.prepare("train", key)
        cache.commit("train", key)
        assert cache.lookup("train", key) is None


class TestDiscoveryReport:
    """Report serialization"""

    def test_json_round_trip(self, tmp_path):
        report = DiscoveryReport(
            name="r",
            mode="hetero",
            equation="∫u_t dx = 0.8*u_x",
            structure="[1],{[1]}",
            stability=0.9,
            frequencies={"[1],{[1]}": 9, "none": 1},
            cv_table={"u_x": {"mean": 0.8, "std": 0.1, "cv_percent": 12.5, "kind": "heterogeneous", "zero_mean": False}},
            hashes={"generate": "abc"},
        )
        path = tmp_path / "report.json"
        report.save(str(path))
        assert DiscoveryReport.load(str(path)) == report


class TestExperimentRunner:
    """Staged pipeline on a tiny KdV problem"""

    @pytest.fixture
    def experiment(self):
        return validate_experiment(tiny_kdv())

    def test_run_writes_report_and_trace(self, app_config, experiment, tmp_path):
        out = tmp_path / "out"
        report = ExperimentRunner(app_config, experiment, str(out)).run()
        genome = parse_genome(report.structure)
        assert genome.within(GenomeBounds(max_order=2, max_genes_per_module=2, max_modules=2, lhs_choices=(1,)))
        assert len(report.coefficients) == len(genome.modules)
        assert set(report.hashes) == {"generate", "noise", "subsample", "train", "meta", "discover", "error"}
        assert report.support_recovered == (report.structure == "[1],{[0,0],[2]}")
        assert report.differential_form.startswith("u_t = ")
        assert report.solution_error_percent is None or math.isfinite(report.solution_error_percent)
        saved = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert saved["config"]["name"] == "kdv_tiny"
        trace = pd.read_csv(out / "evolution_trace.csv")
        assert len(trace) == 3

    def test_cached_rerun_gives_the_same_report(self, app_config, experiment, tmp_path):
        first = ExperimentRunner(app_config, experiment, str(tmp_path / "a")).run()
        second = ExperimentRunner(app_config, experiment, str(tmp_path / "b")).run()
        assert first.hashes == second.hashes
        assert first.coefficients == second.coefficients
        assert first.equation == second.equation

    def test_changing_noise_invalidates_downstream_stages(self, app_config, experiment, tmp_path):
        runner = ExperimentRunner(app_config, experiment, str(tmp_path / "a"))
        clean = runner.execute("train")["keys"]
        noisy_exp = with_overrides(experiment, {"dataset.noise": 0.05})
        noisy = ExperimentRunner(app_config, noisy_exp, str(tmp_path / "b")).execute("train")["keys"]
        assert clean["generate"] == noisy["generate"]
        for stage_name in ("noise", "subsample", "train"):
            assert clean[stage_name] != noisy[stage_name]

    def test_reused_artifacts_report_their_origin(self, app_config, experiment, tmp_path, caplog):
        keys = ExperimentRunner(app_config, experiment, str(tmp_path / "a")).execute("noise")["keys"]
        cache = ArtifactCache(app_config)
        origin = cache.metadata("generate", keys["generate"])
        assert origin["experiment"] == "kdv_tiny"
        assert origin["upstream"] is None
        assert cache.metadata("noise", keys["noise"])["upstream"] == keys["generate"]

        caplog.set_level(logging.INFO, logger="backend.experiment_runner")
        caplog.clear()
        ExperimentRunner(app_config, experiment, str(tmp_path / "b")).execute("noise")
        reused = [r.getMessage() for r in caplog.records if r.getMessage().startswith("Reusing")]
        assert len(reused) == 2
        assert f"Reusing generate artifact {keys['generate'][:12]} built by experiment 'kdv_tiny'" in reused[0]
        assert f"(upstream {keys['generate'][:12]})" in reused[1]

    def test_generate_target_stops_early(self, app_config, experiment, tmp_path):
        state = ExperimentRunner(app_config, experiment, str(tmp_path)).execute("generate")
        assert state["observed"].shape == (64, 21)
        assert "network" not in state

    def test_extrapolating_meta_grid_fails_the_meta_stage(self, app_config, experiment, tmp_path):
        bad = with_overrides(experiment, {"meta.t_range": [0.02, 0.5]})
        with pytest.raises(StageError) as info:
            ExperimentRunner(app_config, bad, str(tmp_path)).run()
        assert info.value.stage == "meta"
        assert info.value.exit_code == 3
        assert "train" in info.value.upstream_hashes


class TestSweep:
    """One-knob parameter studies"""

    @pytest.fixture
    def experiment(self):
        return validate_experiment(tiny_kdv())

    def test_invalid_sweeps(self, app_config, experiment, tmp_path):
        with pytest.raises(ConfigError):
            sweep(app_config, experiment, "temperature", [1.0], str(tmp_path))
        with pytest.raises(ConfigError):
            sweep(app_config, experiment, "noise", [], str(tmp_path))
        with pytest.raises(ConfigError):
            sweep(app_config, experiment, "variance", [1.0], str(tmp_path))

    def test_failed_values_become_rows(self, app_config, experiment, tmp_path, mocker):
        ok = DiscoveryReport(name="k", mode="integral", equation="∫u_t dx = 1*u_x", structure="[1],{[1]}", coefficients=[1.0])
        runner = mocker.patch("backend.experiment_runner.ExperimentRunner")
        runner.return_value.run.side_effect = [ok, StageError("train", TrainingDivergedError(4, math.inf))]
        table = sweep(app_config, experiment, "noise", [0.0, 0.1], str(tmp_path))
        assert table["status"].tolist() == ["ok", "failed"]
        assert table["noise"].tolist() == [0.0, 0.1]
        assert table.loc[0, "c0"] == 1.0
        assert table["seconds"].notna().all()
        assert (table["seconds"] >= 0).all()
        assert os.path.exists(tmp_path / "sweep_noise.csv")
        overrides = [call.args[1].dataset.noise for call in runner.call_args_list]
        assert overrides == [0.0, 0.1]

    def test_unexpected_failures_propagate(self, app_config, experiment, tmp_path, mocker):
        runner = mocker.patch("backend.experiment_runner.ExperimentRunner")
        runner.return_value.run.side_effect = StageError("generate", ConfigError("bad"))
        with pytest.raises(StageError):
            sweep(app_config, experiment, "noise", [0.1], str(tmp_path))


class TestStageTimer:
    """Wall-clock timing of pipeline stages"""

    def test_duration_is_set_on_exit_and_logged(self, caplog):
        caplog.set_level(logging.INFO, logger="pdediscover")
        timer = StageTimer("demo")
        assert timer.duration is None
        with timer:
            assert timer.duration is None
        assert timer.duration >= 0.0
        assert "Stage 'demo' completed in" in caplog.text


class TestCli:
    """Exit codes and command wiring"""

    @pytest.fixture
    def paths(self, app_config, tmp_path):
        config_path = tmp_path / "config.yaml"
        config_path.write_text(yaml.safe_dump(app_config), encoding="utf-8")
        experiment_path = tmp_path / "kdv_tiny.yaml"
        experiment_path.write_text(yaml.safe_dump(tiny_kdv()), encoding="utf-8")
        return str(config_path), str(experiment_path)

    def test_successful_discovery(self, paths, mocker):
        config_path, experiment_path = paths
        runner = mocker.patch("backend.cli.ExperimentRunner")
        runner.return_value.run.return_value = DiscoveryReport(
            name="kdv_tiny", mode="integral", equation="∫u_t dx = -0.5*u^2", structure="[1],{[0,0]}"
        )
        assert main(["--config", config_path, "--seed", "3", "discover", experiment_path]) == 0
        experiment = runner.call_args.args[1]
        assert experiment.discovery.ga.seed == 3

    def test_numerical_failure_exit_code(self, paths, mocker):
        config_path, experiment_path = paths
        runner = mocker.patch("backend.cli.ExperimentRunner")
        runner.return_value.run.side_effect = StageError("train", TrainingDivergedError(1, math.inf))
        assert main(["--config", config_path, "discover", experiment_path]) == 3

    def test_degenerate_discovery_exit_code(self, paths, mocker):
        config_path, experiment_path = paths
        runner = mocker.patch("backend.cli.ExperimentRunner")
        runner.return_value.run.side_effect = StageError("discover", DegeneratePopulationError(0))
        assert main(["--config", config_path, "discover", experiment_path]) == 4

    def test_configuration_errors_exit_with_two(self, paths, tmp_path):
        config_path, experiment_path = paths
        assert main(["--config", config_path, "discover", str(tmp_path / "missing.yaml")]) == 2
        assert main(["--config", config_path, "discover-hetero", experiment_path]) == 2
        assert main(["--config", config_path, "sweep", experiment_path, "--kind", "noise", "--values", ""]) == 2
        assert main(["--config", config_path, "sweep", experiment_path]) == 2
        assert main(["--config", config_path, "--threads", "0", "discover", experiment_path]) == 2

    def test_evaluate_checks_its_arguments(self, paths):
        config_path, experiment_path = paths
        args = ["--config", config_path, "evaluate", experiment_path, "--structure"]
        assert main(args + ["[1],{[0,0],[2]}", "--coefficients", "-0.5"]) == 2
        assert main(args + ["[1],{oops}", "--coefficients", "-0.5"]) == 2

    def test_evaluate_true_kdv_coefficients(self, paths, tmp_path):
        config_path, experiment_path = paths
        out = tmp_path / "eval"
        code = main(
            ["--config", config_path, "--out-dir", str(out), "evaluate", experiment_path,
             "--structure", "[1],{[0,0],[2]}", "--coefficients", "-0.5,-0.0025"]
        )
        assert code == 0
        result = json.loads((out / "kdv_tiny" / "evaluation.json").read_text(encoding="utf-8"))
        assert result["solution_error_percent"] < 1e-10
        assert result["equation"] == "∫u_t dx = -0.5*u^2 - 0.0025*u_xx"
