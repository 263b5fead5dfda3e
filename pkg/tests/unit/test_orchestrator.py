import json
import os
from unittest.mock import MagicMock, patch

import pytest

from src import orchestrator
from src.config import config
from src.data import DatasetSchema, load_csv
from src.errors import ConfigError
from src.sim_engine import MetricsRow

ONE_EPOCH = {"training.epochs": 1}


@pytest.fixture
def mock_executor():
    with patch("concurrent.futures.ProcessPoolExecutor") as mock_pool:
        executor_instance = MagicMock()
        mock_pool.return_value.__enter__.return_value = executor_instance
        yield executor_instance


def row(protocol="sfl"):
    return MetricsRow(protocol, 1, 0.5, 0.6, 100.0, 0.2, 2)


class TestRun:
    def test_writes_metrics_and_trace(self, small_config, capsys):
        experiment = config.load(small_config, ONE_EPOCH)
        metrics, trace = orchestrator.cmd_run(experiment)

        with open(metrics) as f:
            lines = f.read().splitlines()
        assert len(lines) == 4
        with open(trace) as f:
            assert len(json.load(f)["rounds"]) == 6
        out = capsys.readouterr().out
        assert "======= Running psl, sfl, csfl-g for 1 epochs =======" in out
        assert "✅ Wrote" in out

    def test_select_protocol(self, small_config):
        experiment = config.load(small_config)
        assert orchestrator.select_protocol(experiment, "sfl").protocols == ("sfl",)
        assert orchestrator.select_protocol(experiment, None) is experiment
        with pytest.raises(ConfigError, match="not among"):
            orchestrator.select_protocol(experiment.with_protocols(["psl"]), "sfl")


class TestSweep:
    def test_cell_name(self):
        assert orchestrator.cell_name("system.cpu_scale", 0.5) == "metrics_system_cpu_scale=0.5.csv"

    def test_inline_sweep(self, small_config, tmp_path, mock_executor):
        out_dir = str(tmp_path / "sweep")
        written, summary = orchestrator.cmd_sweep(
            small_config, "system.cpu_scale", [1.0, 2.0], ONE_EPOCH, out_dir, "sfl", jobs=1
        )
        mock_executor.submit.assert_not_called()
        assert [os.path.basename(p) for p in written] == [
            "metrics_system_cpu_scale=1.0.csv",
            "metrics_system_cpu_scale=2.0.csv",
        ]
        with open(summary) as f:
            lines = f.read().splitlines()
        assert [line.split(",")[:2] for line in lines[1:]] == [["1", "sfl"], ["2", "sfl"]]

    def test_parallel_sweep_uses_the_pool(self, small_config, tmp_path, mock_executor):
        futures = [MagicMock(), MagicMock(), MagicMock()]
        for index, future in enumerate(futures):
            future.result.return_value = [row(f"cell{index}")]
        mock_executor.submit.side_effect = futures

        with patch("concurrent.futures.as_completed") as mock_as_completed:
            mock_as_completed.return_value = list(reversed(futures))
            written, summary = orchestrator.cmd_sweep(
                small_config, "seed", [1, 2, 3], ONE_EPOCH, str(tmp_path), jobs=3
            )

        assert mock_executor.submit.call_count == 3
        args, _ = mock_executor.submit.call_args_list[1]
        assert args[0] is orchestrator.sweep_worker
        assert args[1] == small_config
        assert args[2] == {"training.epochs": 1, "seed": 2}
        with open(summary) as f:
            lines = f.read().splitlines()
        # summary keeps sweep order regardless of completion order
        assert [line.split(",")[:2] for line in lines[1:]] == [
            ["1", "cell0"],
            ["2", "cell1"],
            ["3", "cell2"],
        ]
        assert len(written) == 3

    def test_failed_cell_propagates(self, small_config, tmp_path, mock_executor):
        future = MagicMock()
        future.result.side_effect = RuntimeError("Sweep cell failed: boom")
        mock_executor.submit.side_effect = [MagicMock(), future]

        with patch("concurrent.futures.as_completed") as mock_as_completed:
            mock_as_completed.return_value = [future]
            with pytest.raises(RuntimeError, match="boom"):
                orchestrator.cmd_sweep(small_config, "seed", [1, 2], ONE_EPOCH, str(tmp_path))

    def test_bad_value_fails_before_any_worker(self, small_config, tmp_path, mock_executor):
        with pytest.raises(ConfigError, match="training.lr"):
            orchestrator.cmd_sweep(small_config, "training.lr", [0.1, -1.0], out_dir=str(tmp_path))
        mock_executor.submit.assert_not_called()

    def test_axis_must_be_scalar(self, small_config, tmp_path):
        with pytest.raises(ConfigError, match="not a scalar"):
            orchestrator.cmd_sweep(small_config, "arch", [1], out_dir=str(tmp_path))

    def test_needs_values(self, small_config):
        with pytest.raises(ConfigError, match="at least one value"):
            orchestrator.cmd_sweep(small_config, "seed", [])

    def test_worker_wraps_unexpected_errors(self, small_config):
        with patch("src.orchestrator.run_experiment", side_effect=KeyError("x")):
            with pytest.raises(RuntimeError, match="Sweep cell failed"):
                orchestrator.sweep_worker(small_config, ONE_EPOCH)

    def test_worker_keeps_simulator_errors(self, small_config):
        with pytest.raises(ConfigError):
            orchestrator.sweep_worker(small_config, {"training.lr": -1.0})


class TestGenDataAndValidate:
    def test_gen_data_matches_config(self, small_config, tmp_path):
        experiment = config.load(small_config)
        target = str(tmp_path / "data.csv")
        orchestrator.cmd_gen_data(target, seed=3, experiment=experiment)
        dataset = load_csv(target, DatasetSchema.for_width(3))
        assert dataset.size == 4 * 16 + 20
        assert dataset.vocab1 <= 2 and dataset.vocab2 <= 3

    def test_gen_data_defaults(self, tmp_path):
        target = str(tmp_path / "data.csv")
        orchestrator.cmd_gen_data(target, rows=10)
        assert load_csv(target).size == 10

    def test_validate_reports_defaults(self, small_config, capsys):
        orchestrator.cmd_validate(small_config)
        out = capsys.readouterr().out
        assert "is valid" in out
        assert "took their default value" in out
        assert "defaulted:" in out
