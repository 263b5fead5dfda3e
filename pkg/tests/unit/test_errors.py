import pickle
from unittest.mock import patch

import pytest

import main
from src.errors import ConfigError, CSFLError, OutputError, RoundError


def exit_code(argv):
    with pytest.raises(SystemExit) as excinfo:
        main.main(argv)
    return excinfo.value.code


class TestErrorTypes:
    def test_exit_codes(self):
        assert ConfigError("x").exit_code == 2
        assert CSFLError("x").exit_code == 3
        assert RoundError(1, "x").exit_code == 3
        assert OutputError("x").exit_code == 4

    def test_config_errors_are_value_errors(self):
        assert isinstance(ConfigError("x"), ValueError)

    def test_round_error_survives_pickling(self):
        error = pickle.loads(pickle.dumps(RoundError(3, "non-finite loss in round 2")))
        assert error.user_id == 3
        assert str(error) == "user 3: non-finite loss in round 2"


class TestErrorScenarios:
    def test_valid_config(self, small_config, capsys):
        assert main.main(["validate", "--config", small_config]) == 0
        assert "is valid" in capsys.readouterr().out

    def test_bad_config_exits_2(self, small_config, capsys):
        code = exit_code(["run", "--config", small_config, "--set", "data.num_users=5"])
        assert code == 2
        assert "❌ Run failed: data.num_users is 5" in capsys.readouterr().out

    def test_malformed_set(self, small_config):
        assert exit_code(["validate", "--config", small_config, "--set", "seed"]) == 2

    def test_numeric_failure_exits_3(self, small_config, capsys):
        with patch("main.cmd_run", side_effect=RoundError(2, "non-finite loss in round 0")):
            assert exit_code(["run", "--config", small_config]) == 3
        assert "user 2" in capsys.readouterr().out

    def test_unwritable_output_exits_4(self, small_config):
        with patch("main.cmd_run", side_effect=OutputError("Cannot write results")):
            assert exit_code(["run", "--config", small_config]) == 4
        with patch("main.cmd_run", side_effect=PermissionError("denied")):
            assert exit_code(["run", "--config", small_config]) == 4

    def test_unparsable_set_value_exits_2(self, small_config, capsys):
        assert exit_code(["validate", "--config", small_config, "--set", "seed=[1,"]) == 2
        assert "Cannot parse override value" in capsys.readouterr().out

    def test_non_finite_set_value_exits_2(self, small_config, capsys):
        argv = ["run", "--config", small_config, "--set", "profiles.0.cpu_rate=.nan"]
        assert exit_code(argv) == 2
        assert "profiles.0.cpu_rate must be finite" in capsys.readouterr().out

    def test_unexpected_failure_exits_3(self, small_config, capsys):
        with patch("main.cmd_run", side_effect=RuntimeError("worker pool broke")):
            assert exit_code(["run", "--config", small_config]) == 3
        assert "❌ Run failed: worker pool broke" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert exit_code(["validate", "--config", str(tmp_path / "absent.yaml")]) == 2


class TestCommands:
    def test_run_one_protocol(self, small_config, tmp_path):
        out_dir = tmp_path / "cli"
        argv = ["run", "--config", small_config, "--protocol", "sfl", "--out", str(out_dir)]
        assert main.main(argv + ["--set", "training.epochs=1", "--seed", "5"]) == 0
        lines = (out_dir / "metrics.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("sfl,1,")
        assert (out_dir / "trace.json").exists()

    def test_sweep_arguments(self, small_config):
        with patch("main.cmd_sweep") as mock_sweep:
            main.main(
                ["sweep", "--config", small_config, "--axis", "system.cpu_scale"]
                + ["--values", "0.5, 1,2e+0", "--jobs", "2"]
            )
        args, kwargs = mock_sweep.call_args
        assert args == (small_config, "system.cpu_scale", [0.5, 1, 2.0])
        assert kwargs["jobs"] == 2 and kwargs["overrides"] == {}

    def test_gen_data_without_config(self, tmp_path):
        target = tmp_path / "data.csv"
        assert main.main(["gen-data", "--path", str(target), "--rows", "7"]) == 0
        assert len(target.read_text().splitlines()) == 8

    def test_gen_data_into_directory(self, tmp_path):
        out_dir = tmp_path / "data"
        assert main.main(["gen-data", "--out", str(out_dir), "--rows", "5"]) == 0
        assert len((out_dir / "synthetic.csv").read_text().splitlines()) == 6

    def test_gen_data_takes_one_target(self, tmp_path):
        argv = ["gen-data", "--path", str(tmp_path / "a.csv"), "--out", str(tmp_path)]
        assert exit_code(argv) == 2
