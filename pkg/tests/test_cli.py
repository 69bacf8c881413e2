"""
Tests for the command line interface
"""

import json
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from mfjump.cli import NumpyEncoder, build_parser, exit_code_for, main
from mfjump.config import ExitCode
from mfjump.exceptions import (
    BlowUp,
    ConfigError,
    MissingDerivatives,
    NoConvergence,
    NonAdmissible,
    OperationUnsupported,
    RiccatiBlowUp,
    SufficiencyViolation,
)
from mfjump.runconfig import RunConfig
from mfjump.solver import solve_mftc


def write_config(tmp_path, fixtures_dir, name, **solver):
    """Copy a fixture with solver settings overridden"""
    data = json.loads((fixtures_dir / name).read_text())
    data.setdefault("solver", {}).update(solver)
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


class TestParser:
    """Test argument parsing and exit codes"""

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 0
        assert "mfjump" in capsys.readouterr().out

    def test_common_options(self):
        args = build_parser().parse_args(["certify", "--config", "c.json", "--seed", "7", "--shift", "0.5"])

        assert args.command == "certify"
        assert args.seed == 7
        assert args.shift == 0.5
        assert args.random_scale is None

    def test_exclusive_alternatives(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["certify", "--config", "c.json", "--shift", "1", "--random-scale", "1"])

    def test_exit_codes(self):
        try:
            RunConfig()
        except ValidationError as e:
            validation_error = e

        assert exit_code_for(validation_error) == ExitCode.CONFIG_ERROR
        assert exit_code_for(ConfigError("x")) == ExitCode.CONFIG_ERROR
        assert exit_code_for(FileNotFoundError("x")) == ExitCode.CONFIG_ERROR
        assert exit_code_for(NoConvergence("x")) == ExitCode.FAILED
        assert exit_code_for(BlowUp(1, 2, 3.0)) == ExitCode.BLOW_UP
        assert exit_code_for(NonAdmissible("x")) == ExitCode.BLOW_UP
        assert exit_code_for(RiccatiBlowUp("x")) == ExitCode.BLOW_UP
        assert exit_code_for(SufficiencyViolation("x")) == ExitCode.PRECONDITION
        assert exit_code_for(OperationUnsupported("x")) == ExitCode.UNSUPPORTED
        assert exit_code_for(MissingDerivatives("x")) == ExitCode.UNSUPPORTED

    def test_numpy_encoder(self):
        payload = {"a": np.float64(1.5), "b": np.int64(2), "c": np.arange(3)}
        assert json.loads(json.dumps(payload, cls=NumpyEncoder)) == {"a": 1.5, "b": 2, "c": [0, 1, 2]}


class TestCommands:
    """Test the subcommands end to end on small fixtures"""

    def test_solve(self, fixtures_dir, tmp_path):
        code = main(["solve", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path)])

        assert code == ExitCode.OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["converged"] is True
        assert report["cost"] > 0.0
        assert (tmp_path / "ensemble.csv").exists()
        assert (tmp_path / "adjoint.csv").exists()

    def test_solve_with_jumps(self, fixtures_dir, tmp_path):
        code = main(["solve", "--config", str(fixtures_dir / "affine_jump.json"), "--out", str(tmp_path)])

        assert code == ExitCode.OK
        header = (tmp_path / "adjoint.csv").read_text().splitlines()[0]
        assert header.split(",")[-1] == "R_1_1"

    def test_missing_config(self, tmp_path):
        assert main(["solve", "--config", str(tmp_path / "absent.json")]) == ExitCode.CONFIG_ERROR

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {}, "lq": {}}))

        assert main(["solve", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.CONFIG_ERROR

    def test_no_convergence_writes_report(self, fixtures_dir, tmp_path):
        path = write_config(tmp_path, fixtures_dir, "lq_small.json", max_picard=1)

        assert main(["solve", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.FAILED
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["converged"] is False
        assert report["iterations"] == 1

    def test_blow_up(self, fixtures_dir, tmp_path):
        path = write_config(tmp_path, fixtures_dir, "lq_small.json", blowup_cap=0.01)

        assert main(["solve", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.BLOW_UP

    def test_insufficient_refused(self, fixtures_dir, tmp_path):
        code = main(["solve", "--config", str(fixtures_dir / "insufficient.json"), "--out", str(tmp_path)])
        assert code == ExitCode.PRECONDITION

    def test_verify(self, fixtures_dir, tmp_path):
        code = main(["verify", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path)])

        assert code == ExitCode.OK
        result = json.loads((tmp_path / "verify.json").read_text())
        assert result["holds"] is True
        assert result["violations"] == []

    def test_verify_catches_offsets(self, fixtures_dir, tmp_path):
        code = main(["verify", "--config", str(fixtures_dir / "offsets.json"), "--out", str(tmp_path)])

        assert code == ExitCode.FAILED
        result = json.loads((tmp_path / "verify.json").read_text())
        assert any(v["callback"] == "drift_dx" for v in result["violations"])

    def test_certify(self, fixtures_dir, tmp_path):
        args = ["certify", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path), "--shift", "0.5"]

        assert main(args) == ExitCode.OK
        certificate = json.loads((tmp_path / "certificate.json").read_text())
        assert certificate["passes"] is True

    def test_certify_non_admissible(self, fixtures_dir, tmp_path):
        args = ["certify", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path), "--shift", "1e12"]
        assert main(args) == ExitCode.BLOW_UP

    def test_hjb(self, fixtures_dir, tmp_path):
        code = main(["hjb", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path)])

        assert code == ExitCode.OK
        result = json.loads((tmp_path / "hjb.json").read_text())
        assert result["hjb"]["normalized_residual"] < 0.02
        assert "characterization" in result

    def test_hjb_zero_value(self, fixtures_dir, tmp_path):
        args = ["hjb", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path), "--zero-value"]

        assert main(args) == ExitCode.HJB_RESIDUAL
        result = json.loads((tmp_path / "hjb.json").read_text())
        assert result["hjb"]["normalized_residual"] == pytest.approx(1.0)

    def test_hjb_controlled_noise(self, fixtures_dir, tmp_path):
        code = main(["hjb", "--config", str(fixtures_dir / "controlled_noise.json"), "--out", str(tmp_path)])
        assert code == ExitCode.UNSUPPORTED

    def test_ito_check(self, fixtures_dir, tmp_path):
        args = [
            "ito-check",
            "--config",
            str(fixtures_dir / "lq_small.json"),
            "--out",
            str(tmp_path),
            "--functional",
            "first-moment",
            "--uncontrolled",
        ]

        assert main(args) == ExitCode.OK
        assert json.loads((tmp_path / "ito_check.json").read_text())["residual"] == pytest.approx(0.0, abs=1e-12)

    def test_lq_compare(self, fixtures_dir, tmp_path):
        code = main(["lq-compare", "--config", str(fixtures_dir / "lq_fine.json"), "--out", str(tmp_path)])

        assert code == ExitCode.OK
        result = json.loads((tmp_path / "lq_compare.json").read_text())
        assert result["cost_error"] < 0.01
        assert result["gains_t0"] == pytest.approx([-1.0, 0.0, 0.0], abs=1e-8)

    def test_lq_compare_needs_lq(self, fixtures_dir, tmp_path):
        code = main(["lq-compare", "--config", str(fixtures_dir / "affine_jump.json"), "--out", str(tmp_path)])
        assert code == ExitCode.CONFIG_ERROR

    def test_thread_override(self, fixtures_dir, tmp_path):
        with patch("mfjump.cli.solve_mftc", wraps=solve_mftc) as solve:
            main(["solve", "--config", str(fixtures_dir / "lq_small.json"), "--out", str(tmp_path), "--threads", "2"])
        assert solve.call_args[0][3].threads == 2


if __name__ == "__main__":
    pytest.main([__file__])
