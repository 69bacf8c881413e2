"""
Tests for JSON run configurations
"""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from mfjump.exceptions import ConfigError
from mfjump.measure import EmpiricalMeasure
from mfjump.problem import ExampleDrift
from mfjump.runconfig import RunConfig, dump_run_config, load_run_config


class TestLoadRunConfig:
    """Test loading the fixture configurations"""

    def test_lq_fixture(self, fixtures_dir):
        config = load_run_config(fixtures_dir / "lq_small.json")
        m, jm = config.build_model()

        assert config.lq.h == 1.0
        assert config.model is None
        assert config.solver.particles == 200
        assert config.hjb.copies == 2
        assert m.dim_state == 1
        assert jm.size == 0

    def test_affine_with_jumps(self, fixtures_dir):
        config = load_run_config(fixtures_dir / "affine_jump.json")
        m, jm = config.build_model()

        assert jm.size == 1
        assert jm.weights == pytest.approx([1.0])
        g0, g1, g2 = m.jump_coefficients(0.0, jm.marks[0])
        assert g0 == pytest.approx([0.2])
        assert g1 == pytest.approx([[0.1]])
        assert g2 == pytest.approx([[0.0]])

    def test_controlled_noise(self, fixtures_dir):
        m, _ = load_run_config(fixtures_dir / "controlled_noise.json").build_model()

        assert m.control_split == [1, 1]
        assert not m.control_free_diffusion

    def test_derivative_offsets(self, fixtures_dir):
        m, _ = load_run_config(fixtures_dir / "offsets.json").build_model()
        x = np.zeros((2, 1))

        assert m.drift_dx(0.0, x, m.cross_section(x), np.zeros((2, 1))) == pytest.approx(np.full((2, 1, 1), 0.1))

    def test_constants_override(self, fixtures_dir):
        m, _ = load_run_config(fixtures_dir / "insufficient.json").build_model()

        assert m.constants.L == 10.0
        assert m.constants.lambda_v == 0.1

    def test_empirical_initial_measure(self, fixtures_dir):
        config = load_run_config(fixtures_dir / "empirical.json")
        m, _ = config.build_model()
        init = config.initial_measure(fixtures_dir)

        assert isinstance(m.drift_coefficient, ExampleDrift)
        assert init.size == 8
        assert init.points[-1] == pytest.approx([2.0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot load"):
            load_run_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")

        with pytest.raises(ConfigError):
            load_run_config(path)


class TestRunConfigValidation:
    """Test schema rules"""

    def test_exactly_one_problem(self):
        with pytest.raises(ValidationError, match="exactly one"):
            RunConfig()
        with pytest.raises(ValidationError, match="exactly one"):
            RunConfig(model={}, lq={})

    def test_lq_jumps_live_in_lq(self):
        with pytest.raises(ValidationError, match="lq.jumps"):
            RunConfig(lq={}, jumps=[{"intensity": 1.0}])

    def test_empirical_needs_file(self):
        with pytest.raises(ValidationError, match="needs a file"):
            RunConfig(lq={}, initial={"kind": "empirical"})

    def test_positive_r(self):
        with pytest.raises(ValidationError, match="positive"):
            RunConfig(model={"r": [1.0, -1.0]})

    def test_extra_fields_forbidden(self):
        with pytest.raises(ValidationError):
            RunConfig(lq={}, solvr={})
        with pytest.raises(ValidationError):
            RunConfig(model={"sigma": 1.0})

    def test_unreadable_empirical_file(self, tmp_path):
        config = RunConfig(lq={}, initial={"kind": "empirical", "file": "missing.csv"})

        with pytest.raises(ConfigError, match="cannot read"):
            config.initial_measure(tmp_path)

    def test_dump_round_trip(self, fixtures_dir):
        config = load_run_config(fixtures_dir / "affine_jump.json")
        dumped = dump_run_config(config)

        assert RunConfig.model_validate(json.loads(dumped)) == config


class TestProbes:
    """Test probe points for the value-function fit"""

    def test_default_quantiles(self):
        config = RunConfig(lq={}, hjb={"probe_count": 3})
        points = np.column_stack([np.linspace(0.0, 1.0, 11), np.linspace(-2.0, 2.0, 11)])
        probes = config.probes(EmpiricalMeasure(points))
        assert probes.shape == (6, 2)
        # one coordinate varies at a time, the other sits at the mean
        assert probes[:3, 1] == pytest.approx([0.0, 0.0, 0.0])
        assert probes[3:, 0] == pytest.approx([0.5, 0.5, 0.5])
        assert probes[:3, 0] == pytest.approx([0.05, 0.5, 0.95])

    def test_explicit_probes(self):
        config = RunConfig(lq={}, hjb={"probes": [[0.0], [1.0]]})
        assert config.probes(None).tolist() == [[0.0], [1.0]]

    def test_probe_count_minimum(self):
        with pytest.raises(ValidationError):
            RunConfig(lq={}, hjb={"probe_count": 2})


if __name__ == "__main__":
    pytest.main([__file__])
