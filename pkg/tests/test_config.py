"""Tests for the configuration module."""

import logging
import tempfile
from collections.abc import Iterator
from pathlib import Path

import numpy as np
import pytest
import yaml

from pglab.config import (
    ExperimentConfig,
    LoggingSettings,
    MdpSettings,
    ScheduleSettings,
    default_tau,
)
from pglab.logging_config import PACKAGE_LOGGER, WARNINGS_LOGGER, setup_logging


class TestExperimentConfig:
    """Tests for ExperimentConfig class."""

    def test_default_config(self) -> None:
        """Default config reproduces the entropy NPG reference run."""
        config = ExperimentConfig.default()

        assert config.method == "entropy-npg"
        assert config.tau == 0.05
        assert config.schedule.eta == 10.0
        assert config.mdp == MdpSettings()
        assert config.mdp.n_states == 50
        assert config.mdp.n_actions == 20
        assert config.mdp.gamma == 0.99
        assert config.checks == ["all"]
        config.validate()

    def test_load_nonexistent_file(self) -> None:
        """Loading nonexistent file raises error."""
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.load("/nonexistent/path/experiment.yaml")

    def test_load_valid_yaml(self) -> None:
        """Valid YAML file loads correctly."""
        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write(
                """
mdp:
  seed: 3
  n_states: 10
  n_actions: 5
  gamma: 0.9
method: npg
schedule:
  eta: 0.5
checks: monotone
max_iters: 40
output:
  trace: ./out/trace.csv
            """
            )
            f.flush()

            config = ExperimentConfig.load(f.name)

            assert config.mdp.seed == 3
            assert config.mdp.gamma == 0.9
            assert config.method == "npg"
            assert config.tau is None
            assert config.schedule.eta == 0.5
            assert config.checks == ["monotone"]
            assert config.max_iters == 40
            assert config.output.trace == Path("./out/trace.csv")
            config.validate()

            Path(f.name).unlink()

    def test_load_empty_yaml(self) -> None:
        """Empty YAML file uses defaults."""
        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write("")
            f.flush()

            config = ExperimentConfig.load(f.name)

            assert config.method == "entropy-npg"

            Path(f.name).unlink()

    def test_load_non_mapping(self, tmp_path: Path) -> None:
        """A YAML list is not a config."""
        path = tmp_path / "list.yaml"
        path.write_text("- npg\n")

        with pytest.raises(ValueError, match="must hold a mapping"):
            ExperimentConfig.load(path)

    def test_load_invalid_yaml(self, tmp_path: Path) -> None:
        path = tmp_path / "broken.yaml"
        path.write_text("method: [npg\n")

        with pytest.raises(yaml.YAMLError):
            ExperimentConfig.load(path)

    def test_mdp_path_implies_file_source(self, tmp_path: Path) -> None:
        path = tmp_path / "experiment.yaml"
        path.write_text("mdp:\n  path: problem.yaml\nmethod: pi\n")

        config = ExperimentConfig.load(path)

        assert config.mdp.source == "file"
        assert config.mdp.path == Path("problem.yaml")


class TestValidate:
    """Tests for cross-field validation."""

    @pytest.mark.parametrize(
        ("changes", "message"),
        [
            ({"method": "reinforce"}, "Unknown method"),
            ({"method": "soft-pi", "tau": None}, "needs tau > 0"),
            ({"method": "npg", "tau": 0.1}, "unregularized"),
            ({"method": "npg", "tau": None, "max_iters": 0}, "max_iters"),
            ({"stop_gap": -1.0}, "stop_gap"),
            ({"checks": ["bogus"]}, "Unknown check"),
        ],
    )
    def test_invalid_fields(self, changes: dict[str, object], message: str) -> None:
        config = ExperimentConfig.default()
        for key, value in changes.items():
            setattr(config, key, value)

        with pytest.raises(ValueError, match=message):
            config.validate()

    def test_schedule_method_pairing(self) -> None:
        config = ExperimentConfig(method="npg", tau=None)
        config.schedule = ScheduleSettings(kind="ppg_increasing", c3=1.0)

        with pytest.raises(ValueError, match="only applies to ppg"):
            config.validate()

        config.schedule = ScheduleSettings(kind="pg_adaptive", c_adapt=1.0)
        with pytest.raises(ValueError, match="only applies to softmax-pg"):
            config.validate()

    def test_invalid_schedule_values(self) -> None:
        config = ExperimentConfig(method="ppg", tau=None)
        config.schedule = ScheduleSettings(kind="ppg_increasing")

        with pytest.raises(ValueError, match="c3"):
            config.validate()

    def test_file_source_needs_path(self) -> None:
        config = ExperimentConfig(mdp=MdpSettings(source="file"))

        with pytest.raises(ValueError, match="needs mdp.path"):
            config.validate()

    def test_random_gamma_range(self) -> None:
        config = ExperimentConfig(mdp=MdpSettings(gamma=1.0))

        with pytest.raises(ValueError, match="gamma"):
            config.validate()

    def test_unknown_rate_model(self) -> None:
        config = ExperimentConfig()
        config.rate.model = "cubic"

        with pytest.raises(ValueError, match="rate model"):
            config.validate()

    @pytest.mark.parametrize(
        ("field", "value", "message"),
        [("window_fraction", 0.0, "window_fraction"), ("column", "l_k_kp1", "rate column")],
    )
    def test_invalid_rate_settings(self, field: str, value: object, message: str) -> None:
        config = ExperimentConfig()
        setattr(config.rate, field, value)

        with pytest.raises(ValueError, match=message):
            config.validate()

    def test_default_tau(self) -> None:
        assert default_tau("entropy-pg") == 0.05
        assert default_tau("ppg") is None


class TestLoggingSettings:
    """Tests for LoggingSettings and setup_logging."""

    def test_defaults(self) -> None:
        """Default logging settings."""
        settings = LoggingSettings()

        assert settings.level == "INFO"
        assert settings.file is None

    @pytest.fixture
    def clean_loggers(self) -> Iterator[None]:
        """Close every handler setup_logging attached."""
        yield
        logging.captureWarnings(False)
        for name in (PACKAGE_LOGGER, WARNINGS_LOGGER):
            logger = logging.getLogger(name)
            for handler in list(logger.handlers):
                handler.close()
                logger.removeHandler(handler)

    @pytest.mark.usefixtures("clean_loggers")
    def test_setup_logging_with_file(self, tmp_path: Path) -> None:
        """A configured log file gets its own handler and parent directory."""
        settings = LoggingSettings(file=str(tmp_path / "logs" / "pglab.log"))

        logger = setup_logging(settings, verbose=True)
        logging.getLogger("pglab.runner").debug("hello")

        assert logger.name == PACKAGE_LOGGER
        assert logger.level == logging.DEBUG
        assert len(logger.handlers) == 2
        for handler in logger.handlers:
            handler.flush()
        assert "hello" in (tmp_path / "logs" / "pglab.log").read_text()

    @pytest.mark.usefixtures("clean_loggers")
    def test_numpy_warnings_reach_log_file(self, tmp_path: Path) -> None:
        """Floating-point warnings are written to the run log."""
        log_file = tmp_path / "run.log"
        setup_logging(LoggingSettings(file=str(log_file)))

        np.exp(np.array([1000.0]))

        for handler in logging.getLogger(WARNINGS_LOGGER).handlers:
            handler.flush()
        assert "overflow" in log_file.read_text()

    @pytest.mark.usefixtures("clean_loggers")
    def test_repeated_setup_replaces_handlers(self) -> None:
        setup_logging(LoggingSettings())
        logger = setup_logging(LoggingSettings(level="warning"))

        assert len(logger.handlers) == 1
        assert logger.level == logging.WARNING

    def test_unknown_level(self) -> None:
        with pytest.raises(ValueError, match="Unknown log level"):
            setup_logging(LoggingSettings(level="chatty"))
