"""
Configuration manager for loading, resolving and saving experiment configs
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace

from ..evaluation.pipelines import EvalConfig
from ..simulation.optics_sim import DomainConfig, source_clean_domain, target_domain
from ..simulation.sampling import SamplingConfig, grid_count
from ..training.aligner import AlignerTrainConfig, DegradationSpec
from ..training.domain_transform import TransformTrainConfig
from .errors import ConfigConstraintError, ConfigError, InvalidInputError
from .serialization import dump_json, merge_dataclass, to_jsonable

logger = logging.getLogger(__name__)

SCENARIOS = ("security_like", "smartphone_like", "desk")
RESOLVED_NAME = "config.resolved.json"


@dataclass(frozen=True)
class DatasetSizes:
    m_tolerance_lenses: int = 3
    n_test: int = 4
    n_oracle: int = 2
    n_random: int = 30
    workers: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "desk"
    source_domain: DomainConfig = field(default_factory=source_clean_domain)
    target_domain: DomainConfig = field(default_factory=target_domain)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    datasets: DatasetSizes = field(default_factory=DatasetSizes)
    transform: TransformTrainConfig = field(default_factory=TransformTrainConfig)
    aligner: AlignerTrainConfig = field(default_factory=AlignerTrainConfig)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    global_seed: int = 0
    output_dir: str = "runs/desk"
    determinism: str = "strict"
    device: str = "cpu"

    @property
    def image_side(self):
        return self.source_domain.image_side

    def validate(self):
        """Raise ConfigConstraintError naming the first offending key"""
        if self.scenario not in SCENARIOS:
            raise ConfigConstraintError("scenario", f"must be one of {SCENARIOS}")
        if self.determinism not in ("strict", "fast"):
            raise ConfigConstraintError("determinism", "must be 'strict' or 'fast'")
        if self.source_domain.label not in ("source_clean", "source_isp"):
            raise ConfigConstraintError("source_domain.label", "must be 'source_clean' or 'source_isp'")
        if self.target_domain.label != "target":
            raise ConfigConstraintError("target_domain.label", "must be 'target'")
        if self.source_domain.image_side != self.target_domain.image_side:
            raise ConfigConstraintError("target_domain.image_side", "must equal source_domain.image_side")

        sections = (
            ("source_domain", self.source_domain.validate),
            ("target_domain", self.target_domain.validate),
            ("transform", self.transform.validate),
            ("aligner", self.aligner.validate),
            ("degradation", self.degradation.validate),
            ("evaluation", self.evaluation.validate),
        )
        for key, check in sections:
            try:
                check()
            except InvalidInputError as e:
                raise ConfigConstraintError(key, str(e)) from e

        s = self.sampling
        try:
            n_grid = grid_count(s.range_um, s.step_um)
            grid_count(s.range_um, s.step_um * s.sparse_step_multiplier)
            if s.prealign:
                grid_count(s.prealign_range_um, s.prealign_step_um)
        except InvalidInputError as e:
            raise ConfigConstraintError("sampling", str(e)) from e
        if not 0 <= s.tolerance.gain_low <= s.tolerance.gain_high or s.tolerance.shift_um < 0:
            raise ConfigConstraintError("sampling.tolerance", "need shift_um >= 0 and 0 <= gain_low <= gain_high")

        d = self.datasets
        if d.m_tolerance_lenses < 0:
            raise ConfigConstraintError("datasets.m_tolerance_lenses", "must be >= 0")
        if d.n_test < 1:
            raise ConfigConstraintError("datasets.n_test", "must be >= 1")
        if d.n_oracle < 1:
            raise ConfigConstraintError("datasets.n_oracle", "must be >= 1 for the OnDevice baseline")
        if not 1 <= d.n_random <= n_grid / 4:
            raise ConfigConstraintError("datasets.n_random", f"must lie in [1, {n_grid // 4}] for a {n_grid}-position grid")
        if d.workers < 1:
            raise ConfigConstraintError("datasets.workers", "must be >= 1")
        return self


def _sides(side):
    return {"source_domain": {"image_side": side}, "target_domain": {"image_side": side}}


# Scenario presets are override trees applied on top of ExperimentConfig() defaults
SCENARIO_PRESETS = {
    "security_like": {
        **_sides(70),
        "sampling": {"range_um": 30.0, "step_um": 2.0},
        "datasets": {"m_tolerance_lenses": 10, "n_test": 17, "n_oracle": 3, "n_random": 100},
        "output_dir": "runs/security_like",
    },
    "smartphone_like": {
        **_sides(50),
        "sampling": {"range_um": 15.0, "step_um": 1.0},
        "datasets": {"m_tolerance_lenses": 10, "n_test": 20, "n_oracle": 3, "n_random": 100},
        "output_dir": "runs/smartphone_like",
    },
    "desk": {
        **_sides(48),
        "sampling": {"range_um": 15.0, "step_um": 3.0},
        "datasets": {"m_tolerance_lenses": 3, "n_test": 4, "n_oracle": 2, "n_random": 30},
        "transform": {"iterations": 2000, "batch_size": 16, "base_channels": 16, "codebook_size": 64,
                      "code_dim": 32, "disc_channels": 16, "log_every": 100},
        "aligner": {"iterations": 3000, "batch_size": 32, "width": 32, "lr_decay_epochs": 100, "log_every": 250},
        "output_dir": "runs/desk",
    },
}


def scenario_config(name):
    if name not in SCENARIO_PRESETS:
        raise ConfigConstraintError("scenario", f"unknown scenario {name!r}, expected one of {SCENARIOS}")
    return merge_dataclass(ExperimentConfig(scenario=name), SCENARIO_PRESETS[name])


class ConfigManager:
    """Resolves a JSON experiment file against its scenario preset and persists the result"""

    def __init__(self, path=None):
        self.path = path
        self.config = None

    def resolve(self, data, overrides=None):
        if not isinstance(data, dict):
            raise ConfigError("<root>", "configuration must be a JSON object")
        if "scenario" not in data:
            raise ConfigError("scenario", "required key is missing")
        if not isinstance(data["scenario"], str):
            raise ConfigError("scenario", "must be a string")

        config = scenario_config(data["scenario"])
        body = {k: v for k, v in data.items() if k != "scenario"}
        config = merge_dataclass(config, body)
        if overrides:
            config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
        self.config = config.validate()
        return self.config

    def load(self, path=None, overrides=None):
        path = path or self.path
        if not path or not os.path.exists(path):
            raise ConfigError("<file>", f"config file {path!r} does not exist")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"{path} is not valid JSON: {e}") from e
        self.path = path
        return self.resolve(data, overrides)

    def save(self, path, config=None):
        config = config or self.config
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        dump_json(to_jsonable(config), path)
        return path

    def write_resolved(self, config=None):
        """Echo the resolved config into its output directory"""
        config = config or self.config
        path = os.path.join(config.output_dir, RESOLVED_NAME)
        self.save(path, config)
        logger.info("Resolved configuration written to %s", path)
        return path


def load_config(path, overrides=None, write_resolved=True):
    manager = ConfigManager(path)
    config = manager.load(overrides=overrides)
    if write_resolved:
        manager.write_resolved()
    return config


def save_config(config, path):
    return ConfigManager().save(path, config)
