"""
Alignment pipeline presets: baselines, the full domain-adaptive pipeline and ablations
"""

import dataclasses
import logging
import os
import re
from dataclasses import dataclass
from typing import Optional, Tuple

from ..core.errors import ConfigConstraintError, InvalidInputError
from ..core.seeding import derive_seed
from ..simulation.dataset import SOURCE_LENS_BASE, Dataset
from ..training.aligner import DegradationSpec, save_aligner, train_da3
from ..training.history import plot_training_curves
from .metrics import evaluate

logger = logging.getLogger(__name__)

TRAINING_SETS = ("source", "source_ideal", "oracle", "oracle_sparse")
AUGMENTATION_MODES = ("none", "config", "jpeg", "gaussian_blur", "gaussian_noise", "random_mask")
_ALIGNER_SEED_STREAM = 7
_LOSS_WEIGHT_NAME = re.compile(r"^DA3-adv(?P<adv>[0-9.eE+-]+)-pix(?P<pix>[0-9.eE+-]+)$")


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 128
    success_threshold_um: float = 0.0
    max_adjust_steps: int = 3
    heatmap_preset: str = "DA3"
    adjustment_presets: Tuple[str, ...] = ("Simulation", "DA3")
    adjustment_examples: int = 3
    lambda_adv_grid: Tuple[float, ...] = (0.01, 0.1, 1.0)
    lambda_pix_grid: Tuple[float, ...] = (0.005, 0.01, 0.05)

    def validate(self):
        if self.batch_size < 1 or self.max_adjust_steps < 1:
            raise ConfigConstraintError("evaluation", "batch_size and max_adjust_steps must be >= 1")
        if self.success_threshold_um < 0:
            raise ConfigConstraintError("evaluation.success_threshold_um", "must be >= 0 (0 scales with the range)")
        if self.adjustment_examples < 0:
            raise ConfigConstraintError("evaluation.adjustment_examples", "must be >= 0")
        for key in ("lambda_adv_grid", "lambda_pix_grid"):
            grid = getattr(self, key)
            if not grid or any(v <= 0 for v in grid):
                raise ConfigConstraintError(f"evaluation.{key}", "must be a non-empty list of positive weights")
        return self


@dataclass(frozen=True)
class PipelinePreset:
    """Training-data recipe plus domain-adaptation switches for one compared pipeline"""
    name: str
    training_set: str
    use_pseudo_target: bool = False
    pseudo_target_kind: str = "vq"
    adaptation: bool = False
    augmentation: str = "none"
    n_lenses: Optional[int] = None
    # None keeps the aligner config's weight
    lambda_adv: Optional[float] = None
    lambda_pix: Optional[float] = None

    def __post_init__(self):
        if self.training_set not in TRAINING_SETS:
            raise InvalidInputError(f"unknown training set {self.training_set!r}")
        if self.augmentation not in AUGMENTATION_MODES:
            raise InvalidInputError(f"unknown augmentation mode {self.augmentation!r}")
        if self.adaptation and not self.use_pseudo_target:
            raise InvalidInputError(f"{self.name}: domain adaptation needs the pseudo-target dataset")
        for weight in (self.lambda_adv, self.lambda_pix):
            if weight is not None and (not self.adaptation or weight < 0):
                raise InvalidInputError(f"{self.name}: loss weights need adaptation and must be >= 0")


def comparison_presets(n_oracle):
    """The six compared pipelines, in table order"""
    return [
        PipelinePreset(f"OnDevice({n_oracle})", "oracle", n_lenses=n_oracle),
        PipelinePreset("OnDeviceSparse(1)", "oracle_sparse", n_lenses=1),
        PipelinePreset("SimulationNoTol", "source_ideal"),
        PipelinePreset("Simulation", "source"),
        PipelinePreset("DA3NoTol", "source_ideal", use_pseudo_target=True, adaptation=True, augmentation="config"),
        PipelinePreset("DA3", "source", use_pseudo_target=True, adaptation=True, augmentation="config"),
    ]


def translation_presets():
    """Source plus pseudo-target training, no adaptation, with and without tolerance lenses"""
    presets = []
    for kind, suffix in (("cycle", "CycleGAN"), ("vq", "")):
        presets.append(PipelinePreset(f"SimTransformNoTol{suffix}", "source_ideal", use_pseudo_target=True,
                                      pseudo_target_kind=kind))
        presets.append(PipelinePreset(f"SimTransform{suffix}", "source", use_pseudo_target=True,
                                      pseudo_target_kind=kind))
    return presets


def degradation_presets():
    """One degradation type at a time on VQ-translated data, no adaptation"""
    return [
        PipelinePreset(f"Aug-{kind}", "source", use_pseudo_target=True, augmentation=kind)
        for kind in AUGMENTATION_MODES[2:]
    ]


def loss_weight_preset(lambda_adv, lambda_pix):
    return PipelinePreset(f"DA3-adv{lambda_adv:g}-pix{lambda_pix:g}", "source", use_pseudo_target=True,
                          adaptation=True, augmentation="config", lambda_adv=lambda_adv, lambda_pix=lambda_pix)


def loss_weight_presets(adv_grid=EvalConfig.lambda_adv_grid, pix_grid=EvalConfig.lambda_pix_grid):
    """Grid over the adversarial and pixel-consistency weights; the zero cell is augmentation only"""
    presets = [loss_weight_preset(0.0, 0.0)]
    presets += [loss_weight_preset(a, p) for a in adv_grid for p in pix_grid]
    return presets


def ablation_presets(evaluation=None):
    evaluation = evaluation or EvalConfig()
    return (
        translation_presets()
        + degradation_presets()
        + loss_weight_presets(evaluation.lambda_adv_grid, evaluation.lambda_pix_grid)
    )


def find_preset(name, n_oracle, evaluation=None):
    for preset in comparison_presets(n_oracle) + ablation_presets(evaluation):
        if preset.name == name:
            return preset
    match = _LOSS_WEIGHT_NAME.match(name)
    if match:
        try:
            return loss_weight_preset(float(match["adv"]), float(match["pix"]))
        except (ValueError, InvalidInputError):
            pass
    raise ConfigConstraintError("preset", f"unknown pipeline preset {name!r}")


@dataclass
class PipelineInputs:
    """Datasets a preset may consume; absent ones stay None"""
    source: Optional[Dataset] = None
    test: Optional[Dataset] = None
    oracle: Optional[Dataset] = None
    oracle_sparse: Optional[Dataset] = None
    pseudo_target: Optional[Dataset] = None
    pseudo_target_cycle: Optional[Dataset] = None

    def require(self, name, preset):
        ds = getattr(self, name)
        if ds is None:
            raise ConfigConstraintError(f"inputs.{name}", f"preset {preset.name} needs the {name} dataset")
        return ds


def _training_data(preset, inputs):
    if preset.training_set == "source":
        train = inputs.require("source", preset)
    elif preset.training_set == "source_ideal":
        train = inputs.require("source", preset).subset([SOURCE_LENS_BASE])
    elif preset.training_set == "oracle":
        oracle = inputs.require("oracle", preset)
        if preset.n_lenses is not None and preset.n_lenses > len(oracle.lens_ids):
            raise ConfigConstraintError("datasets.n_oracle", f"{preset.name} needs {preset.n_lenses} oracle lenses")
        train = oracle.subset(oracle.lens_ids[:preset.n_lenses])
    else:
        train = inputs.require("oracle_sparse", preset)
        train = train.subset(train.lens_ids[:preset.n_lenses or 1])

    s2t = None
    if preset.use_pseudo_target:
        name = "pseudo_target" if preset.pseudo_target_kind == "vq" else "pseudo_target_cycle"
        s2t = inputs.require(name, preset)
        if preset.training_set == "source_ideal":
            s2t = s2t.subset([SOURCE_LENS_BASE])
    return train, s2t


def preset_degradation(preset, base):
    if preset.augmentation == "none":
        return DegradationSpec.disabled()
    if preset.augmentation == "config":
        return base
    return dataclasses.replace(base, enabled_types=(preset.augmentation,))


def preset_aligner_config(preset, config):
    cfg = dataclasses.replace(config.aligner, rng_seed=derive_seed(config.global_seed, _ALIGNER_SEED_STREAM))
    if not preset.adaptation:
        return dataclasses.replace(cfg, lambda_adv=0.0, lambda_pix=0.0)
    if preset.lambda_adv is not None:
        cfg = dataclasses.replace(cfg, lambda_adv=preset.lambda_adv)
    if preset.lambda_pix is not None:
        cfg = dataclasses.replace(cfg, lambda_pix=preset.lambda_pix)
    return cfg


def train_preset(preset, config, inputs, device="cpu", work_dir=None):
    """Train the preset's aligner; returns (model, history)"""
    train, s2t = _training_data(preset, inputs)
    cfg = preset_aligner_config(preset, config)
    deg = preset_degradation(preset, config.degradation)

    metrics_path = None
    if work_dir:
        os.makedirs(work_dir, exist_ok=True)
        metrics_path = os.path.join(work_dir, "train_metrics.jsonl")
    logger.info("Training preset %s on %d %s samples%s", preset.name, train.n_samples, preset.training_set,
                " + pseudo-target" if s2t is not None else "")
    model, history = train_da3(train, s2t, cfg, deg, device=device, metrics_path=metrics_path)

    if work_dir:
        save_aligner(os.path.join(work_dir, "aligner.ckpt"), model, cfg, cfg.iterations,
                     extra={"preset": preset.name, "train_dataset": train.config_hash})
        plot_training_curves(history, os.path.join(work_dir, "training_curves.png"), title=preset.name)
    return model, history


def run_pipeline(preset, config, inputs, device="cpu", work_dir=None):
    """Train the preset and evaluate it on the shared test set"""
    test = inputs.require("test", preset)
    model, _ = train_preset(preset, config, inputs, device, work_dir)
    return evaluate(model, test, preset=preset.name, batch_size=config.evaluation.batch_size)
