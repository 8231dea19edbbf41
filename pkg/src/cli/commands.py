"""
Command dispatch for the alignment lab
"""

import logging
import os
import sys
import traceback

from ..core.config_manager import ConfigManager
from ..core.errors import LabError
from ..core.logging_setup import configure_logging
from ..core.seeding import seed_everything
from . import stages

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train-transform", "translate", "train", "eval", "report", "run-all", "ablate")


def _gen_data(config, layout, preset):
    stages.gen_data(config, layout)


def _train_transform(config, layout, preset):
    stages.train_transform_stage(config, layout)


def _translate(config, layout, preset):
    stages.translate_stage(config, layout)


def _train(config, layout, preset):
    stages.train_stage(config, layout, stages.presets_for(config, preset))


def _eval(config, layout, preset):
    presets = stages.presets_for(config, preset)
    stages.eval_stage(config, layout, presets)
    if preset is None:
        stages.report_stage(config, layout, presets)


def _report(config, layout, preset):
    stages.report_stage(config, layout, stages.presets_for(config, preset))


def _run_all(config, layout, preset):
    presets = stages.presets_for(config, preset)
    stages.gen_data(config, layout)
    stages.train_transform_stage(config, layout)
    stages.translate_stage(config, layout)
    stages.train_stage(config, layout, presets)
    stages.eval_stage(config, layout, presets)
    path = stages.report_stage(config, layout, presets)
    logger.info("run-all finished; metrics in %s", path)


def _ablate(config, layout, preset):
    presets = stages.presets_for(config, preset, ablation=True)
    stages.gen_data(config, layout)
    for kind in sorted({p.pseudo_target_kind for p in presets}):
        stages.train_transform_stage(config, layout, kind)
        stages.translate_stage(config, layout, kind)
    stages.train_stage(config, layout, presets)
    stages.eval_stage(config, layout, presets)
    stages.report_stage(config, layout, presets, csv_name="ablation.csv")
    stages.loss_weight_stage(layout, presets)


HANDLERS = {
    "gen-data": _gen_data,
    "train-transform": _train_transform,
    "translate": _translate,
    "train": _train,
    "eval": _eval,
    "report": _report,
    "run-all": _run_all,
    "ablate": _ablate,
}


def dispatch(command, config, preset=None):
    """Run one command against a resolved config; returns the process exit status"""
    if command not in HANDLERS:
        print(f"error: unknown command {command!r}; expected one of {', '.join(COMMANDS)}", file=sys.stderr)
        return 2

    layout = stages.RunLayout(config.output_dir)
    os.makedirs(layout.root, exist_ok=True)
    configure_logging(log_file=layout.stage_log)
    ConfigManager().write_resolved(config)
    seed_everything(config.global_seed, config.determinism)

    logger.info("Starting stage %s (scenario %s, seed %d)", command, config.scenario, config.global_seed)
    try:
        HANDLERS[command](config, layout, preset)
    except LabError as e:
        logger.error("%s failed: %s", command, e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error("%s crashed: %s\n%s", command, e, traceback.format_exc())
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    logger.info("Finished stage %s", command)
    return 0
