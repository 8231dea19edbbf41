"""
Run directory layout and hash-guarded pipeline stages
"""

import dataclasses
import json
import logging
import os
import re

from ..core.errors import DatasetLoadError, DependencyError
from ..core.seeding import derive_seed
from ..core.serialization import config_hash, dump_json
from ..evaluation.adjustment import adjustment_examples, adjustment_summary
from ..evaluation.metrics import error_heatmap, evaluate, radial_error_profile, success_threshold
from ..evaluation.pipelines import (
    PipelineInputs,
    ablation_presets,
    comparison_presets,
    find_preset,
    preset_aligner_config,
    train_preset,
)
from ..evaluation.reports import (
    METRIC_COLUMNS,
    plot_adjustment_example,
    write_evaluation_bundle,
    write_loss_weight_grid,
    write_metrics_csv,
)
from ..simulation.dataset import (
    EVAL_LENS_BASE,
    build_eval_datasets,
    build_oracle_dataset,
    build_source_dataset,
    build_target_dataset,
    load_dataset,
    read_manifest,
    save_dataset,
    verify_checksums,
)
from ..training.aligner import load_aligner
from ..training.domain_transform import load_generator, save_generator, train_transform, translate_dataset
from ..training.history import plot_training_curves

logger = logging.getLogger(__name__)

DATASET_NAMES = ("source", "target", "test", "oracle", "oracle_sparse")
_DATASET_SEED_STREAM = 11
_TRANSFORM_SEED_STREAM = 13
_ADJUST_SEED_STREAM = 17


def preset_slug(name):
    return re.sub(r"[^A-Za-z0-9_-]+", "_", name).strip("_")


class RunLayout:
    """Paths of every artifact under one output directory"""

    def __init__(self, root):
        self.root = root

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def dataset(self, name):
        return self.path("data", name)

    def generator(self, kind="vq"):
        return self.path("transform", "generator.ckpt" if kind == "vq" else f"generator_{kind}.ckpt")

    def pseudo_target(self, kind="vq"):
        return self.dataset("pseudo_target" if kind == "vq" else f"pseudo_target_{kind}")

    def model_dir(self, preset_name):
        return self.path("models", preset_slug(preset_name))

    def report_dir(self, preset_name):
        return self.path("reports", preset_slug(preset_name))

    def marker(self, stage):
        return self.path("stages", f"{stage}.json")

    @property
    def stage_log(self):
        return self.path("stage.log")


def require(stage, *paths):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DependencyError(stage, missing)


def stage_done(layout, stage, digest):
    path = layout.marker(stage)
    if not os.path.exists(path):
        return False
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f).get("hash") == digest


def mark_done(layout, stage, digest, **info):
    os.makedirs(os.path.dirname(layout.marker(stage)), exist_ok=True)
    dump_json(dict(info, stage=stage, hash=digest), layout.marker(stage))


# ------------------------------------------------------------- stage hashes

def data_hash(config):
    datasets = dataclasses.replace(config.datasets, workers=0)
    return config_hash({
        "source_domain": config.source_domain,
        "target_domain": config.target_domain,
        "sampling": config.sampling,
        "datasets": datasets,
        "global_seed": config.global_seed,
    })


def transform_hash(config, kind="vq"):
    return config_hash({"data": data_hash(config), "transform": transform_config(config, kind)})


def transform_config(config, kind="vq"):
    return dataclasses.replace(
        config.transform,
        generator_type=kind,
        rng_seed=derive_seed(config.global_seed, _TRANSFORM_SEED_STREAM),
    )


def train_hash(config, preset):
    return config_hash({
        "transform": transform_hash(config, preset.pseudo_target_kind),
        "aligner": config.aligner,
        "degradation": config.degradation,
        "preset": preset,
        "global_seed": config.global_seed,
    })


# ------------------------------------------------------------------- stages

def gen_data(config, layout):
    """Generate every dataset; a re-run with the same config only verifies checksums"""
    digest = data_hash(config)
    roots = [layout.dataset(name) for name in DATASET_NAMES]
    if stage_done(layout, "gen-data", digest) and all(os.path.exists(r) for r in roots):
        try:
            for root in roots:
                verify_checksums(root)
                if read_manifest(root)["dataset_seed"] != derive_seed(config.global_seed, _DATASET_SEED_STREAM):
                    raise DatasetLoadError(f"{root} was generated with another seed")
            logger.info("gen-data: datasets up to date (hash %s)", digest[:12])
            return False
        except DatasetLoadError as e:
            logger.warning("gen-data: regenerating, existing data failed verification: %s", e)

    seed = derive_seed(config.global_seed, _DATASET_SEED_STREAM)
    sizes = config.datasets
    sampling = config.sampling

    source = build_source_dataset(config.source_domain, sizes.m_tolerance_lenses, sampling, seed, sizes.workers)
    save_dataset(source, layout.dataset("source"))
    target = build_target_dataset(config.target_domain, sizes.n_random, seed, sampling, sizes.workers)
    save_dataset(target, layout.dataset("target"))
    test, oracle = build_eval_datasets(config.target_domain, sizes.n_test, sizes.n_oracle, sampling, seed,
                                       sizes.workers)
    save_dataset(test, layout.dataset("test"))
    save_dataset(oracle, layout.dataset("oracle"))
    sparse = build_oracle_dataset(config.target_domain, [EVAL_LENS_BASE + sizes.n_test], sampling, seed,
                                  step_multiplier=sampling.sparse_step_multiplier, workers=sizes.workers)
    save_dataset(sparse, layout.dataset("oracle_sparse"))

    mark_done(layout, "gen-data", digest, dataset_hashes={
        "source": source.config_hash, "target": target.config_hash, "test": test.config_hash,
        "oracle": oracle.config_hash, "oracle_sparse": sparse.config_hash,
    })
    return True


def train_transform_stage(config, layout, kind="vq"):
    stage = "train-transform" if kind == "vq" else f"train-transform-{kind}"
    require(stage, layout.dataset("source"), layout.dataset("target"))
    digest = transform_hash(config, kind)
    if stage_done(layout, stage, digest) and os.path.exists(layout.generator(kind)):
        logger.info("%s: generator up to date", stage)
        return False

    cfg = transform_config(config, kind)
    src = load_dataset(layout.dataset("source"))
    trg = load_dataset(layout.dataset("target"))
    out_dir = os.path.dirname(layout.generator(kind))
    metrics = os.path.join(out_dir, f"{kind}_metrics.jsonl")
    g, history = train_transform(src, trg, cfg, device=config.device, metrics_path=metrics)
    save_generator(layout.generator(kind), g, cfg, cfg.iterations)
    plot_training_curves(history, os.path.join(out_dir, f"{kind}_curves.png"), title=f"{kind} generator")
    mark_done(layout, stage, digest)
    return True


def translate_stage(config, layout, kind="vq"):
    stage = "translate" if kind == "vq" else f"translate-{kind}"
    require(stage, layout.generator(kind), layout.dataset("source"))
    digest = config_hash({"transform": transform_hash(config, kind)})
    if stage_done(layout, stage, digest) and os.path.exists(layout.pseudo_target(kind)):
        logger.info("%s: pseudo-target dataset up to date", stage)
        return False

    g = load_generator(layout.generator(kind), device=config.device)
    s2t = translate_dataset(g, load_dataset(layout.dataset("source")))
    save_dataset(s2t, layout.pseudo_target(kind))
    mark_done(layout, stage, digest)
    return True


def _inputs(layout, presets, with_test=False):
    needed = {"source", "oracle", "oracle_sparse"}
    for preset in presets:
        if preset.use_pseudo_target:
            needed.add("pseudo_target" if preset.pseudo_target_kind == "vq" else "pseudo_target_cycle")
    if with_test:
        needed.add("test")

    paths = {
        "source": layout.dataset("source"),
        "test": layout.dataset("test"),
        "oracle": layout.dataset("oracle"),
        "oracle_sparse": layout.dataset("oracle_sparse"),
        "pseudo_target": layout.pseudo_target("vq"),
        "pseudo_target_cycle": layout.pseudo_target("cycle"),
    }
    require("train", *[paths[n] for n in sorted(needed)])
    return PipelineInputs(**{n: load_dataset(paths[n]) for n in needed})


def train_stage(config, layout, presets):
    inputs = None
    for preset in presets:
        stage = f"train-{preset_slug(preset.name)}"
        digest = train_hash(config, preset)
        model_dir = layout.model_dir(preset.name)
        if stage_done(layout, stage, digest) and os.path.exists(os.path.join(model_dir, "aligner.ckpt")):
            logger.info("train: %s up to date", preset.name)
            continue
        inputs = inputs or _inputs(layout, presets)
        train_preset(preset, config, inputs, device=config.device, work_dir=model_dir)
        mark_done(layout, stage, digest, preset=preset.name)


def eval_stage(config, layout, presets):
    """Evaluate trained presets on the test set; returns the reports in preset order"""
    ckpts = [os.path.join(layout.model_dir(p.name), "aligner.ckpt") for p in presets]
    require("eval", layout.dataset("test"), *ckpts)
    test = load_dataset(layout.dataset("test"))
    threshold = config.evaluation.success_threshold_um or success_threshold(config.sampling.range_um)

    reports = []
    for preset, ckpt in zip(presets, ckpts):
        model = load_aligner(ckpt, device=config.device)
        report = evaluate(model, test, preset=preset.name, batch_size=config.evaluation.batch_size)
        grid = error_heatmap(report, test.sampling)
        inner, outer = radial_error_profile(report, config.sampling.range_um)
        trained = preset_aligner_config(preset, config)
        report.metadata.update({
            "radial_inner_mae": inner,
            "radial_outer_mae": outer,
            "lambda_adv": trained.lambda_adv,
            "lambda_pix": trained.lambda_pix,
        })
        out_dir = layout.report_dir(preset.name)
        if preset.name in config.evaluation.adjustment_presets:
            seed = derive_seed(config.global_seed, _ADJUST_SEED_STREAM)
            report.metadata["adjust_once"] = adjustment_summary(model, test, threshold, seed, max_steps=1)
            report.metadata["adjust_iterative"] = adjustment_summary(
                model, test, threshold, seed, max_steps=config.evaluation.max_adjust_steps
            )
            _write_adjustment_examples(model, test, threshold, seed, config.evaluation.adjustment_examples,
                                       out_dir, report)
        write_evaluation_bundle(report, grid, test.sampling, out_dir)
        reports.append(report)
    return reports


def _write_adjustment_examples(model, test, threshold, seed, n_lenses, out_dir, report):
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for lens_id, result in adjustment_examples(model, test, threshold, seed, n_lenses):
        path = os.path.join(out_dir, f"adjust_lens{lens_id}.png")
        if plot_adjustment_example(result, path, title=f"{report.preset} lens {lens_id}"):
            written.append(os.path.basename(path))
    report.metadata["adjust_examples"] = written


def loss_weight_stage(layout, presets):
    """Collect the loss-weight grid presets' reports into one MAE table"""
    cells = []
    for preset in presets:
        if preset.lambda_adv is None:
            continue
        path = os.path.join(layout.report_dir(preset.name), "report.json")
        require("loss-weights", path)
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        cells.append({
            "name": preset.name,
            "lambda_adv": preset.lambda_adv,
            "lambda_pix": preset.lambda_pix,
            **{k: data[k] for k in ("mae_x", "mae_y", "mae_avg", "sd_avg")},
        })
    if not cells:
        return None
    return write_loss_weight_grid(cells, layout.root)


def report_stage(config, layout, presets, csv_name="metrics.csv"):
    """Collect per-preset report.json files into one metrics table"""
    paths = [os.path.join(layout.report_dir(p.name), "report.json") for p in presets]
    require("report", *paths)
    rows = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        rows.append({k: data[k] for k in METRIC_COLUMNS})
    out = layout.path(csv_name)
    write_metrics_csv(rows, out)
    return out


def presets_for(config, preset_name=None, ablation=False):
    if preset_name is not None:
        return [find_preset(preset_name, config.datasets.n_oracle, config.evaluation)]
    return ablation_presets(config.evaluation) if ablation else comparison_presets(config.datasets.n_oracle)
