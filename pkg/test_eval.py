"""
Tests for evaluation metrics, adjustment simulation, pipeline presets and report files
"""

import dataclasses
import json
import os
import tempfile

import numpy as np

from src.core.config_manager import scenario_config
from src.core.errors import ConfigConstraintError, EvaluationError, InvalidInputError, MissingArtifactError
from src.core.imports import MATPLOTLIB_AVAILABLE
from src.evaluation.adjustment import (
    adjust_iteratively,
    adjust_once,
    adjustment_examples,
    adjustment_summary,
    within_threshold,
)
from src.evaluation.metrics import (
    error_heatmap,
    evaluate,
    radial_error_profile,
    report_from_errors,
    success_threshold,
)
from src.evaluation.pipelines import (
    EvalConfig,
    PipelineInputs,
    PipelinePreset,
    ablation_presets,
    comparison_presets,
    degradation_presets,
    find_preset,
    loss_weight_presets,
    preset_aligner_config,
    preset_degradation,
    run_pipeline,
    translation_presets,
)
from src.evaluation.reports import (
    LOSS_WEIGHT_COLUMNS,
    METRIC_COLUMNS,
    plot_adjustment_example,
    read_audit_labels,
    read_metrics_csv,
    write_evaluation_bundle,
    write_loss_weight_grid,
    write_metrics_csv,
)
from src.simulation.dataset import (
    Dataset,
    LensRecord,
    Sample,
    build_eval_datasets,
    build_source_dataset,
    build_target_dataset,
    save_dataset,
)
from src.simulation.optics_sim import LensInstance, MisalignmentOffset, source_clean_domain, target_domain
from src.simulation.sampling import SamplingConfig, grid_positions
from src.training.aligner import AlignerTrainConfig, DegradationSpec

WIDE = SamplingConfig(range_um=30.0, step_um=2.0, n_random=100, prealign=False)
TINY = SamplingConfig(range_um=2.0, step_um=2.0, n_random=2, prealign=False)


class OracleStub:
    """Reads the label back out of the first two fields of each capture"""

    def predict_offsets(self, images, batch_size=128):
        return np.asarray(images, dtype=np.float64)[:, :2, 0, 0]


class FixedPredictor:
    def __init__(self, dx=0.0, dy=0.0):
        self.value = (dx, dy)

    def predict_offsets(self, images, batch_size=128):
        return np.tile(np.array(self.value, dtype=np.float64), (len(images), 1))


def _labeled_grid(sampling, lens_ids=(1000,), role="test"):
    """Dataset over every grid node whose 1x1 images encode their own labels"""
    records = []
    for lens_id in lens_ids:
        samples = []
        for sid, pos in enumerate(grid_positions(sampling.range_um, sampling.step_um)):
            images = np.zeros((5, 1, 1), dtype=np.float32)
            images[0, 0, 0], images[1, 0, 0] = pos.dx, pos.dy
            samples.append(Sample(sid, pos if role != "target_unlabeled" else None, images, sid))
        records.append(LensRecord(lens=LensInstance.ideal(lens_id), samples=samples))
    return Dataset(role=role, domain=source_clean_domain(32), lenses=records, sampling=sampling, dataset_seed=0)


# ------------------------------------------------------------------ metrics

def test_oracle_predictor_scores_zero():
    report = evaluate(OracleStub(), _labeled_grid(TINY, lens_ids=(1000, 1001)), preset="oracle")
    assert report.n_samples == 18
    assert report.mae_x == report.mae_y == report.mae_avg == 0.0
    assert report.per_lens_mae == {1000: 0.0, 1001: 0.0}
    assert np.array_equal(error_heatmap(report, TINY), np.zeros((3, 3)))


def test_constant_predictor_on_wide_grid():
    report = evaluate(FixedPredictor(), _labeled_grid(WIDE))
    assert report.n_samples == 961
    assert abs(report.mae_x - 480 / 31) < 1e-9
    assert abs(report.mae_y - 480 / 31) < 1e-9
    assert abs(report.mae_avg - 15.484) < 1e-3

    grid = error_heatmap(report, WIDE)
    assert grid.shape == (31, 31)
    assert grid[15, 15] == 0.0
    assert grid[0, 0] == 30.0
    assert grid[15, 30] == 15.0  # dy = 0, dx = 30

    inner, outer = radial_error_profile(report, WIDE.range_um)
    assert inner < outer


def test_report_from_errors_arithmetic():
    report = report_from_errors([(2, 0), (0, 2)], [(0, 0), (0, 0)], [7, 7])
    assert (report.mae_x, report.mae_y, report.mae_avg) == (1.0, 1.0, 1.0)
    assert (report.sd_x, report.sd_y, report.sd_avg) == (1.0, 1.0, 1.0)
    assert report.per_position_errors == {(0.0, 0.0): 1.0}
    assert report.per_lens_mae == {7: 1.0}
    assert report.metadata["sd_over"] == "absolute_errors"

    data = json.loads(report.to_json())
    assert set(METRIC_COLUMNS) <= set(data)
    assert data["per_position_errors"] == [{"dx_um": 0.0, "dy_um": 0.0, "mae_um": 1.0}]


def test_evaluation_errors():
    try:
        report_from_errors(np.zeros((0, 2)), np.zeros((0, 2)), [])
    except EvaluationError:
        pass
    else:
        raise AssertionError("empty evaluation accepted")

    try:
        evaluate(FixedPredictor(), _labeled_grid(TINY, role="target_unlabeled"))
    except EvaluationError:
        pass
    else:
        raise AssertionError("unlabeled evaluation accepted")

    off_grid = report_from_errors([(0, 0)], [(1, 0)], [0])
    try:
        error_heatmap(off_grid, TINY)
    except EvaluationError:
        pass
    else:
        raise AssertionError("off-grid report accepted")


def test_success_threshold_scales_with_range():
    assert success_threshold(30.0) == 2.0
    assert success_threshold(15.0) == 1.0


# --------------------------------------------------------------- adjustment

def test_within_threshold_boundary():
    assert within_threshold(MisalignmentOffset(2.0, 2.0))
    assert within_threshold(MisalignmentOffset(-2.0, 0.0))
    assert not within_threshold(MisalignmentOffset(2.01, 0.0))


def test_adjust_once():
    domain = source_clean_domain(32)
    lens = LensInstance.ideal()
    start = MisalignmentOffset(30.0, 30.0)

    exact = adjust_once(FixedPredictor(30.0, 30.0), lens, start, domain, 0)
    assert exact.residual == MisalignmentOffset(0.0, 0.0)
    assert exact.success
    assert exact.after.images.shape == (5, 32, 32)

    idle = adjust_once(FixedPredictor(), lens, start, domain, 0)
    assert idle.residual == start
    assert not idle.success


def test_adjust_iteratively_chains_residuals():
    domain = source_clean_domain(32)
    steps = adjust_iteratively(FixedPredictor(20.0, 0.0), LensInstance.ideal(), MisalignmentOffset(30.0, 0.0),
                               domain, 0, max_steps=3)
    assert [s.residual.dx for s in steps] == [10.0, -10.0, -30.0]
    assert steps[1].start == steps[0].residual
    assert not any(s.success for s in steps)

    done = adjust_iteratively(FixedPredictor(29.0, 0.0), LensInstance.ideal(), MisalignmentOffset(30.0, 0.0),
                              domain, 0, max_steps=3)
    assert len(done) == 1 and done[0].success


def test_adjustment_summary():
    test = _labeled_grid(TINY)
    loose = adjustment_summary(FixedPredictor(), test, threshold=2.0)
    assert loose["n_starts"] == 9
    assert loose["success_rate"] == 1.0
    strict = adjustment_summary(FixedPredictor(), test, threshold=1.0, max_steps=2)
    assert abs(strict["success_rate"] - 1 / 9) < 1e-12
    assert strict["max_steps"] == 2
    assert 1.0 <= strict["mean_steps"] <= 2.0


# ------------------------------------------------------------------ presets

def test_preset_tables():
    names = [p.name for p in comparison_presets(3)]
    assert names == ["OnDevice(3)", "OnDeviceSparse(1)", "SimulationNoTol", "Simulation", "DA3NoTol", "DA3"]
    ablation = [p.name for p in ablation_presets()]
    assert ablation[:4] == ["SimTransformNoTolCycleGAN", "SimTransformCycleGAN", "SimTransformNoTol", "SimTransform"]
    assert ablation[4:8] == ["Aug-jpeg", "Aug-gaussian_blur", "Aug-gaussian_noise", "Aug-random_mask"]
    assert ablation[8] == "DA3-adv0-pix0"
    assert len(ablation) == 8 + 1 + 9
    assert len(set(ablation)) == len(ablation)
    assert find_preset("DA3", 2).adaptation
    try:
        find_preset("DA4", 2)
    except ConfigConstraintError:
        pass
    else:
        raise AssertionError("unknown preset found")
    try:
        PipelinePreset("broken", "source", adaptation=True)
    except InvalidInputError:
        pass
    else:
        raise AssertionError("adaptation without pseudo-target accepted")


def test_preset_training_switches():
    config = scenario_config("desk")
    simulation = find_preset("Simulation", 2)
    da3 = find_preset("DA3", 2)

    cfg = preset_aligner_config(simulation, config)
    assert cfg.lambda_adv == 0.0 and cfg.lambda_pix == 0.0
    assert preset_aligner_config(da3, config).lambda_adv == config.aligner.lambda_adv
    assert preset_aligner_config(da3, config).rng_seed == cfg.rng_seed

    assert preset_degradation(simulation, config.degradation).apply_probability == 0.0
    assert preset_degradation(da3, config.degradation) == config.degradation
    assert preset_degradation(find_preset("Aug-jpeg", 2), config.degradation).enabled_types == ("jpeg",)


def test_translation_and_degradation_presets_train_without_adaptation():
    config = scenario_config("desk")
    for preset in translation_presets() + degradation_presets():
        assert preset.use_pseudo_target and not preset.adaptation
        cfg = preset_aligner_config(preset, config)
        assert cfg.lambda_adv == 0.0 and cfg.lambda_pix == 0.0
    kinds = {p.name: (p.training_set, p.pseudo_target_kind) for p in translation_presets()}
    assert kinds["SimTransformNoTolCycleGAN"] == ("source_ideal", "cycle")
    assert kinds["SimTransform"] == ("source", "vq")


def test_loss_weight_presets_override_aligner_weights():
    config = scenario_config("desk")
    grid = loss_weight_presets()
    assert len(grid) == 1 + 9
    assert (grid[0].lambda_adv, grid[0].lambda_pix) == (0.0, 0.0)
    assert {(p.lambda_adv, p.lambda_pix) for p in grid[1:]} == {
        (a, p) for a in (0.01, 0.1, 1.0) for p in (0.005, 0.01, 0.05)
    }

    cell = find_preset("DA3-adv0.5-pix0.02", 2)
    assert cell.name == "DA3-adv0.5-pix0.02" and cell.adaptation
    cfg = preset_aligner_config(cell, config)
    assert (cfg.lambda_adv, cfg.lambda_pix) == (0.5, 0.02)
    zero = preset_aligner_config(grid[0], config)
    assert (zero.lambda_adv, zero.lambda_pix) == (0.0, 0.0)
    assert preset_degradation(grid[0], config.degradation) == config.degradation

    custom = EvalConfig(lambda_adv_grid=(2.0,), lambda_pix_grid=(0.1, 0.2))
    names = [p.name for p in ablation_presets(custom)][8:]
    assert names == ["DA3-adv0-pix0", "DA3-adv2-pix0.1", "DA3-adv2-pix0.2"]
    assert find_preset("DA3-adv2-pix0.2", 1, custom).lambda_pix == 0.2

    for bad in ("DA3-adv-1-pix0.1", "DA3-advx-pix0.1"):
        try:
            find_preset(bad, 2)
        except ConfigConstraintError:
            continue
        raise AssertionError(f"{bad} accepted")
    try:
        PipelinePreset("weighted", "source", use_pseudo_target=True, lambda_adv=0.1)
    except InvalidInputError:
        pass
    else:
        raise AssertionError("loss weight without adaptation accepted")
    try:
        EvalConfig(lambda_pix_grid=()).validate()
    except ConfigConstraintError:
        pass
    else:
        raise AssertionError("empty weight grid accepted")


def test_loss_weight_grid_files():
    cells = [
        {"name": "DA3-adv1-pix0.05", "lambda_adv": 1.0, "lambda_pix": 0.05, "mae_x": 1.0, "mae_y": 2.0,
         "mae_avg": 1.5, "sd_avg": 0.25},
        {"name": "DA3-adv0-pix0", "lambda_adv": 0.0, "lambda_pix": 0.0, "mae_x": 3.0, "mae_y": 3.0,
         "mae_avg": 3.0, "sd_avg": 0.5},
    ]
    with tempfile.TemporaryDirectory() as tmp:
        path = write_loss_weight_grid(cells, tmp)
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip().split(",")
            rows = [line.strip().split(",") for line in f if line.strip()]
        assert tuple(header) == LOSS_WEIGHT_COLUMNS
        assert rows[0] == ["DA3-adv0-pix0", "0", "0", "3.000000", "3.000000", "3.000000", "0.500000"]
        assert rows[1][:3] == ["DA3-adv1-pix0.05", "1", "0.05"]
        with open(os.path.join(tmp, "loss_weights.json"), "r", encoding="utf-8") as f:
            assert [c["name"] for c in json.load(f)["cells"]] == ["DA3-adv0-pix0", "DA3-adv1-pix0.05"]


def test_adjustment_examples_start_from_farthest_position():
    test = _labeled_grid(TINY, lens_ids=(1000, 1001))
    examples = adjustment_examples(FixedPredictor(-2.0, -2.0), test, threshold=2.0, n_lenses=1)
    assert [lens_id for lens_id, _ in examples] == [1000]
    result = examples[0][1]
    assert result.start == MisalignmentOffset(-2.0, -2.0)
    assert result.residual == MisalignmentOffset(0.0, 0.0) and result.success
    assert result.before.images.shape == result.after.images.shape == (5, 32, 32)
    assert not np.array_equal(result.before.images, result.after.images)
    assert len(adjustment_examples(FixedPredictor(), test, n_lenses=5)) == 2

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "adjust.png")
        written = plot_adjustment_example(result, path)
        if MATPLOTLIB_AVAILABLE:
            assert written == path and os.path.getsize(path) > 0
        else:
            assert written is None
        try:
            plot_adjustment_example(dataclasses.replace(result, before=None), path)
        except MissingArtifactError:
            pass
        else:
            if MATPLOTLIB_AVAILABLE:
                raise AssertionError("adjustment without captures plotted")


def test_run_pipeline_on_toy_data():
    config = dataclasses.replace(
        scenario_config("desk"),
        sampling=TINY,
        aligner=AlignerTrainConfig(iterations=2, batch_size=4, width=4, feature_dim=8, log_every=1),
        degradation=DegradationSpec(),
    )
    source = build_source_dataset(source_clean_domain(32), 1, TINY, 3, workers=1)
    test, oracle = build_eval_datasets(target_domain(32), 1, 1, TINY, 3, workers=1)
    inputs = PipelineInputs(source=source, test=test, oracle=oracle)

    with tempfile.TemporaryDirectory() as tmp:
        report = run_pipeline(find_preset("SimulationNoTol", 1), config, inputs, work_dir=tmp)
        assert report.preset == "SimulationNoTol"
        assert report.n_samples == 9
        assert np.isfinite(report.mae_avg)
        assert os.path.exists(os.path.join(tmp, "aligner.ckpt"))
        assert os.path.exists(os.path.join(tmp, "train_metrics.jsonl"))

        try:
            run_pipeline(find_preset("DA3", 1), config, inputs)
        except ConfigConstraintError:
            pass
        else:
            raise AssertionError("DA3 ran without a pseudo-target dataset")


# ------------------------------------------------------------------ reports

def test_report_files():
    report = evaluate(FixedPredictor(), _labeled_grid(TINY), preset="Simulation")
    grid = error_heatmap(report, TINY)
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "reports", "Simulation")
        write_evaluation_bundle(report, grid, TINY, out)
        for name in ("report.json", "per_lens.csv", "heatmap.csv"):
            assert os.path.exists(os.path.join(out, name))
        with open(os.path.join(out, "heatmap.csv"), "r", encoding="utf-8") as f:
            rows = f.read().strip().splitlines()
        assert rows[0] == "dy\\dx,-2,0,2"
        assert len(rows) == 4

        csv_path = os.path.join(tmp, "metrics.csv")
        write_metrics_csv([report.row(), dict(report.row(), name="DA3")], csv_path)
        rows = read_metrics_csv(csv_path)
        assert [r["name"] for r in rows] == ["Simulation", "DA3"]
        assert abs(rows[0]["mae_x"] - report.mae_x) < 1e-6


def test_audit_labels_report_distance_to_grid():
    target = build_target_dataset(target_domain(32), 2, 8, TINY, workers=1)
    with tempfile.TemporaryDirectory() as tmp:
        save_dataset(target, tmp)
        entries = read_audit_labels(tmp)
        assert len(entries) == 2
        for entry in entries:
            assert 0.0 <= entry["nearest_grid_um"] <= np.sqrt(2.0)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
    print("All evaluation tests passed")
