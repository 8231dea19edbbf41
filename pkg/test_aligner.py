"""
Tests for the aligner: degradations, model contracts, loss terms and training
"""

import dataclasses
import math
import os
import tempfile

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from src.core.errors import InvalidInputError
from src.core.imports import NUM_FOVS
from src.simulation.dataset import Dataset, LensRecord, Sample, build_source_dataset
from src.simulation.optics_sim import LensInstance, MisalignmentOffset, source_clean_domain
from src.simulation.sampling import SamplingConfig
from src.training.aligner import (
    AlignerTrainConfig,
    DegradationSpec,
    PairedBatchSampler,
    apply_random_mask,
    augment,
    augment_fovset,
    build_aligner,
    da3_objective,
    denormalize_offset,
    domain_disc_loss,
    extract_features,
    feature_adv_loss,
    infer,
    load_aligner,
    pixel_consistency_loss,
    predict_offset,
    regression_loss,
    save_aligner,
    total_objective,
    train_da3,
)
from src.training.domain_transform import translate_dataset

TINY = SamplingConfig(range_um=2.0, step_um=2.0, n_random=2, prealign=False)
SMALL = AlignerTrainConfig(iterations=3, batch_size=4, width=4, feature_dim=8, dropout=0.0, rng_seed=2,
                           log_every=1)


class IdentityGenerator(nn.Module):
    def __init__(self):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return x


def _logit(p):
    return torch.tensor([math.log(p / (1 - p))], dtype=torch.float64)


def _pair():
    src = build_source_dataset(source_clean_domain(32), 0, TINY, 4, workers=1)
    return src, translate_dataset(IdentityGenerator(), src)


# ------------------------------------------------------------------- losses

def test_pixel_consistency_loss():
    f = torch.randn(3, 512)
    assert float(pixel_consistency_loss(f, f)) == 0.0
    one_hot = torch.zeros(1, 512)
    one_hot[0, 0] = 1.0
    assert abs(float(pixel_consistency_loss(one_hot, torch.zeros(1, 512))) - 1 / 512) < 1e-6


def test_domain_disc_loss():
    assert abs(float(domain_disc_loss(_logit(0.9), _logit(0.1))) - 0.21072) < 1e-5
    assert abs(float(domain_disc_loss(_logit(0.5), _logit(0.5))) - 1.38629) < 1e-5
    saturated = domain_disc_loss(torch.tensor([60.0]), torch.tensor([-60.0]))
    assert 0.0 < float(saturated) < 1e-6


def test_feature_adv_loss_minimum_at_one_half():
    assert abs(float(feature_adv_loss(_logit(0.5), _logit(0.5))) - 1.38629) < 1e-5
    assert abs(float(feature_adv_loss(_logit(0.9), _logit(0.9))) - 2.40795) < 1e-5

    probs = np.linspace(0.05, 0.95, 19)
    values = [float(feature_adv_loss(_logit(p), _logit(p))) for p in probs]
    assert abs(probs[int(np.argmin(values))] - 0.5) < 1e-9
    # Saturated logits stay finite because probabilities are clamped
    assert math.isfinite(float(feature_adv_loss(torch.tensor([80.0]), torch.tensor([-80.0]))))


def test_regression_and_total_objective():
    label = torch.zeros(1, 2)
    assert float(regression_loss(label, label, label)) == 0.0
    assert abs(float(regression_loss(torch.tensor([[1.0, 2.0]]), label, label)) - 2.5) < 1e-6
    assert abs(float(regression_loss(torch.tensor([[1.0, 2.0]]), None, label)) - 2.5) < 1e-6
    assert abs(total_objective(1.0, 2.0, 3.0, 0.05, 1.0) - 4.1) < 1e-12
    assert total_objective(1.0, 2.0, 3.0, 0.0, 0.0) == 1.0


def test_objective_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build_aligner(SMALL, 32, 2.0).double().eval()
    f = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    y = torch.randn(2, 2, dtype=torch.float64)

    def objective(features):
        return da3_objective(model, features, 2, y, 0.05, 1.0)[0]

    assert torch.autograd.gradcheck(objective, (f,), eps=1e-6, atol=1e-5)


def test_objective_without_pseudo_target_is_regression():
    torch.manual_seed(0)
    model = build_aligner(SMALL, 32, 2.0).eval()
    f = torch.randn(3, 8)
    y = torch.randn(3, 2)
    total, terms = da3_objective(model, f, 3, y, 0.05, 1.0)
    with torch.no_grad():
        expected = regression_loss(model.predictor(f), None, y)
    assert abs(float(total) - float(expected)) < 1e-6
    assert float(terms["l_pix"]) == 0.0 and float(terms["l_adv_E"]) == 0.0


# ------------------------------------------------------------- augmentation

def test_random_mask_zeroes_exact_pixel_count():
    rng = np.random.default_rng(0)
    img = np.ones((50, 50), dtype=np.float32)
    assert int((apply_random_mask(img, 0.20, rng) == 0).sum()) == 500
    for ratio in (0.05, 0.11, 0.173, 0.2):
        for side in (32, 48, 70):
            img = np.ones((side, side), dtype=np.float32)
            masked = apply_random_mask(img, ratio, rng)
            assert int((masked == 0).sum()) == round(ratio * side * side)
    assert img.min() == 1.0


def test_augment_identity_and_determinism():
    img = np.random.default_rng(1).uniform(0, 1, size=(32, 32)).astype(np.float32)
    assert np.array_equal(augment(img, DegradationSpec.disabled(), 9), img)
    assert np.array_equal(augment(img, DegradationSpec(apply_probability=0.0), 9), img)

    for kind in ("jpeg", "gaussian_blur", "gaussian_noise", "random_mask"):
        spec = DegradationSpec.only(kind, 1.0).validate()
        out = augment(img, spec, 5)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.array_equal(out, augment(img, spec, 5))
        assert not np.array_equal(out, img)


def test_augment_fovset_uses_one_draw_per_capture():
    images = np.ones((5, 40, 40), dtype=np.float32)
    out = augment_fovset(images, DegradationSpec.only("random_mask", 1.0), 3)
    counts = {int((field == 0).sum()) for field in out}
    assert len(counts) == 1 and counts.pop() > 0


def test_degradation_spec_validation():
    for bad in (
        DegradationSpec(enabled_types=("sepia",)),
        DegradationSpec(apply_probability=1.5),
        DegradationSpec(blur_kernel_choices=(4,)),
        DegradationSpec(mask_ratio_range=(0.3, 0.1)),
    ):
        try:
            bad.validate()
        except InvalidInputError:
            continue
        raise AssertionError(f"{bad} accepted")


# -------------------------------------------------------------------- model

def test_features_and_prediction_contracts():
    torch.manual_seed(0)
    model = build_aligner(AlignerTrainConfig(width=8), 32, 30.0)
    fovset = np.random.default_rng(0).uniform(0, 1, size=(5, 32, 32))
    f = extract_features(model, fovset)
    assert f.shape == (512,)
    assert np.isfinite(f).all()
    assert np.array_equal(f, extract_features(model, fovset))

    assert isinstance(infer(model, fovset), MisalignmentOffset)
    try:
        extract_features(model, fovset[:4])
    except InvalidInputError:
        pass
    else:
        raise AssertionError("four-field capture accepted")


def test_denormalization():
    assert denormalize_offset((1.0, -0.5), 30.0) == MisalignmentOffset(30.0, -15.0)

    torch.manual_seed(0)
    model = build_aligner(SMALL, 32, 30.0)
    last = model.predictor.net[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.tensor([1.0, -0.5]))
    offset = predict_offset(model, np.zeros(8))
    assert abs(offset.dx - 30.0) < 1e-5 and abs(offset.dy + 15.0) < 1e-5

    with torch.no_grad():
        last.bias.zero_()
    assert predict_offset(model, np.ones(8)) == MisalignmentOffset(0.0, 0.0)


# ----------------------------------------------------------------- training

def test_paired_sampler_checks_alignment():
    src, s2t = _pair()
    sampler = PairedBatchSampler(src, s2t, 4, 0)
    assert sampler.batches_per_epoch == 2
    seen = set()
    for _ in range(2):
        seen.update(int(i) for i in sampler.next_batch())
    assert len(seen) == 8

    other = build_source_dataset(source_clean_domain(32), 1, TINY, 4, workers=1)
    try:
        PairedBatchSampler(other, s2t, 4, 0)
    except InvalidInputError:
        return
    raise AssertionError("unpaired datasets accepted")


def test_train_da3_short_run():
    src, s2t = _pair()
    with tempfile.TemporaryDirectory() as tmp:
        metrics = os.path.join(tmp, "train_metrics.jsonl")
        model, history = train_da3(src, s2t, SMALL, DegradationSpec(), metrics_path=metrics)
        assert not model.training
        assert [h["iteration"] for h in history] == [0, 1, 2]
        for entry in history:
            for key in ("l_reg", "l_pix", "l_adv_E", "l_adv_D", "lr"):
                assert math.isfinite(entry[key])
            assert entry["l_adv_D"] > 0
        assert os.path.getsize(metrics) > 0
        assert model.arch.label_scale == 2.0


def test_train_da3_reduces_to_supervised_regression():
    src, s2t = _pair()
    cfg = AlignerTrainConfig(iterations=2, batch_size=4, width=4, feature_dim=8, dropout=0.0,
                             lambda_adv=0.0, lambda_pix=0.0, rng_seed=2, log_every=1)
    _, history = train_da3(src, s2t, cfg, DegradationSpec.disabled())
    assert all(h["l_adv_D"] == 0.0 and h["l_adv_E"] == 0.0 for h in history)

    _, plain = train_da3(src, None, cfg, DegradationSpec.disabled())
    assert all(h["l_pix"] == 0.0 for h in plain)


def test_training_is_seeded():
    src, s2t = _pair()
    a, _ = train_da3(src, s2t, SMALL, DegradationSpec())
    b, _ = train_da3(src, s2t, SMALL, DegradationSpec())
    images = src.stacked_images()
    assert np.array_equal(a.predict_offsets(images), b.predict_offsets(images))


def test_aligner_config_validation():
    for bad in (AlignerTrainConfig(batch_size=1), AlignerTrainConfig(lambda_adv=-1.0),
                AlignerTrainConfig(dropout=1.0)):
        try:
            bad.validate()
        except InvalidInputError:
            continue
        raise AssertionError(f"{bad} accepted")


def test_aligner_checkpoint_round_trip():
    src, s2t = _pair()
    model, _ = train_da3(src, s2t, SMALL, DegradationSpec())
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "aligner.ckpt")
        save_aligner(path, model, SMALL, SMALL.iterations)
        back = load_aligner(path)
        assert back.arch == model.arch
        images = src.stacked_images()
        assert np.allclose(back.predict_offsets(images), model.predict_offsets(images))


def _brightness_coded(range_um=2.0, side=32):
    """Source set whose first two fields brighten with dx and dy over a fixed texture"""
    sampling = SamplingConfig(range_um=range_um, step_um=1.0, n_random=0, prealign=False)
    texture = np.random.default_rng(0).uniform(-0.1, 0.1, size=(NUM_FOVS, side, side))
    samples = []
    for i, p in enumerate(sampling.grid()):
        images = np.full((NUM_FOVS, side, side), 0.5) + texture
        images[0] += 0.2 * p.dx / range_um
        images[1] += 0.2 * p.dy / range_um
        samples.append(Sample(i, p, np.clip(images, 0, 1).astype(np.float32), i))
    return Dataset(role="source", domain=source_clean_domain(side), lenses=[LensRecord(LensInstance.ideal(), samples)],
                   sampling=sampling, dataset_seed=0)


def _rescaled(src, factor, range_um):
    records = []
    for rec in src.lenses:
        samples = [Sample(s.sample_id, MisalignmentOffset(s.label.dx * factor, s.label.dy * factor), s.images,
                          s.rng_seed) for s in rec.samples]
        records.append(LensRecord(lens=rec.lens, samples=samples, origin=rec.origin))
    sampling = dataclasses.replace(src.sampling, range_um=range_um, step_um=range_um)
    return Dataset(role="source", domain=src.domain, lenses=records, sampling=sampling,
                   dataset_seed=src.dataset_seed)


def test_objective_gradients_reach_extractor_parameters():
    torch.manual_seed(0)
    model = build_aligner(SMALL, 16, 2.0).double().eval()
    x = torch.rand(4, NUM_FOVS, 16, 16, dtype=torch.float64)
    y = torch.randn(2, 2, dtype=torch.float64)
    stem = model.extractor.stem[0].weight.detach().clone().requires_grad_(True)
    project = model.extractor.project.weight.detach().clone().requires_grad_(True)

    def objective(stem_weight, project_weight):
        f = functional_call(model.extractor, {"stem.0.weight": stem_weight, "project.weight": project_weight}, (x,))
        return da3_objective(model, f, 2, y, 0.05, 1.0)[0]

    assert torch.autograd.gradcheck(objective, (stem, project), eps=1e-6, atol=1e-5)


def test_train_da3_fits_brightness_coded_offsets():
    src = _brightness_coded()
    s2t = translate_dataset(IdentityGenerator(), src)
    cfg = AlignerTrainConfig(iterations=300, batch_size=8, width=8, feature_dim=16, dropout=0.0,
                             lambda_adv=0.1, lr_decay_epochs=10000, rng_seed=4, log_every=1)
    untrained, _ = train_da3(src, s2t, dataclasses.replace(cfg, iterations=0), DegradationSpec.disabled())
    model, history = train_da3(src, s2t, cfg, DegradationSpec.disabled())

    images = src.stacked_images()
    target = src.stacked_labels()
    initial = float(((untrained.predict_offsets(images) - target) ** 2).mean())
    final = float(((model.predict_offsets(images) - target) ** 2).mean())
    assert final < 0.2 * initial, (initial, final)

    l_reg = [h["l_reg"] for h in history]
    assert np.mean(l_reg[-10:]) < np.mean(l_reg[:3])


def test_predictions_follow_label_scale():
    src, _ = _pair()
    narrow = _rescaled(src, 7.5, 15.0)
    wide = _rescaled(src, 15.0, 30.0)
    m15, _ = train_da3(narrow, None, SMALL, DegradationSpec())
    m30, _ = train_da3(wide, None, SMALL, DegradationSpec())
    assert m15.arch.label_scale == 15.0 and m30.arch.label_scale == 30.0

    images = src.stacked_images()
    assert np.allclose(m30.predict_offsets(images), 2.0 * m15.predict_offsets(images), rtol=1e-5, atol=1e-6)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
    print("All aligner tests passed")
