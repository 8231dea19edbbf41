"""
Domain-adaptive misalignment regressor.

The aligner is three networks trained together: a feature extractor E over the
channel-stacked 5-field image set, an offset predictor P and a domain
classifier D. Each iteration first updates D to tell source features from
pseudo-target features, then updates E and P on

    L_total = L_reg + lambda_pix * L_pix + lambda_adv * L_adv_E

with D frozen. Stochastic degradations are applied to every training image.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import StepLR

from ..core.errors import InvalidInputError
from ..core.imports import CV2_AVAILABLE, FEATURE_DIM, NUM_FOVS, cv2, tqdm
from ..core.seeding import derive_seed
from ..simulation.optics_sim import FovImageSet, MisalignmentOffset
from .checkpoint import load_checkpoint, save_checkpoint
from .history import MetricsWriter, check_finite
from .networks import CompactBackbone, MlpHead, resnet18_backbone

logger = logging.getLogger(__name__)

DEGRADATION_TYPES = ("jpeg", "gaussian_blur", "gaussian_noise", "random_mask")
PROB_EPS = 1e-7


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class DegradationSpec:
    enabled_types: Tuple[str, ...] = ("gaussian_blur",)
    jpeg_q_range: Tuple[float, float] = (0.4, 0.7)
    blur_kernel_choices: Tuple[int, ...] = (3, 5, 7)
    blur_sigma_range: Tuple[float, float] = (0.5, 2.0)
    noise_sigma_range: Tuple[float, float] = (0.02, 0.08)
    mask_ratio_range: Tuple[float, float] = (0.05, 0.20)
    apply_probability: float = 0.5

    def validate(self):
        unknown = set(self.enabled_types) - set(DEGRADATION_TYPES)
        if unknown:
            raise InvalidInputError(f"unknown degradation types {sorted(unknown)}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise InvalidInputError("apply_probability must lie in [0, 1]")
        if self.apply_probability > 0 and not self.enabled_types:
            raise InvalidInputError("apply_probability > 0 needs at least one enabled degradation type")
        bounds = {
            "jpeg_q_range": (self.jpeg_q_range, 0.0, 1.0),
            "blur_sigma_range": (self.blur_sigma_range, 0.0, math.inf),
            "noise_sigma_range": (self.noise_sigma_range, 0.0, 1.0),
            "mask_ratio_range": (self.mask_ratio_range, 0.0, 1.0),
        }
        for name, ((lo, hi), floor, ceil) in bounds.items():
            if not floor <= lo <= hi <= ceil:
                raise InvalidInputError(f"{name} ({lo}, {hi}) must be ordered within [{floor}, {ceil}]")
        if not self.blur_kernel_choices or any(k < 1 or k % 2 == 0 for k in self.blur_kernel_choices):
            raise InvalidInputError("blur kernel sizes must be odd and positive")
        if "jpeg" in self.enabled_types and not CV2_AVAILABLE:
            raise InvalidInputError("jpeg degradation needs opencv installed")
        return self

    @classmethod
    def disabled(cls):
        return cls(enabled_types=(), apply_probability=0.0)

    @classmethod
    def only(cls, kind, apply_probability=0.5):
        return cls(enabled_types=(kind,), apply_probability=apply_probability)


def draw_degradation(spec, rng):
    """Pick (type, parameters) or None when the image is left untouched"""
    if spec.apply_probability <= 0 or rng.random() >= spec.apply_probability:
        return None
    kind = spec.enabled_types[int(rng.integers(len(spec.enabled_types)))]
    if kind == "jpeg":
        params = {"quality": int(round(rng.uniform(*spec.jpeg_q_range) * 100))}
    elif kind == "gaussian_blur":
        params = {
            "kernel": int(spec.blur_kernel_choices[int(rng.integers(len(spec.blur_kernel_choices)))]),
            "sigma": float(rng.uniform(*spec.blur_sigma_range)),
        }
    elif kind == "gaussian_noise":
        params = {"sigma": float(rng.uniform(*spec.noise_sigma_range))}
    else:
        params = {"ratio": float(rng.uniform(*spec.mask_ratio_range))}
    return kind, params


def apply_random_mask(img, ratio, rng):
    """Zero exactly round(ratio * area) pixels in one compact block"""
    h_img, w_img = img.shape
    count = int(round(ratio * h_img * w_img))
    out = img.copy()
    if count <= 0:
        return out

    h = min(h_img, max(1, int(round(math.sqrt(count)))))
    w, rem = divmod(count, h)
    if w + (rem > 0) > w_img:
        h = h_img
        w, rem = divmod(count, h)
    extra = 1 if rem else 0

    top = int(rng.integers(0, h_img - h + 1))
    left = int(rng.integers(0, w_img - w - extra + 1))
    out[top:top + h, left:left + w] = 0.0
    if rem:
        out[top:top + rem, left + w] = 0.0
    return out


def _jpeg(img, quality):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    ok, buf = cv2.imencode(".jpg", arr, [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise InvalidInputError("JPEG encoding failed")
    return cv2.imdecode(buf, cv2.IMREAD_GRAYSCALE).astype(np.float32) / 255.0


def apply_degradation(img, kind, params, rng):
    if kind == "jpeg":
        return _jpeg(img, params["quality"])
    if kind == "gaussian_blur":
        k = params["kernel"]
        return cv2.GaussianBlur(img.astype(np.float32), (k, k), params["sigma"], borderType=cv2.BORDER_REFLECT)
    if kind == "gaussian_noise":
        noisy = img + rng.normal(0.0, params["sigma"], size=img.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)
    if kind == "random_mask":
        return apply_random_mask(img, params["ratio"], rng)
    raise InvalidInputError(f"unknown degradation type {kind!r}")


def augment(img, spec, rng_seed):
    """d~ = A(d; tau, theta) for a single image in [0, 1]"""
    arr = np.asarray(img, dtype=np.float32)
    rng = np.random.default_rng(rng_seed)
    drawn = draw_degradation(spec, rng)
    if drawn is None:
        return arr.copy()
    return apply_degradation(arr, *drawn, rng)


def augment_fovset(images, spec, rng_seed):
    """One (tau, theta) draw applied to all five fields of a capture"""
    images = np.asarray(images, dtype=np.float32)
    rng = np.random.default_rng(rng_seed)
    drawn = draw_degradation(spec, rng)
    if drawn is None:
        return images.copy()
    return np.stack([
        apply_degradation(img, *drawn, np.random.default_rng(derive_seed(rng_seed, i)))
        for i, img in enumerate(images)
    ])


# -------------------------------------------------------------------- model

@dataclass(frozen=True)
class AlignerArchitecture:
    backbone: str = "compact"
    width: int = 64
    feature_dim: int = FEATURE_DIM
    image_side: int = 48
    label_scale: float = 15.0
    dropout: float = 0.5


class AlignerModel(nn.Module):
    """Extractor E, predictor P (2 outputs) and domain classifier D (1 logit)"""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        if arch.backbone == "compact":
            self.extractor = CompactBackbone(NUM_FOVS, arch.width, arch.feature_dim)
        elif arch.backbone == "resnet18":
            if arch.feature_dim != 512:
                raise InvalidInputError("the resnet18 backbone emits 512 features")
            self.extractor = resnet18_backbone(NUM_FOVS)
        else:
            raise InvalidInputError(f"unknown backbone {arch.backbone!r}")
        self.predictor = MlpHead(arch.feature_dim, 2, dropout=arch.dropout)
        self.domain_classifier = MlpHead(arch.feature_dim, 1, dropout=arch.dropout)

    def check_input(self, x):
        side = self.arch.image_side
        if x.dim() != 4 or x.shape[1] != NUM_FOVS:
            raise InvalidInputError(f"expected (B, {NUM_FOVS}, H, W) field stacks, got {tuple(x.shape)}")
        if x.shape[-2:] != (side, side):
            raise InvalidInputError(f"expected {side}x{side} images, got {tuple(x.shape[-2:])}")

    def features(self, x):
        self.check_input(x)
        return self.extractor(x)

    def forward(self, x):
        f = self.features(x)
        return self.predictor(f), f

    def predict_offsets(self, images, batch_size=128):
        """(N, 5, H, W) images -> (N, 2) offsets in micrometers"""
        images = np.asarray(images, dtype=np.float32)
        param = next(self.parameters())
        self.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                batch = torch.from_numpy(images[start:start + batch_size]).to(param.device, param.dtype)
                out.append(self(batch)[0].double().cpu().numpy())
        return np.concatenate(out) * self.arch.label_scale


def build_aligner(cfg, image_side, label_scale):
    arch = AlignerArchitecture(
        backbone=cfg.backbone,
        width=cfg.width,
        feature_dim=cfg.feature_dim,
        image_side=image_side,
        label_scale=float(label_scale),
        dropout=cfg.dropout,
    )
    return AlignerModel(arch)


def _fovset_tensor(model, fovset):
    images = fovset.images if isinstance(fovset, FovImageSet) else np.asarray(fovset)
    if images.ndim != 3 or images.shape[0] != NUM_FOVS:
        raise InvalidInputError(f"expected {NUM_FOVS} field images, got shape {images.shape}")
    param = next(model.parameters())
    return torch.from_numpy(np.asarray(images, dtype=np.float32)[None]).to(param.device, param.dtype)


def extract_features(model, fovset):
    """f = E(d) as a numpy vector, evaluated in eval mode"""
    model.eval()
    with torch.no_grad():
        return model.features(_fovset_tensor(model, fovset))[0].double().cpu().numpy()


def denormalize_offset(normalized, label_scale):
    dx, dy = (float(v) * label_scale for v in normalized)
    return MisalignmentOffset(dx, dy)


def predict_offset(model, features):
    f = np.asarray(features, dtype=np.float64)
    if f.shape != (model.arch.feature_dim,):
        raise InvalidInputError(f"expected a {model.arch.feature_dim}-vector, got shape {f.shape}")
    param = next(model.parameters())
    model.eval()
    with torch.no_grad():
        out = model.predictor(torch.from_numpy(f[None]).to(param.device, param.dtype))[0]
    return denormalize_offset(out.cpu().numpy(), model.arch.label_scale)


def infer(model, fovset):
    return predict_offset(model, extract_features(model, fovset))


# ------------------------------------------------------------------- losses

def _probabilities(logits):
    return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


def pixel_consistency_loss(f_src, f_s2t):
    return F.l1_loss(f_src, f_s2t)


def domain_disc_loss(d_logits_src, d_logits_s2t):
    """Source features labeled 1, pseudo-target features labeled 0"""
    p_src = _probabilities(d_logits_src)
    p_s2t = _probabilities(d_logits_s2t)
    return -torch.log(p_src).mean() - torch.log(1.0 - p_s2t).mean()


def feature_adv_loss(d_logits_src, d_logits_s2t):
    """Minimized when D outputs 0.5 on both domains"""
    p_src = _probabilities(d_logits_src)
    p_s2t = _probabilities(d_logits_s2t)
    return -0.5 * torch.log(p_src * (1.0 - p_src)).mean() - 0.5 * torch.log(p_s2t * (1.0 - p_s2t)).mean()


def regression_loss(pred_src, pred_s2t, label):
    loss = F.mse_loss(pred_src, label)
    if pred_s2t is not None:
        loss = loss + F.mse_loss(pred_s2t, label)
    return loss


def total_objective(l_reg, l_pix, l_adv_e, lambda_pix, lambda_adv):
    return l_reg + lambda_pix * l_pix + lambda_adv * l_adv_e


def da3_objective(model, f, n_src, y, lambda_pix, lambda_adv):
    """E/P objective from features of a stacked [source; pseudo-target] batch.

    With no pseudo-target rows (`n_src == len(f)`) it is plain regression.
    Returns (total, terms).
    """
    pred = model.predictor(f)
    if n_src == f.shape[0]:
        l_reg = regression_loss(pred, None, y)
        zero = l_reg.new_zeros(())
        return l_reg, {"l_reg": l_reg, "l_pix": zero, "l_adv_E": zero}

    f_src, f_s2t = f[:n_src], f[n_src:]
    l_reg = regression_loss(pred[:n_src], pred[n_src:], y)
    l_pix = pixel_consistency_loss(f_src, f_s2t)
    if lambda_adv > 0:
        logits = model.domain_classifier(f)
        l_adv_e = feature_adv_loss(logits[:n_src], logits[n_src:])
    else:
        l_adv_e = l_reg.new_zeros(())
    total = total_objective(l_reg, l_pix, l_adv_e, lambda_pix, lambda_adv)
    return total, {"l_reg": l_reg, "l_pix": l_pix, "l_adv_E": l_adv_e}


def da3_losses(model, x_src, x_s2t, y, lambda_pix, lambda_adv):
    x = x_src if x_s2t is None else torch.cat([x_src, x_s2t])
    return da3_objective(model, model.features(x), x_src.shape[0], y, lambda_pix, lambda_adv)


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class AlignerTrainConfig:
    iterations: int = 45000
    batch_size: int = 64
    lr_extractor_predictor: float = 1e-3
    lr_domain_classifier: float = 1e-4
    lambda_adv: float = 1.0
    lambda_pix: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_epochs: int = 20
    label_scale: float = 0.0
    backbone: str = "compact"
    width: int = 64
    feature_dim: int = FEATURE_DIM
    dropout: float = 0.5
    shared_augmentation: bool = False
    rng_seed: int = 0
    log_every: int = 500

    def validate(self):
        if self.iterations < 0:
            raise InvalidInputError("aligner.iterations must be >= 0")
        if self.batch_size < 2:
            raise InvalidInputError("aligner.batch_size must be >= 2 (batch normalization)")
        if not (self.lr_extractor_predictor > 0 and self.lr_domain_classifier > 0):
            raise InvalidInputError("aligner learning rates must be positive")
        if self.lambda_adv < 0 or self.lambda_pix < 0:
            raise InvalidInputError("aligner lambdas must be >= 0")
        if not 0 < self.lr_decay_factor <= 1 or self.lr_decay_epochs < 1:
            raise InvalidInputError("aligner lr decay needs a factor in (0, 1] and >= 1 epoch")
        if self.label_scale < 0:
            raise InvalidInputError("aligner.label_scale must be >= 0 (0 uses the sampling range)")
        if not 0 <= self.dropout < 1:
            raise InvalidInputError("aligner.dropout must lie in [0, 1)")
        if self.feature_dim < 1 or self.width < 1 or self.log_every < 1:
            raise InvalidInputError("aligner.feature_dim, width and log_every must be positive")
        return self

    def resolved_label_scale(self, sampling):
        return self.label_scale if self.label_scale > 0 else float(sampling.range_um)


class PairedBatchSampler:
    """Epoch-wise shuffled index batches over label-aligned source / pseudo-target datasets"""

    def __init__(self, src, s2t, batch_size, rng_seed):
        self.keys = src.sample_keys()
        self.labels = src.stacked_labels()
        self.s2t_keys = None
        self.s2t_labels = None
        if s2t is not None:
            self.s2t_keys = s2t.sample_keys()
            self.s2t_labels = s2t.stacked_labels()
            if self.s2t_keys != self.keys or not np.array_equal(self.s2t_labels, self.labels):
                raise InvalidInputError("source and pseudo-target datasets are not label-aligned")
        self.n = len(self.keys)
        if self.n < 2:
            raise InvalidInputError("need at least two training samples")
        self.batch_size = min(batch_size, self.n)
        self.rng = np.random.default_rng(rng_seed)
        self.order = self.rng.permutation(self.n)
        self.cursor = 0

    @property
    def batches_per_epoch(self):
        return max(1, self.n // self.batch_size)

    def next_batch(self):
        if self.cursor + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        if self.s2t_keys is not None:
            for i in idx:
                assert self.keys[i] == self.s2t_keys[i], f"unpaired sample {self.keys[i]} / {self.s2t_keys[i]}"
                assert np.array_equal(self.labels[i], self.s2t_labels[i]), f"label mismatch at {self.keys[i]}"
        return idx


def _augment_batch(images, deg, seeds):
    if deg.apply_probability <= 0:
        return images
    return np.stack([augment_fovset(img, deg, seed) for img, seed in zip(images, seeds)])


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def train_da3(src, s2t, cfg, deg, device="cpu", metrics_path=None):
    """Train the aligner; `s2t=None` gives plain supervised regression on `src`.

    Returns (model, history).
    """
    cfg.validate()
    deg.validate()
    if not src.labeled:
        raise InvalidInputError("aligner training needs a labeled source dataset")
    if s2t is not None and s2t.domain.image_side != src.domain.image_side:
        raise InvalidInputError("source and pseudo-target images must share one side length")

    torch.manual_seed(cfg.rng_seed)
    label_scale = cfg.resolved_label_scale(src.sampling)
    model = build_aligner(cfg, src.domain.image_side, label_scale).to(device)

    sampler = PairedBatchSampler(src, s2t, cfg.batch_size, derive_seed(cfg.rng_seed, 1))
    src_images = src.stacked_images()
    s2t_images = s2t.stacked_images() if s2t is not None else None
    labels = torch.from_numpy(sampler.labels / label_scale).float()

    ep_params = list(model.extractor.parameters()) + list(model.predictor.parameters())
    opt_ep = torch.optim.Adam(ep_params, lr=cfg.lr_extractor_predictor)
    opt_d = torch.optim.Adam(model.domain_classifier.parameters(), lr=cfg.lr_domain_classifier)
    decay_every = cfg.lr_decay_epochs * sampler.batches_per_epoch
    sched_ep = StepLR(opt_ep, step_size=decay_every, gamma=cfg.lr_decay_factor)
    sched_d = StepLR(opt_d, step_size=decay_every, gamma=cfg.lr_decay_factor)
    adversarial = s2t is not None and cfg.lambda_adv > 0

    history = []
    writer = MetricsWriter(metrics_path)
    logger.info("Training aligner (%s backbone) for %d iterations on %d pairs, %s",
                cfg.backbone, cfg.iterations, sampler.n, "with pseudo-target" if s2t is not None else "source only")

    try:
        for it in tqdm(range(cfg.iterations), desc="aligner", leave=False):
            model.train()
            idx = sampler.next_batch()
            src_seeds = [derive_seed(cfg.rng_seed, it, int(i), 0) for i in idx]
            x_src = torch.from_numpy(_augment_batch(src_images[idx], deg, src_seeds)).to(device)
            x_s2t = None
            if s2t_images is not None:
                s2t_seeds = src_seeds if cfg.shared_augmentation else [
                    derive_seed(cfg.rng_seed, it, int(i), 1) for i in idx
                ]
                x_s2t = torch.from_numpy(_augment_batch(s2t_images[idx], deg, s2t_seeds)).to(device)
            y = labels[idx].to(device)
            n_src = x_src.shape[0]
            f = model.features(x_src if x_s2t is None else torch.cat([x_src, x_s2t]))

            # Step 1: domain classifier on detached features
            l_adv_d = 0.0
            if adversarial:
                logits = model.domain_classifier(f.detach())
                loss_d = domain_disc_loss(logits[:n_src], logits[n_src:])
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                l_adv_d = float(loss_d)

            # Step 2: extractor and predictor with the classifier frozen
            _set_requires_grad(model.domain_classifier, False)
            total, terms = da3_objective(model, f, n_src, y, cfg.lambda_pix, cfg.lambda_adv)
            opt_ep.zero_grad()
            total.backward()
            opt_ep.step()
            _set_requires_grad(model.domain_classifier, True)

            values = {k: float(v) for k, v in terms.items()}
            values["l_adv_D"] = l_adv_d
            check_finite("aligner training", it, **values)
            lr = opt_ep.param_groups[0]["lr"]
            sched_ep.step()
            sched_d.step()

            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                entry = dict(iteration=it, lr=lr, **values)
                history.append(entry)
                writer.write(entry)
                logger.info("aligner it=%d reg=%.5f pix=%.5f advE=%.4f advD=%.4f lr=%.2e",
                            it, values["l_reg"], values["l_pix"], values["l_adv_E"], l_adv_d, lr)
    finally:
        writer.close()

    return model.eval(), history


def save_aligner(path, model, cfg, iterations, extra=None):
    return save_checkpoint(path, model, "aligner", {"architecture": model.arch, "train": cfg}, iterations, extra)


def load_aligner(path, device="cpu"):
    header, state = load_checkpoint(path, expected_kind="aligner")
    arch_cfg = dict(header["config"]["architecture"])
    model = AlignerModel(AlignerArchitecture(**arch_cfg))
    model.load_state_dict(state)
    return model.to(device).eval()
