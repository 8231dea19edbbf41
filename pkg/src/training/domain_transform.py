"""
Domain transformation: restyle source captures into the target imaging style.

A generator G is trained on unpaired source and target field images. It must
reconstruct both (content preservation) while a least-squares style critic
pulls its outputs toward the target style. The trained G then translates the
labeled source dataset into a labeled pseudo-target dataset.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..core.errors import InvalidInputError
from ..core.imports import tqdm
from ..simulation.dataset import Dataset, LensRecord, Sample
from .checkpoint import load_checkpoint, save_checkpoint, state_fingerprint
from .history import MetricsWriter, check_finite
from .networks import GeneratorConfig, StyleDiscriminator, build_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransformTrainConfig:
    iterations: int = 20000
    batch_size: int = 16
    learning_rate: float = 1e-4
    recon_weight: float = 1.0
    adv_weight: float = 1.0
    commitment_weight: float = 0.25
    codebook_size: int = 256
    code_dim: int = 64
    base_channels: int = 32
    disc_channels: int = 32
    generator_type: str = "vq"
    cycle_weight: float = 10.0
    rng_seed: int = 0
    log_every: int = 200

    def validate(self):
        if self.iterations < 0:
            raise InvalidInputError("transform.iterations must be >= 0")
        for name in ("batch_size", "learning_rate", "recon_weight", "adv_weight", "commitment_weight",
                     "codebook_size", "code_dim", "base_channels", "disc_channels", "cycle_weight", "log_every"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"transform.{name} must be positive")
        if self.generator_type not in ("vq", "cycle"):
            raise InvalidInputError("transform.generator_type must be 'vq' or 'cycle'")
        return self

    def generator_config(self, image_side):
        return GeneratorConfig(
            kind=self.generator_type,
            image_side=image_side,
            codebook_size=self.codebook_size,
            code_dim=self.code_dim,
            base_channels=self.base_channels,
            commitment_weight=self.commitment_weight,
        )


# --------------------------------------------------------------------- losses


def recon_loss(g_out_src, d_src, g_out_trg, d_trg):
    """Mean L1 of each reconstruction pair, summed over the two domains"""
    return F.l1_loss(g_out_src, d_src) + F.l1_loss(g_out_trg, d_trg)


def gen_style_loss(d, g_src, g_trg):
    """Least-squares generator objective: both translated batches should score 1"""
    return ((d(g_src) - 1.0) ** 2).mean() + ((d(g_trg) - 1.0) ** 2).mean()


def disc_style_loss(d, g_src, g_trg, real_trg):
    """Least-squares critic objective: generated scores 0, real target scores 1"""
    return (d(g_src) ** 2).mean() + (d(g_trg) ** 2).mean() + ((d(real_trg) - 1.0) ** 2).mean()


# ------------------------------------------------------------------ inference


def _to_tensor(img, device):
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return torch.from_numpy(arr).to(device)


def _run_generator(g, batch):
    out = g(batch)
    return out[0] if isinstance(out, tuple) else out


def reconstruct(g, img):
    """Pass one image (H, W) through G in eval mode; returns an (H, W) numpy image"""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a single 2D image, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError("image values must lie in [0, 1]")
    device = next(g.parameters()).device
    g.eval()
    with torch.no_grad():
        out = _run_generator(g, _to_tensor(arr, device))
    return out[0, 0].cpu().numpy()


def code_usage(g, images):
    """Set of codebook indices selected for a batch of (N, H, W) images"""
    device = next(g.parameters()).device
    g.eval()
    with torch.no_grad():
        _, _, codes = g(_to_tensor(images, device))
    return set() if codes is None else set(codes.flatten().cpu().tolist())


def translate_images(g, images, batch_size=64):
    """Translate an (N, 5, H, W) stack field-by-field with the shared generator"""
    n, fovs, h, w = images.shape
    flat = images.reshape(n * fovs, h, w)
    first = next(g.parameters(), None)
    device = first.device if first is not None else torch.device("cpu")
    g.eval()
    out = np.empty_like(flat, dtype=np.float32)
    with torch.no_grad():
        for start in range(0, flat.shape[0], batch_size):
            batch = _to_tensor(flat[start:start + batch_size], device)
            out[start:start + batch_size] = _run_generator(g, batch)[:, 0].cpu().numpy()
    return out.reshape(n, fovs, h, w)


def translate_dataset(g, src, batch_size=64):
    """Labeled pseudo-target dataset: same lenses, same labels, every image replaced by G(image)"""
    if not src.labeled:
        raise InvalidInputError("translate_dataset needs a labeled source dataset")
    translated = translate_images(g, src.stacked_images(), batch_size)

    records = []
    cursor = 0
    for rec in tqdm(src.lenses, desc="translate", leave=False):
        samples = []
        for sample in rec.samples:
            samples.append(Sample(sample.sample_id, sample.label, translated[cursor], sample.rng_seed))
            cursor += 1
        records.append(LensRecord(lens=rec.lens, samples=samples, origin=rec.origin))

    generation = {"translated_from": src.config_hash, "generator": state_fingerprint(g)}
    logger.info("Translated %d samples into the pseudo-target domain", cursor)
    return Dataset(
        role="pseudo_target",
        domain=src.domain,
        lenses=records,
        sampling=src.sampling,
        dataset_seed=src.dataset_seed,
        generation=generation,
    )


# ------------------------------------------------------------------- training


def _field_stack(ds):
    images = ds.stacked_images()
    n, fovs, h, w = images.shape
    return torch.from_numpy(images.reshape(n * fovs, 1, h, w))


def train_transform(src, trg, cfg, device="cpu", metrics_path=None, return_critic=False):
    """Train G on unpaired source/target field images; returns (generator, history)

    With `return_critic` the trained style critic is returned as a third item.
    """
    cfg.validate()
    if not src.labeled:
        raise InvalidInputError("source dataset must be labeled")
    if trg.labeled:
        raise InvalidInputError("target dataset for the transform must be unlabeled")
    if src.domain.image_side != trg.domain.image_side:
        raise InvalidInputError("source and target images must share one side length")

    side = src.domain.image_side
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)

    g = build_generator(cfg.generator_config(side)).to(device)
    d = StyleDiscriminator(cfg.disc_channels).to(device)
    cycle = cfg.generator_type == "cycle"
    if cycle:
        g_back = build_generator(cfg.generator_config(side)).to(device)
        d_src = StyleDiscriminator(cfg.disc_channels).to(device)
        g_params = list(g.parameters()) + list(g_back.parameters())
        d_params = list(d.parameters()) + list(d_src.parameters())
    else:
        g_params = list(g.parameters())
        d_params = list(d.parameters())

    opt_g = torch.optim.Adam(g_params, lr=cfg.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d_params, lr=cfg.learning_rate, betas=(0.5, 0.999))

    src_fields = _field_stack(src)
    trg_fields = _field_stack(trg)
    history = []
    writer = MetricsWriter(metrics_path)
    logger.info("Training %s generator for %d iterations (%d source / %d target field images)",
                cfg.generator_type, cfg.iterations, len(src_fields), len(trg_fields))

    try:
        for it in tqdm(range(cfg.iterations), desc="transform", leave=False):
            g.train()
            # Unpaired: the two batches are drawn independently
            xs = src_fields[rng.integers(0, len(src_fields), cfg.batch_size)].to(device)
            xt = trg_fields[rng.integers(0, len(trg_fields), cfg.batch_size)].to(device)

            gs, vq_s, _ = g(xs)
            gt, vq_t, _ = g(xt)

            # Critic step
            if cycle:
                back_t, _, _ = g_back(xt)
                l_d = (d(gs.detach()) ** 2).mean() + ((d(xt) - 1.0) ** 2).mean() \
                    + (d_src(back_t.detach()) ** 2).mean() + ((d_src(xs) - 1.0) ** 2).mean()
            else:
                l_d = disc_style_loss(d, gs.detach(), gt.detach(), xt)
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()

            # Generator step
            if cycle:
                l_adv = ((d(gs) - 1.0) ** 2).mean() + ((d_src(back_t) - 1.0) ** 2).mean()
                l_rec = F.l1_loss(g_back(gs)[0], xs) + F.l1_loss(g(back_t)[0], xt)
                l_g = cfg.adv_weight * l_adv + cfg.cycle_weight * l_rec
                l_vq = torch.zeros(())
            else:
                l_rec = recon_loss(gs, xs, gt, xt)
                l_adv = gen_style_loss(d, gs, gt)
                l_vq = vq_s + vq_t
                l_g = cfg.recon_weight * l_rec + cfg.adv_weight * l_adv + l_vq

            terms = {"l_recon": float(l_rec), "l_gen_style": float(l_adv),
                     "l_disc_style": float(l_d), "l_vq": float(l_vq)}
            check_finite("generator training", it, **terms)

            opt_g.zero_grad()
            l_g.backward()
            opt_g.step()

            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                entry = dict(iteration=it, **terms)
                history.append(entry)
                writer.write(entry)
                logger.info("transform it=%d recon=%.4f gen=%.4f disc=%.4f",
                            it, terms["l_recon"], terms["l_gen_style"], terms["l_disc_style"])
    finally:
        writer.close()

    g.eval()
    if return_critic:
        return g, history, d.eval()
    return g, history


def style_scores(d, images, device="cpu"):
    """Mean critic score over an (N, H, W) image stack"""
    d.eval()
    with torch.no_grad():
        return float(d(_to_tensor(images, device)).mean())


def save_generator(path, g, cfg, iterations):
    return save_checkpoint(path, g, "generator", {"generator": g.config, "train": cfg}, iterations)


def load_generator(path, device="cpu"):
    header, state = load_checkpoint(path, expected_kind="generator")
    gen_cfg = header["config"]["generator"]
    g = build_generator(GeneratorConfig(**gen_cfg))
    g.load_state_dict(state)
    return g.to(device).eval()
