"""
Network building blocks for the style generator, the style discriminator and the aligner
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import spectral_norm

from ..core.errors import InvalidInputError
from ..core.imports import NUM_FOVS, TORCHVISION_AVAILABLE, torchvision


class ResBlock(nn.Module):
    """Pre-activation residual block with GroupNorm (batch-size independent)"""

    def __init__(self, channels):
        super().__init__()
        groups = min(8, channels)
        self.body = nn.Sequential(
            nn.GroupNorm(groups, channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(groups, channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class VectorQuantizer(nn.Module):
    """Learned codebook; every bottleneck vector snaps to its nearest code"""

    def __init__(self, num_embeddings=256, embedding_dim=64, commitment_weight=0.25):
        super().__init__()
        self.commitment_weight = commitment_weight
        self.embedding = nn.Embedding(num_embeddings, embedding_dim)
        self.embedding.weight.data.uniform_(-1 / num_embeddings, 1 / num_embeddings)

    def nearest_codes(self, flat):
        # flat: (N, D)
        distances = (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ self.embedding.weight.t()
            + self.embedding.weight.pow(2).sum(1)
        )
        return distances.argmin(dim=1)

    def forward(self, z):
        b, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        indices = self.nearest_codes(flat)
        z_q = self.embedding(indices).view(b, h, w, d).permute(0, 3, 1, 2)

        vq_loss = F.mse_loss(z_q, z.detach()) + self.commitment_weight * F.mse_loss(z, z_q.detach())
        # Straight-through estimator
        z_q = z + (z_q - z).detach()
        return z_q, vq_loss, indices.view(b, h, w)


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "vq"
    image_side: int = 48
    codebook_size: int = 256
    code_dim: int = 64
    base_channels: int = 32
    commitment_weight: float = 0.25


def _pad_to_multiple(x, multiple=4):
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))
    return x, h, w


class GeneratorModel(nn.Module):
    """Base class: maps (B, 1, H, W) images in [0, 1] to restyled images of the same shape"""

    def __init__(self, config):
        super().__init__()
        self.config = config

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-1] != self.config.image_side or x.shape[-2] != self.config.image_side:
            raise InvalidInputError(
                f"generator expects (B, 1, {self.config.image_side}, {self.config.image_side}), got {tuple(x.shape)}"
            )


class VQGenerator(GeneratorModel):
    """U-Net with a quantized bottleneck; predicts a residual on top of the input"""

    def __init__(self, config):
        super().__init__(config)
        c = config.base_channels
        self.enc1 = nn.Sequential(nn.Conv2d(1, c, 3, padding=1), ResBlock(c))
        self.down1 = nn.Sequential(nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), ResBlock(2 * c))
        self.down2 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1), ResBlock(4 * c))
        self.pre_quant = nn.Conv2d(4 * c, config.code_dim, 1)
        self.quantizer = VectorQuantizer(config.codebook_size, config.code_dim, config.commitment_weight)
        self.post_quant = nn.Sequential(nn.Conv2d(config.code_dim, 4 * c, 1), ResBlock(4 * c))
        self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, 4, stride=2, padding=1)
        self.merge2 = nn.Sequential(nn.Conv2d(4 * c, 2 * c, 3, padding=1), ResBlock(2 * c))
        self.up1 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.merge1 = nn.Sequential(nn.Conv2d(2 * c, c, 3, padding=1), ResBlock(c))
        self.head = nn.Sequential(nn.GroupNorm(min(8, c), c), nn.SiLU(), nn.Conv2d(c, 1, 3, padding=1))

    def encode(self, x):
        padded, h, w = _pad_to_multiple(x)
        s1 = self.enc1(padded)
        s2 = self.down1(s1)
        z = self.pre_quant(self.down2(s2))
        return z, (s1, s2), (h, w)

    def forward(self, x):
        self.check_input(x)
        z, (s1, s2), (h, w) = self.encode(x)
        z_q, vq_loss, codes = self.quantizer(z)
        y = self.post_quant(z_q)
        y = self.merge2(torch.cat([self.up2(y), s2], dim=1))
        y = self.merge1(torch.cat([self.up1(y), s1], dim=1))
        residual = self.head(y)[..., :h, :w]
        return torch.clamp(x + residual, 0.0, 1.0), vq_loss, codes


class CycleGenerator(GeneratorModel):
    """Codebook-free encoder/residual/decoder generator used for the CycleGAN-style ablation"""

    def __init__(self, config, n_blocks=4):
        super().__init__(config)
        c = config.base_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            *[ResBlock(4 * c) for _ in range(n_blocks)],
            nn.ConvTranspose2d(4 * c, 2 * c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 1, 3, padding=1),
        )

    def forward(self, x):
        self.check_input(x)
        padded, h, w = _pad_to_multiple(x)
        residual = self.net(padded)[..., :h, :w]
        return torch.clamp(x + residual, 0.0, 1.0), x.new_zeros(()), None


def build_generator(config):
    if config.kind == "vq":
        return VQGenerator(config)
    if config.kind == "cycle":
        return CycleGenerator(config)
    raise InvalidInputError(f"unknown generator kind {config.kind!r}")


class StyleDiscriminator(nn.Module):
    """Spectral-normalized patch critic; patch scores are averaged to one score per image"""

    def __init__(self, channels=32):
        super().__init__()
        c = channels
        self.conv = nn.Sequential(
            spectral_norm(nn.Conv2d(1, c, 4, 2, 1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(c, 2 * c, 4, 2, 1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(2 * c, 4 * c, 3, 1, 1)),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.conv(x).mean(dim=(1, 2, 3))


# ------------------------------------------------------------------ aligner

class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


class CompactBackbone(nn.Module):
    """Four residual stages over the channel-stacked field images"""

    def __init__(self, in_channels=NUM_FOVS, width=64, feature_dim=512):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(in_channels, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        self.blocks = nn.Sequential(
            BasicBlock(w, w),
            BasicBlock(w, 2 * w, stride=2),
            BasicBlock(2 * w, 4 * w, stride=2),
            BasicBlock(4 * w, 8 * w, stride=2),
        )
        self.project = nn.Identity() if 8 * w == feature_dim else nn.Linear(8 * w, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x):
        y = self.blocks(self.stem(x))
        y = F.adaptive_avg_pool2d(y, 1).flatten(1)
        return self.project(y)


def resnet18_backbone(in_channels=NUM_FOVS):
    if not TORCHVISION_AVAILABLE:
        raise InvalidInputError("backbone 'resnet18' needs torchvision installed")
    net = torchvision.models.resnet18(weights=None)
    net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    net.feature_dim = 512
    return net


class MlpHead(nn.Module):
    def __init__(self, in_dim, out_dim, hidden=128, dropout=0.5):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)
