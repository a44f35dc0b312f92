"""Label-conditioned texture generator, patch discriminator with a domain
classification head, the GAN losses, and attribute-transfer inference."""

import dataclasses
import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import warp
from .dae import LossWeights  # re-exported: weights are shared across stages

__all__ = [
    "LossWeights", "GanConfig", "Generator", "Discriminator", "TdbModel",
    "image_batch", "texture_batch", "adversarial_losses", "cls_loss",
    "reconstruction_losses", "objective_d", "objective_g", "transfer_attributes",
]


class TaggedBatch(NamedTuple):
    """Marks what a tensor holds so the discriminator can reject textures."""
    kind: str  # "image" or "texture"
    tensor: torch.Tensor


def image_batch(tensor):
    return TaggedBatch("image", tensor)


def texture_batch(tensor):
    return TaggedBatch("texture", tensor)


@dataclasses.dataclass
class GanConfig:
    image_size: int = 32
    channels: int = 3
    n_labels: int = 2
    label_mode: str = "multi_binary"
    base_width: int = 32
    n_res_blocks: int = 3

    @property
    def n_disc_layers(self):
        # stride-2 stack ending at a 2x2 patch map (5 layers at 64px)
        return int(math.log2(self.image_size)) - 1


class ResidualBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, 1, 1),
            nn.InstanceNorm2d(width, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Texture + spatially replicated label channels -> new texture.

    Downsample twice, residual trunk, upsample twice; the output
    activation is 2*sigmoid so entries stay in (0, 2), matching the
    shading-times-albedo texture range.
    """

    def __init__(self, cfg: GanConfig = None):
        super().__init__()
        self.cfg = cfg or GanConfig()
        w = self.cfg.base_width
        layers = [
            nn.Conv2d(self.cfg.channels + self.cfg.n_labels, w, 7, 1, 3),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(),
        ]
        for _ in range(2):
            layers += [
                nn.Conv2d(w, w * 2, 4, 2, 1),
                nn.InstanceNorm2d(w * 2, affine=True),
                nn.ReLU(),
            ]
            w *= 2
        layers += [ResidualBlock(w) for _ in range(self.cfg.n_res_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(w, w // 2, 4, 2, 1),
                nn.InstanceNorm2d(w // 2, affine=True),
                nn.ReLU(),
            ]
            w //= 2
        layers += [nn.Conv2d(w, self.cfg.channels, 7, 1, 3)]
        self.net = nn.Sequential(*layers)

    def forward(self, texture, target):
        if target.shape[-1] != self.cfg.n_labels:
            raise ValueError(
                f"expected {self.cfg.n_labels} label entries, got {target.shape[-1]}"
            )
        b, _, h, w = texture.shape
        label_maps = target.reshape(b, -1, 1, 1).expand(b, target.shape[-1], h, w)
        x = torch.cat([texture, label_maps.to(texture.dtype)], dim=1)
        return 2.0 * torch.sigmoid(self.net(x))


class DiscriminatorOutput(NamedTuple):
    src_logits: torch.Tensor  # (B, 1, h', w') pre-sigmoid patch map
    cls_logits: torch.Tensor  # (B, k) pre-activation


class Discriminator(nn.Module):
    """PatchGAN source head plus a domain-classifier head.

    Only accepts TaggedBatch("image", ...): raw textures must be warped
    into image space before discrimination.
    """

    def __init__(self, cfg: GanConfig = None):
        super().__init__()
        self.cfg = cfg or GanConfig()
        layers = []
        cin = self.cfg.channels
        w = self.cfg.base_width
        for _ in range(self.cfg.n_disc_layers):
            layers += [nn.Conv2d(cin, w, 4, 2, 1), nn.LeakyReLU(0.01)]
            cin, w = w, min(w * 2, 512)
        self.trunk = nn.Sequential(*layers)
        patch = self.cfg.image_size // 2 ** self.cfg.n_disc_layers
        self.src_head = nn.Conv2d(cin, 1, 3, 1, 1)
        self.cls_head = nn.Conv2d(cin, self.cfg.n_labels, patch, 1, 0)

    def forward(self, images: TaggedBatch) -> DiscriminatorOutput:
        if not isinstance(images, TaggedBatch):
            raise TypeError("discriminator input must be a TaggedBatch")
        if images.kind != "image":
            raise TypeError(f"discriminator fed a {images.kind!r} batch, not an image")
        if images.tensor.shape[-1] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}px input, got {images.tensor.shape[-1]}"
            )
        h = self.trunk(images.tensor)
        return DiscriminatorOutput(self.src_head(h), self.cls_head(h).flatten(1))


def adversarial_losses(real_src, fake_src, saturating=False):
    """(d_term, g_term) for the vanilla source loss on patch logits.

    d_term is binary cross-entropy with targets 1 (real) / 0 (fake), so
    minimizing it maximizes the discriminator's payoff. g_term defaults
    to the non-saturating form -log(sigmoid(fake)); saturating=True uses
    the literal minimax form log(1 - sigmoid(fake)).
    """
    ones = torch.ones_like(real_src)
    zeros = torch.zeros_like(fake_src)
    d_term = F.binary_cross_entropy_with_logits(real_src, ones) + \
        F.binary_cross_entropy_with_logits(fake_src, zeros)
    if saturating:
        g_term = F.logsigmoid(-fake_src).mean()
    else:
        g_term = F.binary_cross_entropy_with_logits(fake_src, torch.ones_like(fake_src))
    return d_term, g_term


def cls_loss(cls_logits, targets, label_mode):
    """Domain classification loss for either labeling convention.

    one_hot: softmax cross-entropy, mean over the batch. multi_binary:
    per-attribute binary cross-entropy, summed over attributes and
    averaged over the batch.
    """
    if cls_logits.shape != targets.shape:
        raise ValueError("logits / targets shape mismatch")
    if label_mode == "one_hot":
        return -(targets * F.log_softmax(cls_logits, dim=1)).sum(dim=1).mean()
    if label_mode == "multi_binary":
        per = F.binary_cross_entropy_with_logits(cls_logits, targets, reduction="none")
        return per.sum(dim=1).mean()
    raise ValueError(f"unknown label mode {label_mode!r}")


# Same computation on different inputs: real images with their source
# labels vs warped generated images with the transfer targets.
cls_loss_real = cls_loss
cls_loss_fake = cls_loss


def reconstruction_losses(t, t_cyc, x, x_rec):
    """L1 cycle losses: (texture term, image term, their sum)."""
    if t.shape != t_cyc.shape or x.shape != x_rec.shape:
        raise ValueError("reconstruction shape mismatch")
    rec_t = (t - t_cyc).abs().mean()
    rec_i = (x - x_rec).abs().mean()
    return rec_t, rec_i, rec_t + rec_i


def objective_d(d_term, cls_real, lam_cls=1.0):
    # d_term is already the negated adversarial payoff (BCE convention)
    return d_term + lam_cls * cls_real


def objective_g(g_term, cls_fake, rec, ip, weights: LossWeights = None):
    weights = weights or LossWeights()
    return g_term + weights.lam_cls * cls_fake + weights.lam_rec * rec + weights.lam_ip * ip


@dataclasses.dataclass
class TdbModel:
    """The full pipeline: autoencoder + generator + discriminator."""
    dae: nn.Module
    generator: Generator
    discriminator: Discriminator
    use_dae: bool = True

    def factorize(self, images):
        """Image batch -> (texture, grid); raw image + identity grid in
        the no-autoencoder ablation arm."""
        if not self.use_dae:
            b, _, h, w = images.shape
            grid = warp.identity_grid(h, w, images.dtype, images.device)
            return images, grid.unsqueeze(0).expand(b, h, w, 2)
        out = self.dae(images)
        return out.texture, out.grid


def transfer_attributes(model: TdbModel, images, target):
    """Edit `images` toward `target` labels; returns (images, textures)."""
    texture, grid = model.factorize(images)
    new_texture = model.generator(texture, target)
    return warp.warp_image(new_texture, grid), new_texture
