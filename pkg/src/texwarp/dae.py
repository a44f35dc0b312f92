"""Intrinsic deforming autoencoder: a joint encoder feeding shading,
albedo and deformation decoders, texture composition, and its objective."""

import dataclasses
import math

import torch
import torch.nn as nn

from . import warp


@dataclasses.dataclass
class LossWeights:
    lam_cls: float = 1.0
    lam_rec: float = 10.0
    lam_ip: float = 0.001
    lam1: float = 1e-6       # smoothness
    lam2: float = 0.01       # bias-reduce, affine term
    lam2_prime: float = 0.01  # bias-reduce, grid term
    lam3: float = 1e-6       # shading smoothness

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclasses.dataclass
class DaeConfig:
    image_size: int = 32
    channels: int = 3
    z_shading: int = 32
    z_albedo: int = 64
    z_deform: int = 32
    base_width: int = 32

    @property
    def n_down(self):
        # stride-2 blocks down to a 4x4 spatial bottleneck
        return int(math.log2(self.image_size // 4))

    @property
    def z_total(self):
        return self.z_shading + self.z_albedo + self.z_deform


@dataclasses.dataclass
class LatentCode:
    z_shading: torch.Tensor
    z_albedo: torch.Tensor
    z_deform: torch.Tensor


@dataclasses.dataclass
class DaeOutput:
    texture: torch.Tensor        # (B, 3, H, W), >= 0
    grid: torch.Tensor           # (B, H, W, 2)
    shading: torch.Tensor        # (B, 1, H, W) in (0, 2)
    albedo: torch.Tensor         # (B, 3, H, W) in (0, 1)
    reconstruction: torch.Tensor  # (B, 3, H, W)


class Encoder(nn.Module):
    def __init__(self, cfg: DaeConfig):
        super().__init__()
        layers = []
        cin = cfg.channels
        width = cfg.base_width
        for _ in range(cfg.n_down):
            layers += [
                nn.Conv2d(cin, width, 4, 2, 1),
                nn.InstanceNorm2d(width),
                nn.LeakyReLU(0.2),
            ]
            cin, width = width, min(width * 2, 256)
        self.conv = nn.Sequential(*layers)
        self.head = nn.Linear(cin * 16, cfg.z_total)

    def forward(self, x):
        h = self.conv(x)
        return self.head(h.flatten(1))


class Decoder(nn.Module):
    """Latent vector to a raw (pre-activation) map at full resolution."""

    def __init__(self, z_dim, out_channels, cfg: DaeConfig, out_bias=0.0):
        super().__init__()
        width = min(cfg.base_width * 2 ** (cfg.n_down - 1), 256)
        self.width = width
        self.fc = nn.Linear(z_dim, width * 16)
        layers = []
        cin = width
        for _ in range(cfg.n_down):
            cout = max(cin // 2, cfg.base_width)
            layers += [
                nn.ConvTranspose2d(cin, cout, 4, 2, 1),
                nn.InstanceNorm2d(cout),
                nn.ReLU(),
            ]
            cin = cout
        self.deconv = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, out_channels, 3, 1, 1)
        nn.init.constant_(self.out.bias, out_bias)

    def forward(self, z):
        h = self.fc(z).reshape(z.shape[0], self.width, 4, 4)
        return self.out(self.deconv(h))


class Dae(nn.Module):
    def __init__(self, cfg: DaeConfig = None):
        super().__init__()
        self.cfg = cfg or DaeConfig()
        self.encoder = Encoder(self.cfg)
        self.shading_decoder = Decoder(self.cfg.z_shading, 1, self.cfg)
        self.albedo_decoder = Decoder(self.cfg.z_albedo, 3, self.cfg)
        # bias 1.0 starts the increments near-uniform (identity grid) so
        # the EPS floor in warp.integrate_deformation rarely clips
        self.deform_decoder = Decoder(self.cfg.z_deform, 2, self.cfg, out_bias=1.0)

    def encode(self, images):
        if images.shape[-1] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}px input, got {images.shape[-1]}"
            )
        z = self.encoder(images)
        c = self.cfg
        return LatentCode(
            z[:, : c.z_shading],
            z[:, c.z_shading : c.z_shading + c.z_albedo],
            z[:, c.z_shading + c.z_albedo :],
        )

    def decode_components(self, code: LatentCode):
        shading = 2.0 * torch.sigmoid(self.shading_decoder(code.z_shading))
        albedo = torch.sigmoid(self.albedo_decoder(code.z_albedo))
        deformation = self.deform_decoder(code.z_deform)
        return shading, albedo, deformation

    def forward(self, images):
        code = self.encode(images)
        shading, albedo, deformation = self.decode_components(code)
        texture = compose_texture(shading, albedo)
        grid = warp.integrate_deformation(deformation)
        reconstruction = warp.warp_image(texture, grid)
        return DaeOutput(texture, grid, shading, albedo, reconstruction)


def compose_texture(shading, albedo):
    """Hadamard product, the single shading channel broadcast over RGB."""
    if shading.shape[-2:] != albedo.shape[-2:]:
        raise ValueError("shading and albedo resolution mismatch")
    return shading * albedo


def shading_loss(shading, lam3=1e-6):
    """Squared forward differences of the shading field, times lam3."""
    dx = shading[:, :, :, 1:] - shading[:, :, :, :-1]
    dy = shading[:, :, 1:, :] - shading[:, :, :-1, :]
    return lam3 * ((dx ** 2).sum() + (dy ** 2).sum())


def dae_objective(output: DaeOutput, images, weights: LossWeights = None):
    """Total autoencoder loss and its per-term breakdown."""
    weights = weights or LossWeights()
    if output.reconstruction.shape != images.shape:
        raise ValueError("reconstruction / input shape mismatch")
    terms = {
        "dae/reconstruction": ((output.reconstruction - images) ** 2).mean(),
        "dae/smoothness": warp.smoothness_loss(output.grid, weights.lam1),
        "dae/bias_reduce": warp.bias_reduce_loss(
            output.grid, weights.lam2, weights.lam2_prime
        ),
        "dae/shading": shading_loss(output.shading, weights.lam3),
    }
    total = sum(terms.values())
    return total, terms
