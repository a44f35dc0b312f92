"""Monotone warp grids: integration of raw increments, differentiable
bilinear warping, and the grid regularizers (smoothness, bias-reduce)."""

import torch
import torch.nn.functional as F

EPS = 1e-8

_pinv_cache = {}


def identity_grid(height, width, dtype=torch.float32, device=None):
    """Normalized sampling grid (H, W, 2) mapping each pixel to itself."""
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def integrate_deformation(field):
    """Turn raw per-pixel increments (B, 2, H, W) into a monotone grid.

    Increments are floored at EPS, cumulatively summed along their axis
    (channel 0 = x along width, channel 1 = y along height) and min-max
    normalized per row / per column so every line spans exactly [-1, 1].
    Returns a grid of shape (B, H, W, 2).
    """
    if field.dim() != 4 or field.shape[1] != 2:
        raise ValueError(f"expected (B, 2, H, W) increments, got {tuple(field.shape)}")
    if field.shape[2] < 2 or field.shape[3] < 2:
        raise ValueError("deformation field must be at least 2x2")

    px = field[:, 0].clamp(min=EPS)
    py = field[:, 1].clamp(min=EPS)
    cx = torch.cumsum(px, dim=-1)  # (B, H, W), increasing along W
    cy = torch.cumsum(py, dim=-2)  # (B, H, W), increasing along H
    gx = -1.0 + 2.0 * (cx - cx[..., :1]) / (cx[..., -1:] - cx[..., :1])
    gy = -1.0 + 2.0 * (cy - cy[..., :1, :]) / (cy[..., -1:, :] - cy[..., :1, :])
    return torch.stack([gx, gy], dim=-1)


def warp_image(image, grid):
    """Bilinearly sample `image` (B, C, H, W) at `grid` (B, H, W, 2).

    Align-corners convention (-1/+1 are the first/last pixel centers),
    border replication outside the range. Differentiable in both args.
    """
    if image.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise ValueError("warp_image expects (B,C,H,W) image and (B,H,W,2) grid")
    if image.shape[0] != grid.shape[0] or image.shape[2:] != grid.shape[1:3]:
        raise ValueError(
            f"image {tuple(image.shape)} and grid {tuple(grid.shape)} do not match"
        )
    return F.grid_sample(
        image, grid, mode="bilinear", padding_mode="border", align_corners=True
    )


def smoothness_loss(grid, lam=1e-6):
    """L1 norm of forward differences of both grid channels, times lam.

    Applied to the warping field itself, so even the identity grid has a
    nonzero cost; summed over the batch.
    """
    dx = grid[:, :, 1:, :] - grid[:, :, :-1, :]
    dy = grid[:, 1:, :, :] - grid[:, :-1, :, :]
    return lam * (dx.abs().sum() + dy.abs().sum())


def _design_pinv(height, width, dtype, device):
    key = (height, width, dtype, device)
    if key not in _pinv_cache:
        base = identity_grid(height, width, dtype=dtype, device=device).reshape(-1, 2)
        ones = torch.ones(base.shape[0], 1, dtype=dtype, device=device)
        design = torch.cat([base, ones], dim=1)  # (H*W, 3)
        _pinv_cache[key] = torch.linalg.pinv(design)
    return _pinv_cache[key]


def fit_affine(grid):
    """Least-squares 2x3 affine from identity-grid coords to `grid` coords.

    Accepts (H, W, 2) or (B, H, W, 2); returns (2, 3) or (B, 2, 3).
    """
    single = grid.dim() == 3
    if single:
        grid = grid.unsqueeze(0)
    b, h, w, _ = grid.shape
    pinv = _design_pinv(h, w, grid.dtype, grid.device)
    targets = grid.reshape(b, h * w, 2)
    coeffs = torch.einsum("kn,bnc->bck", pinv, targets)  # (B, 2, 3)
    return coeffs[0] if single else coeffs


def identity_affine(dtype=torch.float32, device=None):
    return torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=dtype, device=device)


def bias_reduce_loss(grids, lam2=0.01, lam2_prime=0.01):
    """Penalize the batch-mean warp for drifting away from the identity.

    Affine term: squared Frobenius distance between the batch-average
    affine fit and the identity (entry sum). Grid term: mean squared
    entry of (mean grid - identity grid).
    """
    if grids.dim() != 4 or grids.shape[0] == 0:
        raise ValueError("bias_reduce_loss needs a non-empty batch of grids")
    _, h, w, _ = grids.shape
    s_avg = fit_affine(grids).mean(dim=0)
    s_0 = identity_affine(dtype=grids.dtype, device=grids.device)
    affine_term = ((s_avg - s_0) ** 2).sum()
    mean_grid = grids.mean(dim=0)
    grid_term = ((mean_grid - identity_grid(h, w, grids.dtype, grids.device)) ** 2).mean()
    return lam2 * affine_term + lam2_prime * grid_term
