import numpy as np
import pytest
import torch

torch.set_num_threads(4)


def central_difference_grad(fn, x, eps=1e-5):
    """Numerical gradient of scalar fn at tensor x by central differences."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_grad_error(fn, x):
    """Max relative error between autograd and central differences."""
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    (analytic,) = torch.autograd.grad(out, x)
    numeric = central_difference_grad(fn, x.detach().clone())
    denom = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)
