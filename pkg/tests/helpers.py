"""Shared oracles for the test suite: finite differences and a tiny model."""

import numpy as np
import torch

from lifelong_vae.networks import ArchSpec, init_model

TOY_ARCH = ArchSpec(input_dim=4, J=2, C=2, hidden_dim=8, hidden_layers=1)


def toy_model(seed=0, arch=TOY_ARCH):
    return init_model(arch, seed, dtype=torch.float64)


def toy_batch(n=3, seed=0, dim=4):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, dim, generator=gen, dtype=torch.float64)


def central_difference(fn, tensor, h=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``tensor`` (perturbed in place)."""
    grad = torch.zeros_like(tensor, dtype=torch.float64)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def model_gradient_errors(model, loss_fn, h=1e-5, floor=1e-6):
    """Max relative error between autograd and central differences, per parameter tensor."""
    model.zero_grad()
    loss_fn().backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        with torch.no_grad():
            numeric = central_difference(loss_fn, p, h)
        errors[name] = relative_error(analytic.numpy(), numeric.numpy(), floor)
    return errors


# one line per acceptance criterion, printed at the end of the session by conftest
ACCEPTANCE_LINES: list[str] = []
