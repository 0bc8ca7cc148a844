"""Shared fixtures: tiny double-precision bundles and a finite-difference
gradient oracle. The tiny nets use smooth activations (tanh) and no
batch-norm or dropout so every loss is a smooth deterministic function of the
parameters, which is what central differences require."""

import numpy as np
import torch
import pytest

from anadis.models import NetSpec, custom_bundle
from anadis.models import fc, flatten, reshape, sigmoid, softmax, tanh
from anadis.models import Layer


def tiny_vae_bundle(seed=0, dtype=torch.float64):
    """~950 trainable parameters: 1x5x5 images, 3 code components."""
    specs = {
        "generator": NetSpec((3,), (fc(12), tanh(), fc(25), sigmoid(), reshape(1, 5, 5))),
        "encoder": NetSpec((1, 5, 5), (flatten(), fc(12), tanh(), fc(6))),
        "relation": NetSpec((2, 5, 5), (flatten(), fc(8), tanh(), fc(3), softmax())),
    }
    return custom_bundle("anavae", specs, code_dim=3, seed=seed, dtype=dtype)


def tiny_gan_bundle(seed=0, dtype=torch.float64):
    """1x5x5 images, 2 code + 2 noise components; all sub-nets well under 1k params."""
    specs = {
        "generator": NetSpec((4,), (fc(12), tanh(), fc(25), tanh(), reshape(1, 5, 5))),
        "critic": NetSpec((1, 5, 5), (flatten(), fc(16), tanh(), fc(1))),
        "relation": NetSpec((2, 5, 5), (flatten(), fc(8), tanh(), fc(2), softmax())),
    }
    return custom_bundle("anagan", specs, code_dim=2, noise_dim=2, seed=seed, dtype=dtype)


def zero_parameters(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def n_params(*modules):
    return sum(p.numel() for m in modules for p in m.parameters())


def gradient_error(loss_fn, modules, h=1e-4):
    """Relative error between autograd and central finite differences.

    `loss_fn()` must be a deterministic scalar function of the module
    parameters (re-seed any internal randomness on every call). Returns
    ||g_fd - g_auto|| / ||g_auto|| over all parameters of `modules`.
    """
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1).clone() for p in params]).numpy()

    # Perturbations happen under no_grad, but each evaluation runs with grad
    # enabled: the gradient-penalty loss differentiates through its own
    # forward even when only the value is wanted.
    numeric = np.empty_like(analytic)
    idx = 0
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(loss_fn().detach())
            flat[i] = orig - h
            f_minus = float(loss_fn().detach())
            flat[i] = orig
            numeric[idx] = (f_plus - f_minus) / (2 * h)
            idx += 1
    denom = max(np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(numeric - analytic) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
