"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np
import torch

from sonate.flowmatch import cfm_loss, collate, euler_integrate
from sonate.mmdit import ModelConfig
from sonate.textcond import g2p


def gaussian_velocity(mu, sigma):
    """E[x1 - x0 | x_t = x] for x0 ~ N(0, 1), x1 ~ N(mu, sigma^2), coordinatewise."""
    s2 = sigma * sigma

    def v(t, x):
        gain = (t * s2 - (1 - t)) / (t * t * s2 + (1 - t) ** 2)
        return mu + gain * (x - t * mu)

    return v


def gaussian_run(mu, sigma, steps, n=1000, dim=16, seed=0):
    """Euler endpoints, the exact flow-map endpoints and the starting noise."""
    z0 = np.random.default_rng(seed).standard_normal((n, dim))
    z1 = euler_integrate(gaussian_velocity(mu, sigma), z0, steps)
    return z1, mu + sigma * z0, z0


def toy_batch():
    """Two samples within the gradient-check budget: L_A <= 6, L_I + L_C <= 5."""
    rng = np.random.default_rng(11)
    latents = [rng.standard_normal((6, 16)), rng.standard_normal((4, 16))]
    return collate(latents, [[1, 2], [3]], [g2p("abc"), g2p("de", "music")])


def loss_fn(cfg: ModelConfig, batch, seed=5):
    def f(params):
        return cfm_loss(params, cfg, batch, np.random.default_rng(seed))[0]
    return f


def finite_difference_errors(f, params, h=1e-5):
    """Relative error per tensor between autograd and central differences of ``f``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    names = list(leaves)
    grads = torch.autograd.grad(f(leaves), [leaves[k] for k in names], allow_unused=True)
    out = {}
    with torch.no_grad():
        base = {k: v.detach().clone() for k, v in params.items()}
        for name, g in zip(names, grads):
            g = torch.zeros_like(base[name]) if g is None else g
            num = torch.zeros_like(base[name]).reshape(-1)
            flat = base[name].reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = f(base).item()
                flat[i] = old - h
                down = f(base).item()
                flat[i] = old
                num[i] = (up - down) / (2 * h)
            num = num.reshape(g.shape)
            scale = max(g.norm().item(), num.norm().item())
            out[name] = 0.0 if scale < 1e-12 else (g - num).norm().item() / scale
    return out
