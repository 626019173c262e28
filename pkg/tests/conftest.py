"""Shared test helpers: naive oracles and the finite-difference checker."""

import math

import numpy as np
import torch


def naive_attention(q, k, v):
    """Double-loop softmax-attention oracle in numpy."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    n, d = q.shape
    m = k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = np.array([np.dot(q[i], k[j]) / math.sqrt(d) for j in range(m)])
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        for j in range(m):
            out[i] += w[j] * v[j]
    return out


def naive_ffn(x, w1, b1, w2, b2):
    """Loop oracle for the rectified two-layer feed-forward."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((x.shape[0], w2.shape[0]))
    for i in range(x.shape[0]):
        hidden = np.maximum(0.0, w1 @ x[i] + b1)
        out[i] = w2 @ hidden + b2
    return out


def perturb_parameters(module, scale=0.05, seed=0):
    """Nudge every parameter with seeded noise.

    Gradient checks must run at a generic point: freshly initialized models
    sit exactly on layer-norm degeneracies (zero biases + all-zero tokens
    from empty BEV cells), where the loss has enormous curvature.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def check_parameter_gradients(module, scalar_fn, step=1e-5, coords_per_param=4,
                              max_params=None, seed=0):
    """Compare autograd parameter gradients against central finite differences.

    `scalar_fn(module)` must rebuild the forward pass and return a scalar
    tensor. A seeded subset of coordinates is probed in every parameter
    (or in `max_params` randomly chosen parameters, for large modules),
    and the norm-based relative error over all probed coordinates is
    returned. Everything runs in float64.
    """
    module.zero_grad(set_to_none=True)
    loss = scalar_fn(module)
    loss.backward()

    rng = np.random.default_rng(seed)
    params = [(n, p) for n, p in module.named_parameters() if p.grad is not None]
    if max_params is not None and len(params) > max_params:
        picks = rng.choice(len(params), size=max_params, replace=False)
        params = [params[i] for i in picks]

    auto, fd = [], []
    for _, param in params:
        grad = param.grad.detach().reshape(-1)
        n = param.numel()
        idx = rng.choice(n, size=min(coords_per_param, n), replace=False)
        flat = param.data.reshape(-1)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                f_plus = scalar_fn(module).item()
                flat[i] = orig - step
                f_minus = scalar_fn(module).item()
                flat[i] = orig
            auto.append(grad[i].item())
            fd.append((f_plus - f_minus) / (2.0 * step))

    auto = np.asarray(auto)
    fd = np.asarray(fd)
    denom = max(np.linalg.norm(auto), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(auto - fd) / denom)
