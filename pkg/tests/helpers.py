"""Shared builders for the network and acceptance tests."""

import numpy as np
import torch

from jointdudo.geometry import central_column_mask
from jointdudo.nets import ModelVariant, build_model, compute_losses


def tiny_model(op, kind="joint_dudo", iterations=2, seed=0, dtype=torch.float64, jitter=0.0):
    """Small-width model.  ``jitter > 0`` replaces the zero-initialised output layers
    with small random weights so every parameter receives a gradient."""
    torch.manual_seed(seed)
    variant = ModelVariant(kind, iterations=iterations, width=4, depth=1, img_width=4, adc_growth=2, se_hidden=2)
    delta = central_column_mask(op.geometry).as_array().astype(np.float32)
    model = build_model(variant, op, delta, prior_gain=0.5).to(dtype)
    if jitter:
        with torch.no_grad():
            for p in model.parameters():
                if not p.any():
                    p.normal_(0.0, jitter)
    return model


def tiny_batch(op, batch=2, seed=0, dtype=torch.float64, target_offset=0.0):
    """Random inputs and targets.  ``target_offset`` lifts the targets well above any
    network output so every L1 residual keeps one sign."""
    g = torch.Generator().manual_seed(seed)
    delta = torch.as_tensor(central_column_mask(op.geometry).as_array(), dtype=dtype)
    proj = (batch, 1, *op.projection_shape)
    vol = (batch, 1, *op.volume_shape)
    p_fd = torch.rand(proj, generator=g, dtype=dtype) + 0.5
    p_ld = (p_fd + 0.2 * torch.rand(proj, generator=g, dtype=dtype)) * delta
    i_ld = torch.rand(vol, generator=g, dtype=dtype)
    p_fd = p_fd + target_offset
    return {
        "p_ld_9a": p_ld,
        "i_ld_9a": i_ld,
        "p_fd_19a": p_fd,
        "p_fd_9a": p_fd * delta,
        "i_fd_19a": torch.rand(vol, generator=g, dtype=dtype) + target_offset,
    }


def training_loss(model, batch):
    trace = model(batch["p_ld_9a"], batch["i_ld_9a"])
    return compute_losses(trace, batch, model_delta(model, batch["p_ld_9a"].dtype)).l_total


def model_delta(model, dtype):
    return model.delta.to(dtype) if hasattr(model, "delta") else None


def finite_difference_check(model, batch, eps=1e-3, n_probe=3, seed=0, loss_fn=training_loss):
    """Worst relative error between autograd and central differences over probed parameter entries.

    Probes ``n_probe`` random entries of every parameter tensor.
    """
    model.zero_grad()
    loss_fn(model, batch).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
            g_ad = float(p.grad.view(-1)[j])
            orig = float(flat[j])
            with torch.no_grad():
                flat[j] = orig + eps
                up = float(loss_fn(model, batch))
                flat[j] = orig - eps
                down = float(loss_fn(model, batch))
                flat[j] = orig
            g_fd = (up - down) / (2 * eps)
            scale = max(abs(g_ad), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_ad - g_fd) / scale)
    return worst
