"""Gradient inversion: recover a client's inputs from what it sent the server.

The attacker knows the global model and an observed gradient direction and
optimises dummy inputs (and, if needed, soft labels) so that their gradient
points the same way. The second-order derivative needed for this comes from
torch autograd. The network is rebuilt from the same flat parameter vector
as :mod:`fedshield.model_math`, so both agree on layout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .model_math import Architecture

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 2000
    step_size: float = 0.1
    tv_weight: float = 0.0
    batch_size: int = 1
    knows_labels: bool = True
    seed: int = 0
    max_restarts: int = 3
    image_shape: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be non-negative")


@dataclass
class InversionResult:
    features: np.ndarray
    label_probs: np.ndarray
    objective: float
    restarts: int


def _layers(params: torch.Tensor, arch: Architecture):
    out, pos = [], 0
    for fan_in, fan_out in arch.layer_dims:
        W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        out.append((W, params[pos:pos + fan_out]))
        pos += fan_out
    return out


def torch_forward(params: torch.Tensor, arch: Architecture, x: torch.Tensor) -> torch.Tensor:
    layers = _layers(params, arch)
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = torch.relu(h)
    return h


def soft_label_gradient(params: torch.Tensor, arch, x, y_soft, create_graph=False) -> torch.Tensor:
    """Gradient of mean soft-label cross-entropy w.r.t. the flat parameters."""
    if not params.requires_grad:
        params = params.detach().requires_grad_(True)
    logp = torch.log_softmax(torch_forward(params, arch, x), dim=1)
    loss = -(y_soft * logp).sum(dim=1).mean()
    (g,) = torch.autograd.grad(loss, params, create_graph=create_graph)
    return g


def total_variation(x: torch.Tensor, image_shape=None) -> torch.Tensor:
    """Anisotropic TV: sum of absolute neighbour differences per sample, averaged
    over the batch. Rows are treated as 1-D signals unless ``image_shape`` is given."""
    if image_shape is not None:
        img = x.reshape(x.shape[0], *image_shape)
        tv = (img[:, 1:, :] - img[:, :-1, :]).abs().sum(dim=(1, 2))
        tv = tv + (img[:, :, 1:] - img[:, :, :-1]).abs().sum(dim=(1, 2))
    else:
        tv = (x[:, 1:] - x[:, :-1]).abs().sum(dim=1)
    return tv.mean()


def _objective(params, arch, x, y_soft, target, cfg):
    g = soft_label_gradient(params, arch, x, y_soft, create_graph=True)
    tn = target.norm()
    gn = g.norm()
    cos = (g @ target) / (gn * tn) if float(gn.detach()) > 0 and float(tn) > 0 else torch.zeros((), dtype=g.dtype)
    obj = 1.0 - cos
    if cfg.tv_weight > 0:
        obj = obj + cfg.tv_weight * total_variation(x, cfg.image_shape)
    return obj


def invert(target_gradient, global_params, arch: Architecture, cfg: InversionConfig,
           labels: Optional[Sequence[int]] = None) -> InversionResult:
    """Reconstruct ``cfg.batch_size`` inputs whose gradient matches ``target_gradient``.

    ``target_gradient`` is a gradient direction; an SGD update points the
    other way, so pass ``-update`` (see :func:`update_direction`). With
    ``knows_labels`` the true ``labels`` are used; otherwise soft labels are
    optimised jointly through a softmax relaxation. The best iterate by
    objective is returned.
    """
    target = torch.as_tensor(np.asarray(target_gradient, dtype=float))
    params = torch.as_tensor(np.asarray(global_params, dtype=float)).requires_grad_(True)
    if cfg.knows_labels and labels is None:
        raise ValueError("knows_labels requires the true labels")
    for attempt in range(cfg.max_restarts + 1):
        gen = torch.Generator().manual_seed(int(cfg.seed) + 7919 * attempt)
        x = torch.randn(cfg.batch_size, arch.input_dim, generator=gen, dtype=torch.float64).requires_grad_(True)
        variables = [x]
        if cfg.knows_labels:
            y_fixed = torch.nn.functional.one_hot(torch.as_tensor(np.asarray(labels, dtype=int)),
                                                  arch.num_classes).double()
        else:
            z = torch.randn(cfg.batch_size, arch.num_classes, generator=gen, dtype=torch.float64).requires_grad_(True)
            variables.append(z)
        opt = torch.optim.Adam(variables, lr=cfg.step_size)
        best = (np.inf, None, None)
        finite = True
        for _ in range(cfg.iterations):
            opt.zero_grad()
            y_soft = y_fixed if cfg.knows_labels else torch.softmax(z, dim=1)
            obj = _objective(params, arch, x, y_soft, target, cfg)
            val = float(obj.detach())
            if not np.isfinite(val):
                finite = False
                break
            if val < best[0]:
                best = (val, x.detach().clone(), y_soft.detach().clone())
            obj.backward()
            opt.step()
        if finite or best[1] is not None:
            if not finite:
                log.warning("inversion hit a non-finite objective; keeping best iterate")
            # score the final iterate too
            y_soft = y_fixed if cfg.knows_labels else torch.softmax(z, dim=1).detach()
            val = float(_objective(params, arch, x.detach(), y_soft, target, cfg).detach())
            if np.isfinite(val) and val < best[0]:
                best = (val, x.detach().clone(), y_soft.detach().clone())
            return InversionResult(best[1].numpy(), best[2].numpy(), best[0], attempt)
        log.warning("inversion restart %d after non-finite objective", attempt + 1)
    raise FloatingPointError("gradient inversion diverged on every restart")


def update_direction(update) -> np.ndarray:
    """Gradient direction implied by an SGD update (``update = -lr * grad``)."""
    return -np.asarray(update, dtype=float)


def reconstruction_error(x_rec, x_true) -> float:
    """Mean per-pair MSE under the optimal one-to-one matching of rows."""
    a = np.atleast_2d(np.asarray(x_rec, dtype=float))
    b = np.atleast_2d(np.asarray(x_true, dtype=float))
    if a.shape != b.shape:
        raise ValueError("reconstructed and true batches differ in shape")
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).mean(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())
