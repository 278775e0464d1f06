"""Batch/Instance Normalization with private per-modality parameters.

Each modality stream owns one `NormState` per layer: trainable scale/offset,
running statistics, and a boolean mask marking the channels whose scaling
factors fall under the L1 sparsity penalty (and are thereby eligible for
cross-modal exchange).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

MODES = ("batch", "instance")


@dataclass
class NormState:
    """Normalization parameters and statistics for one (modality, layer)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    sparsity_mask: np.ndarray
    eps: float = 1e-5
    stat_momentum: float = 0.1
    mode: str = "batch"

    @classmethod
    def create(cls, channels: int, mode: str = "batch", mask: np.ndarray | None = None,
               eps: float = 1e-5, stat_momentum: float = 0.1) -> "NormState":
        """Fresh state: gamma 1, beta 0, running stats (0, 1)."""
        if mode not in MODES:
            raise ValueError(f"unknown norm mode {mode!r}")
        if mask is None:
            mask = np.zeros(channels, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (channels,):
            raise ValueError(f"mask shape {mask.shape} != ({channels},)")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            sparsity_mask=mask,
            eps=eps,
            stat_momentum=stat_momentum,
            mode=mode,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def _validate(x: Tensor, s: NormState) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"norm expects [N,C,H,W], got shape {x.data.shape}")
    if x.data.shape[1] != s.channels:
        raise ValueError(f"input has {x.data.shape[1]} channels, state has {s.channels}")


def norm_forward_train(
    x: Tensor, s: NormState, update_running: bool = True
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize with batch statistics, update running stats by EMA.

    Returns (y, batch_mean, batch_std) with the per-channel statistics that
    entered the running-average update. Differentiable w.r.t. x, gamma, beta.
    """
    _validate(x, s)
    n, c, h, w = x.data.shape
    if s.mode == "batch":
        if n * h * w < 2:
            raise ValueError("batch norm needs at least 2 values per channel")
        axes = (0, 2, 3)
    else:
        if h * w < 2:
            raise ValueError("instance norm needs at least 2 values per map")
        axes = (2, 3)

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (x.data - mu) * inv_std
    gamma_b = s.gamma.data[None, :, None, None]
    out_data = gamma_b * xhat + s.beta.data[None, :, None, None]

    # Per-channel stats for the EMA; instance mode averages over instances.
    if s.mode == "batch":
        ch_mean = mu.reshape(c).copy()
        ch_var = var.reshape(c).copy()
    else:
        ch_mean = mu.mean(axis=0).reshape(c)
        ch_var = var.mean(axis=0).reshape(c)
    m = s.stat_momentum
    s.running_mean *= 1.0 - m
    s.running_mean += m * ch_mean
    s.running_var *= 1.0 - m
    s.running_var += m * ch_var

    a, gamma, beta = x, s.gamma, s.beta

    def bw(g):
        gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        a.accumulate_grad(gamma_b * inv_std * (g - g_mean - xhat * gx_mean))

    out = Tensor._make(out_data, (a, gamma, beta), bw, "norm_train")
    return out, ch_mean, np.sqrt(ch_var)


def norm_forward_eval(x: Tensor, s: NormState) -> Tensor:
    """Normalize with frozen running statistics."""
    _validate(x, s)
    inv_std = 1.0 / np.sqrt(s.running_var + s.eps)
    scale = s.gamma * Tensor(inv_std)
    shift = s.beta - s.gamma * Tensor(s.running_mean * inv_std)
    return x * scale.reshape(1, s.channels, 1, 1) + shift.reshape(1, s.channels, 1, 1)


def norm_forward(x: Tensor, s: NormState, train: bool) -> Tensor:
    if train:
        return norm_forward_train(x, s)[0]
    return norm_forward_eval(x, s)


def sparsity_penalty(states: list[NormState], lam: float) -> Tensor:
    """L1 penalty lam * sum over states of |gamma| on mask-designated channels.

    The backward contribution is lam * sign(gamma) with sign(0) = 0, applied
    only to masked channels; unmasked channels receive exactly zero.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    total = 0.0
    gammas = []
    masks = []
    for s in states:
        total += float(np.sum(np.abs(s.gamma.data[s.sparsity_mask])))
        gammas.append(s.gamma)
        masks.append(s.sparsity_mask)

    def bw(g):
        for gamma, mask in zip(gammas, masks):
            gamma.accumulate_grad(g * lam * mask * np.sign(gamma.data))

    return Tensor._make(np.asarray(lam * total), tuple(gammas), bw, "sparsity_penalty")
