"""Threshold-gated channel exchange between modality streams.

After each normalization layer, a channel whose scaling factor has collapsed
below the threshold is replaced by the mean of the other modalities' outputs
at the same channel position. Replacement is restricted to the sub-part of
channels owned by each modality, and gradients are detached from the replaced
channel: only the contributing modalities receive downstream gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def partition_channels(channels: int, modalities: int) -> list[tuple[int, int]]:
    """Split [0, C) into M equal contiguous sub-parts, one per modality."""
    if modalities < 1:
        raise ValueError("modalities must be >= 1")
    if channels % modalities != 0:
        raise ValueError(f"{channels} channels not divisible into {modalities} equal sub-parts")
    step = channels // modalities
    return [(m * step, (m + 1) * step) for m in range(modalities)]


@dataclass
class ExchangePlan:
    """Where and when channels may be replaced.

    `subparts[m]` is the half-open channel range in which modality m's
    channels are exchange-eligible. `compare_abs` selects |gamma| <= theta
    (default, tracks the magnitude prior) versus the literal signed
    gamma <= theta comparison.
    """

    theta: float
    subparts: list[tuple[int, int]]
    compare_abs: bool = True
    enabled: bool = True

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be > 0")

    @classmethod
    def partitioned(cls, channels: int, modalities: int, theta: float, **kw) -> "ExchangePlan":
        return cls(theta=theta, subparts=partition_channels(channels, modalities), **kw)

    @classmethod
    def all_channel(cls, channels: int, modalities: int, theta: float, **kw) -> "ExchangePlan":
        """Ablation variant: every modality's full channel range is eligible."""
        return cls(theta=theta, subparts=[(0, channels)] * modalities, **kw)

    def eligible_mask(self, m: int, channels: int) -> np.ndarray:
        lo, hi = self.subparts[m]
        mask = np.zeros(channels, dtype=bool)
        mask[lo:hi] = True
        return mask

    def replace_mask(self, gamma: np.ndarray, m: int) -> np.ndarray:
        """Boolean mask of channels to replace for modality m."""
        crit = np.abs(gamma) if self.compare_abs else gamma
        return self.eligible_mask(m, gamma.shape[0]) & (crit <= self.theta)


@dataclass
class ExchangeReport:
    """Replaced-channel bookkeeping for one exchange site."""

    counts: list[int]
    indices: list[list[int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts)


def exchange_forward(
    bn_outputs: list[Tensor], gammas: list[np.ndarray], plan: ExchangePlan
) -> tuple[list[Tensor], ExchangeReport]:
    """Apply the replacement rule to M normalized streams.

    For modality m and eligible channel c with gamma below threshold, the
    output channel is the mean of the other modalities' channels; everything
    else passes through. When nothing is replaced the input tensors are
    returned unchanged (bit-identical path).
    """
    m_count = len(bn_outputs)
    shape = bn_outputs[0].data.shape
    channels = shape[1]
    for t in bn_outputs[1:]:
        if t.data.shape != shape:
            raise ValueError("all modality streams must share the same shape")
    for g in gammas:
        if g.shape != (channels,):
            raise ValueError(f"gamma length {g.shape} != ({channels},)")

    if not plan.enabled:
        return bn_outputs, ExchangeReport([0] * m_count, [[] for _ in range(m_count)])

    masks = [plan.replace_mask(np.asarray(gammas[m]), m) for m in range(m_count)]
    report = ExchangeReport(
        counts=[int(mask.sum()) for mask in masks],
        indices=[list(np.nonzero(mask)[0]) for mask in masks],
    )
    if report.total == 0:
        return bn_outputs, report

    parents = tuple(bn_outputs)
    outputs = []
    for m in range(m_count):
        mask = masks[m]
        if not mask.any():
            outputs.append(bn_outputs[m])
            continue
        data = bn_outputs[m].data.copy()
        others = [bn_outputs[m2].data[:, mask] for m2 in range(m_count) if m2 != m]
        data[:, mask] = sum(others) / (m_count - 1)

        def bw(g, m=m, mask=mask):
            parents[m].accumulate_grad(_keep_grad(g, ~mask))
            share = g[:, mask] / (m_count - 1)
            for m2 in range(m_count):
                if m2 == m:
                    continue
                buf = np.zeros(shape)
                buf[:, mask] = share
                parents[m2].accumulate_grad(buf)

        outputs.append(Tensor._make(data, parents, bw, "exchange"))
    return outputs, report


def _keep_grad(g: np.ndarray, keep: np.ndarray) -> np.ndarray:
    buf = np.zeros_like(g)
    buf[:, keep] = g[:, keep]
    return buf


def widen_inputs(inputs: list[np.ndarray]) -> list[np.ndarray]:
    """Tile each input's channels cyclically up to the LCM of all channel counts."""
    counts = [x.shape[-3] for x in inputs]
    if any(c < 1 for c in counts):
        raise ValueError("inputs must have at least one channel")
    target = math.lcm(*counts)
    widened = []
    for x, c in zip(inputs, counts):
        if c == target:
            widened.append(x)
        else:
            reps = (1,) * (x.ndim - 3) + (target // c, 1, 1)
            widened.append(np.tile(x, reps))
    return widened
