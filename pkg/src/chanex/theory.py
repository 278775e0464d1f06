"""Numerical checks of the zero-attraction property of L1-penalized scaling
factors, plus instrumentation of their trajectories during training and the
constructive rewiring argument for dead channels.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .net import CenModel
from .norm import NormState
from .tensor import Tensor


def gaussian_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass
class AttractionQuery:
    """Probability query: how likely is gamma = 0 to be a local minimum given
    the penalty weight and the magnitude of the loss gradient w.r.t. the
    normalized activation."""

    lam: float
    grad_magnitude: float
    samples: int = 100_000

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


def attraction_probability_theory(q: AttractionQuery) -> float:
    """Closed form 2*Phi(lambda/|g|) - 1 with Phi the standard normal CDF."""
    if q.grad_magnitude == 0:
        raise ValueError("grad_magnitude must be nonzero (limit probability is 1)")
    return 2.0 * gaussian_cdf(q.lam / abs(q.grad_magnitude)) - 1.0


def attraction_probability_empirical(q: AttractionQuery, rng: np.random.Generator | None = None) -> float:
    """Monte-Carlo frequency of the both-one-sided-gradients-opposing event.

    Draws the normalized activation as z ~ N(0,1) and counts draws where
    g*z + lambda > 0 and g*z - lambda < 0 simultaneously.
    """
    if q.samples < 1000:
        raise ValueError("need at least 1000 samples for a stable frequency")
    if rng is None:
        rng = np.random.default_rng(0)
    z = rng.standard_normal(q.samples)
    gz = q.grad_magnitude * z
    hits = (gz + q.lam > 0) & (gz - q.lam < 0)
    return float(hits.mean())


# -- gamma trajectory instrumentation ---------------------------------------------


@dataclass
class GammaTrace:
    """Time series of the penalty-masked scaling factors over a training run."""

    record_every: int
    steps: list[int] = field(default_factory=list)
    # (layer, modality) -> list of masked-gamma snapshots, one per recorded step
    series: dict[tuple[int, int], list[np.ndarray]] = field(default_factory=dict)
    channel_ids: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: CenModel, record_every: int) -> "GammaTrace":
        trace = cls(record_every=record_every)
        for l, layer_states in enumerate(model.norms):
            for m, s in enumerate(layer_states):
                trace.channel_ids[(l, m)] = np.nonzero(s.sparsity_mask)[0]
                trace.series[(l, m)] = []
        return trace

    def maybe_record(self, step: int, model: CenModel) -> None:
        if self.record_every > 0 and step % self.record_every == 0:
            self.record(step, model)

    def record(self, step: int, model: CenModel) -> None:
        self.steps.append(step)
        for l, layer_states in enumerate(model.norms):
            for m, s in enumerate(layer_states):
                ids = self.channel_ids[(l, m)]
                self.series[(l, m)].append(s.gamma.data[ids].copy())

    def __len__(self) -> int:
        return len(self.steps)

    def recovery(self, theta_low: float = 1e-3, theta: float = 2e-2) -> "RecoveryStats":
        """How often a channel that collapsed below theta_low later climbs
        back above theta before the run ends."""
        events = 0
        recovered = 0
        for key, snaps in self.series.items():
            if not snaps:
                continue
            mat = np.abs(np.stack(snaps))  # [T, channels]
            for c in range(mat.shape[1]):
                lows = np.nonzero(mat[:, c] < theta_low)[0]
                if lows.size == 0:
                    continue
                events += 1
                if np.any(mat[lows[0]:, c] > theta):
                    recovered += 1
        return RecoveryStats(events=events, recovered=recovered)

    def rows(self) -> list[tuple[int, int, int, int, float]]:
        """Flatten to (step, layer, modality, channel, gamma) rows."""
        out = []
        for (l, m), snaps in sorted(self.series.items()):
            ids = self.channel_ids[(l, m)]
            for t, snap in zip(self.steps, snaps):
                for c, v in zip(ids, snap):
                    out.append((t, l, m, int(c), float(v)))
        return out


@dataclass
class RecoveryStats:
    events: int
    recovered: int

    @property
    def rate(self) -> float | None:
        """Fraction recovered, or None when no channel ever collapsed."""
        if self.events == 0:
            return None
        return self.recovered / self.events


# -- constructive rewiring for dead channels ------------------------------------------


def corollary_construct(
    model: CenModel, m: int, layer: int, channel: int, input_hw: tuple[int, int]
) -> CenModel:
    """Rewire the successor convolution of an exactly-dead channel.

    For an unshared model with gamma == 0 at (m, layer, channel), the channel's
    normalized output is the constant beta, and after ReLU a constant map. The
    returned copy zeroes the successor conv weights reading that channel and
    folds the constant contribution into a per-position offset map, so outputs
    are preserved for every input of the given spatial size.
    """
    if model.sharing != "unshared":
        raise ValueError("construction requires an unshared model (private convolutions)")
    if layer >= len(model.layer_specs) - 1:
        raise ValueError("target layer must have a successor convolution in the encoder")
    state = model._norm(layer, m)
    if state.gamma.data[channel] != 0.0:
        raise ValueError(f"gamma at (m={m}, l={layer}, c={channel}) is not exactly 0")

    new = copy.deepcopy(model)
    const = max(float(state.beta.data[channel]), 0.0)  # ReLU of the constant map

    # spatial size of layer `layer`'s output for the declared input size
    h, w = input_hw
    for spec in model.layer_specs[: layer + 1]:
        h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1

    nxt = model.layer_specs[layer + 1]
    weight, _ = new._conv(layer + 1, m)
    if const != 0.0:
        from .tensor import conv2d

        const_map = Tensor(np.full((1, 1, h, w), const))
        tap = Tensor(weight.data[:, channel : channel + 1].copy())
        zero_bias = Tensor(np.zeros(weight.data.shape[0]))
        offset = conv2d(const_map, tap, zero_bias, stride=nxt.stride, padding=nxt.padding).data
        key = (layer + 1, m)
        if key in new.conv_offsets:
            new.conv_offsets[key] = new.conv_offsets[key] + offset
        else:
            new.conv_offsets[key] = offset
    weight.data[:, channel] = 0.0
    return new


# -- per-channel ownership proportions ---------------------------------------------------


def gamma_proportion_report(states: list[NormState]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel share |gamma_m| / sum_m' |gamma_m'| across modalities.

    Returns (proportions [M, C], degenerate [C]); channels whose denominators
    are all zero are reported as uniform 1/M and flagged degenerate.
    """
    if len(states) < 2:
        raise ValueError("proportions need at least 2 modalities")
    gam = np.abs(np.stack([s.gamma.data for s in states]))  # [M, C]
    denom = gam.sum(axis=0)
    degenerate = denom == 0.0
    safe = np.where(degenerate, 1.0, denom)
    props = gam / safe
    props[:, degenerate] = 1.0 / len(states)
    return props, degenerate
