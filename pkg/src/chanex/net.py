"""Model assembly: shared-conv multimodal encoders with private normalization,
threshold-gated channel exchange, an ensemble head, and the aggregation /
alignment fusion baselines used for comparison grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exchange import ExchangePlan, ExchangeReport, exchange_forward, partition_channels, widen_inputs
from .norm import NormState, norm_forward, sparsity_penalty
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    mae_loss,
    mse_loss,
    softmax_cross_entropy,
    upsample_nearest,
)

SHARING_MODES = ("shared_conv_private_norm", "unshared", "fully_shared")
FUSION_KINDS = ("cen", "unimodal", "concat", "average", "align", "attention",
                "random_exchange", "discard")
STAGES = ("early", "middle", "late", "all")


@dataclass
class LayerSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class FusionStrategy:
    """How the modality streams are combined.

    `stage` applies to the staged baselines (concat/average/align/attention);
    `fraction` to random_exchange; `align_weight` scales the MMD penalty.
    """

    kind: str = "cen"
    stage: str = "all"
    fraction: float = 0.3
    reduction: int = 16
    align_weight: float = 1.0
    align_samples: int = 256
    unimodal_index: int = 0

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown fusion stage {self.stage!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0,1]")


@dataclass
class ForwardResult:
    streams: list[Tensor]
    ensemble: Tensor
    alpha: Tensor
    reports: list[ExchangeReport]
    align_penalty: Tensor | None = None
    bn_tensors: list[list[Tensor]] | None = None
    exchanged: list[list[Tensor]] | None = None


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> Tensor:
    std = float(np.sqrt(2.0 / (cin * k * k)))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)


class CenModel:
    """Multimodal encoder-ensemble model.

    Convolutions are shared across modalities (one physical parameter copy)
    while every modality keeps its own normalization layers; channel exchange
    runs on the normalized maps at every encoder layer. `sharing` selects the
    ablation variants: `unshared` duplicates the convolutions per modality,
    `fully_shared` additionally shares the normalization state.
    """

    def __init__(
        self,
        modalities: int,
        in_channels: int,
        layers: list[LayerSpec],
        out_channels: int,
        *,
        sharing: str = "shared_conv_private_norm",
        norm_mode: str = "batch",
        strategy: FusionStrategy | None = None,
        theta: float = 2e-2,
        compare_abs: bool = True,
        exchange_enabled: bool = True,
        channel_scope: str = "half",
        head_upsample: int = 1,
        eps: float = 1e-5,
        stat_momentum: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        if sharing not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode {sharing!r}")
        if channel_scope not in ("half", "all"):
            raise ValueError(f"channel_scope must be 'half' or 'all', got {channel_scope!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.M = modalities
        self.in_channels = in_channels
        self.layer_specs = list(layers)
        self.out_channels = out_channels
        self.sharing = sharing
        self.norm_mode = norm_mode
        self.strategy = strategy or FusionStrategy()
        self.head_upsample = head_upsample
        self.channel_scope = channel_scope

        uses_subparts = self.strategy.kind in ("cen", "random_exchange", "discard")
        if uses_subparts:
            for spec in layers:
                if spec.channels % modalities != 0:
                    raise ValueError(
                        f"layer width {spec.channels} not divisible by {modalities} modalities"
                    )

        norm_copies = 1 if sharing == "fully_shared" else modalities
        conv_copies = modalities if sharing == "unshared" else 1

        self.convs: list[list[tuple[Tensor, Tensor]]] = []
        self.norms: list[list[NormState]] = []
        self.plans: list[ExchangePlan] = []
        # optional constant maps added after a conv, keyed (layer, modality);
        # produced by the zero-gamma rewiring construction, never trained
        self.conv_offsets: dict[tuple[int, int], np.ndarray] = {}

        cin = in_channels
        for spec in layers:
            c = spec.channels
            self.convs.append(
                [(_he_conv(rng, c, cin, spec.kernel), Tensor(np.zeros(c), requires_grad=True))
                 for _ in range(conv_copies)]
            )
            if uses_subparts or (modalities > 1 and c % modalities == 0):
                if channel_scope == "all":
                    plan = ExchangePlan.all_channel(c, modalities, theta, compare_abs=compare_abs)
                else:
                    plan = ExchangePlan.partitioned(c, modalities, theta, compare_abs=compare_abs)
            else:
                plan = ExchangePlan(theta=theta, subparts=[(0, 0)] * modalities,
                                    compare_abs=compare_abs, enabled=False)
            plan.enabled = (
                exchange_enabled and modalities > 1 and self.strategy.kind == "cen"
            )
            self.plans.append(plan)
            masks = [plan.eligible_mask(m, c) if norm_copies > 1 else np.zeros(c, dtype=bool)
                     for m in range(norm_copies)]
            self.norms.append(
                [NormState.create(c, mode=norm_mode, mask=masks[m], eps=eps,
                                  stat_momentum=stat_momentum)
                 for m in range(norm_copies)]
            )
            cin = c

        self.head = (_he_conv(rng, out_channels, cin, 1), Tensor(np.zeros(out_channels), requires_grad=True))
        self.ensemble_logits = Tensor(np.zeros(modalities), requires_grad=True)

        self.fusion_layers = self._stage_layers(self.strategy.stage)
        self.fusion_params: dict[int, dict[str, Tensor]] = {}
        if self.strategy.kind in ("concat", "attention", "align"):
            for l in self.fusion_layers:
                self.fusion_params[l] = self._make_fusion_params(rng, self.layer_specs[l].channels)

    def _stage_layers(self, stage: str) -> list[int]:
        last = len(self.layer_specs) - 1
        if stage == "early":
            return [0]
        if stage == "middle":
            return [last // 2]
        if stage == "late":
            return [last]
        return list(range(len(self.layer_specs)))

    def _make_fusion_params(self, rng, c: int) -> dict[str, Tensor]:
        kind = self.strategy.kind
        mc = self.M * c
        if kind == "concat":
            return {"weight": _he_conv(rng, c, mc, 1), "bias": Tensor(np.zeros(c), requires_grad=True)}
        if kind == "attention":
            red = self.strategy.reduction
            if mc % red != 0:
                raise ValueError(f"{mc} fused channels not divisible by reduction {red}")
            return {
                "w_down": _he_conv(rng, mc // red, mc, 1),
                "b_down": Tensor(np.zeros(mc // red), requires_grad=True),
                "w_up": _he_conv(rng, mc, mc // red, 1),
                "b_up": Tensor(np.zeros(mc), requires_grad=True),
                "w_out": _he_conv(rng, c, mc, 1),
                "b_out": Tensor(np.zeros(c), requires_grad=True),
            }
        if kind == "align":
            proj = max(c // 4, 1)
            return {"weight": _he_conv(rng, proj, c, 1), "bias": Tensor(np.zeros(proj), requires_grad=True)}
        return {}

    # -- parameter access -----------------------------------------------------

    def _conv(self, l: int, m: int) -> tuple[Tensor, Tensor]:
        copies = self.convs[l]
        return copies[m if len(copies) > 1 else 0]

    def _norm(self, l: int, m: int) -> NormState:
        copies = self.norms[l]
        return copies[m if len(copies) > 1 else 0]

    def norm_states(self) -> list[NormState]:
        return [s for layer in self.norms for s in layer]

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for l, copies in enumerate(self.convs):
            for m, (w, b) in enumerate(copies):
                tag = f"encoder.{l}.conv" if len(copies) == 1 else f"encoder.{l}.conv{m}"
                params[f"{tag}.weight"] = w
                params[f"{tag}.bias"] = b
        for l, copies in enumerate(self.norms):
            for m, s in enumerate(copies):
                tag = f"encoder.{l}.norm" if len(copies) == 1 else f"encoder.{l}.norm{m}"
                params[f"{tag}.gamma"] = s.gamma
                params[f"{tag}.beta"] = s.beta
        params["head.conv.weight"] = self.head[0]
        params["head.conv.bias"] = self.head[1]
        params["ensemble.logits"] = self.ensemble_logits
        for l, fp in sorted(self.fusion_params.items()):
            for name, t in fp.items():
                params[f"fusion.{l}.{name}"] = t
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_state(self) -> dict[str, np.ndarray]:
        """Parameters plus normalization buffers (masks stored as 0/1)."""
        state = {name: t.data for name, t in self.named_parameters().items()}
        for l, copies in enumerate(self.norms):
            for m, s in enumerate(copies):
                tag = f"encoder.{l}.norm" if len(copies) == 1 else f"encoder.{l}.norm{m}"
                state[f"{tag}.running_mean"] = s.running_mean
                state[f"{tag}.running_var"] = s.running_var
                state[f"{tag}.sparsity_mask"] = s.sparsity_mask.astype(np.float64)
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_state()
        missing = set(own) - set(state)
        if missing:
            raise ValueError(f"checkpoint missing keys: {sorted(missing)[:3]}...")
        masks = {}
        for l, copies in enumerate(self.norms):
            for m, s in enumerate(copies):
                tag = f"encoder.{l}.norm" if len(copies) == 1 else f"encoder.{l}.norm{m}"
                masks[f"{tag}.sparsity_mask"] = s
        for name, arr in state.items():
            if name not in own:
                raise ValueError(f"unexpected checkpoint key {name!r}")
            if own[name].shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {name}: {own[name].shape} vs {arr.shape}")
            if name in masks:
                masks[name].sparsity_mask = np.asarray(arr) != 0.0
            else:
                own[name][...] = arr

    def gammas(self, l: int) -> list[np.ndarray]:
        return [self._norm(l, m).gamma.data for m in range(self.M)]

    # -- forward ----------------------------------------------------------------

    def forward(
        self,
        inputs: list[np.ndarray],
        train: bool = True,
        rng: np.random.Generator | None = None,
        collect: bool = False,
    ) -> ForwardResult:
        if len(inputs) != self.M:
            raise ValueError(f"model expects {self.M} modalities, got {len(inputs)}")
        xs = [Tensor(a) for a in widen_inputs(list(inputs))]
        kind = self.strategy.kind
        reports: list[ExchangeReport] = []
        align_terms: list[Tensor] = []
        bn_tensors: list[list[Tensor]] = [] if collect else None
        exchanged: list[list[Tensor]] = [] if collect else None

        for l, spec in enumerate(self.layer_specs):
            zs = []
            for m in range(self.M):
                w, b = self._conv(l, m)
                z = conv2d(xs[m], w, b, stride=spec.stride, padding=spec.padding)
                off = self.conv_offsets.get((l, m))
                if off is not None:
                    z = z + Tensor(off)
                zs.append(z)
            ys = [norm_forward(zs[m], self._norm(l, m), train) for m in range(self.M)]
            if collect:
                bn_tensors.append(list(ys))

            if self.M > 1:
                if kind == "cen" and self.plans[l].enabled:
                    ys, rep = exchange_forward(ys, self.gammas(l), self.plans[l])
                    reports.append(rep)
                elif kind == "random_exchange":
                    ys = random_exchange(ys, self.strategy.fraction, self.plans[l].subparts, rng)
                elif kind == "discard":
                    ys, rep = discard_channels(ys, self.gammas(l), self.plans[l])
                    reports.append(rep)
            if collect:
                exchanged.append(list(ys))

            acts = [y.relu() for y in ys]
            if self.M > 1 and l in self.fusion_layers:
                if kind == "concat":
                    fp = self.fusion_params[l]
                    acts = [concat_fusion(acts, fp["weight"], fp["bias"])] * self.M
                elif kind == "average":
                    acts = [average_fusion(acts)] * self.M
                elif kind == "attention":
                    fp = self.fusion_params[l]
                    acts = [attention_fusion(acts, fp, self.strategy.reduction)] * self.M
                elif kind == "align":
                    align_terms.append(self._align_term(acts, l, rng))
            xs = acts

        outs = []
        w, b = self.head
        for m in range(self.M):
            o = conv2d(xs[m], w, b)
            off = self.conv_offsets.get((len(self.layer_specs), m))
            if off is not None:
                o = o + Tensor(off)
            if self.head_upsample > 1:
                o = upsample_nearest(o, self.head_upsample)
            outs.append(o)

        alpha = self.ensemble_logits.softmax()
        ensemble = outs[0] * alpha.element(0)
        for m in range(1, self.M):
            ensemble = ensemble + outs[m] * alpha.element(m)

        align_penalty = None
        if align_terms:
            align_penalty = align_terms[0]
            for t in align_terms[1:]:
                align_penalty = align_penalty + t
            align_penalty = align_penalty * self.strategy.align_weight
        return ForwardResult(
            streams=outs,
            ensemble=ensemble,
            alpha=alpha,
            reports=reports,
            align_penalty=align_penalty,
            bn_tensors=bn_tensors,
            exchanged=exchanged,
        )

    def _align_term(self, acts: list[Tensor], l: int, rng) -> Tensor:
        fp = self.fusion_params[l]
        flat = []
        for a in acts:
            p = conv2d(a, fp["weight"], fp["bias"])
            n, c, h, w = p.shape
            flat.append(p.transpose((0, 2, 3, 1)).reshape(n * h * w, c))
        # subsample pixels for the pairwise kernel sums (deterministic per step)
        limit = self.strategy.align_samples
        total = flat[0].shape[0]
        if total > limit:
            idx = (rng or np.random.default_rng(0)).choice(total, size=limit, replace=False)
            flat = [_take_rows(f, np.sort(idx)) for f in flat]
        term = None
        bws = median_bandwidths(flat[0].data, flat[1].data)
        for m in range(1, self.M):
            t = mmd_alignment(flat[0], flat[m], bws)
            term = t if term is None else term + t
        return term


def build_cen(
    modalities: int,
    in_channels: int,
    layers: list[LayerSpec],
    out_channels: int,
    **kwargs,
) -> CenModel:
    """Construct a model; see CenModel for the sharing/strategy knobs."""
    return CenModel(modalities, in_channels, layers, out_channels, **kwargs)


def _take_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    a = t

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a.accumulate_grad(buf)

    return Tensor._make(a.data[idx], (a,), bw, "take_rows")


# -- fusion operations -----------------------------------------------------------


def concat_fusion(features: list[Tensor], weight: Tensor, bias: Tensor) -> Tensor:
    """Channel-stack the streams and map back to C channels with a 1x1 conv."""
    shape = features[0].data.shape
    for f in features[1:]:
        if f.data.shape[2:] != shape[2:]:
            raise ValueError("concat fusion requires matching spatial dims")
    return conv2d(concat_channels(features), weight, bias)


def average_fusion(features: list[Tensor]) -> Tensor:
    """Elementwise mean of the streams."""
    shape = features[0].data.shape
    for f in features[1:]:
        if f.data.shape != shape:
            raise ValueError("average fusion requires matching shapes")
    out = features[0]
    for f in features[1:]:
        out = out + f
    return out * (1.0 / len(features))


def attention_fusion(features: list[Tensor], params: dict[str, Tensor], reduction: int = 16) -> Tensor:
    """SSMA-style gating: bottleneck the stacked features, sigmoid-gate them,
    then project back to C channels with a 1x1 conv."""
    z = concat_channels(features)
    mc = z.data.shape[1]
    if mc % reduction != 0:
        raise ValueError(f"{mc} fused channels not divisible by reduction {reduction}")
    g = conv2d(z, params["w_down"], params["b_down"]).relu()
    g = conv2d(g, params["w_up"], params["b_up"]).sigmoid()
    return conv2d(z * g, params["w_out"], params["b_out"])


def median_bandwidths(a: np.ndarray, b: np.ndarray, count: int = 11) -> np.ndarray:
    """Geometric x2 ladder of RBF bandwidths centred on the median pairwise
    squared distance of the joint sample."""
    joint = np.concatenate([a, b], axis=0)
    d = _sqdist(joint, joint)
    upper = d[np.triu_indices(joint.shape[0], k=1)]
    med = float(np.median(upper)) if upper.size else 1.0
    if med <= 0.0:
        med = 1.0
    return med * (2.0 ** (np.arange(count) - count // 2))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def mmd_alignment(features_a: Tensor, features_b: Tensor, bandwidths: np.ndarray) -> Tensor:
    """Unbiased multi-kernel squared MMD between two [N,D] sample sets."""
    A, B = features_a.data, features_b.data
    n, m = A.shape[0], B.shape[0]
    if n < 2 or m < 2:
        raise ValueError("MMD needs at least 2 samples per set")
    daa, dbb, dab = _sqdist(A, A), _sqdist(B, B), _sqdist(A, B)
    kaa = np.zeros_like(daa)
    kbb = np.zeros_like(dbb)
    kab = np.zeros_like(dab)
    total = 0.0
    for bw in bandwidths:
        ka, kb, kx = np.exp(-daa / bw), np.exp(-dbb / bw), np.exp(-dab / bw)
        total += (ka.sum() - n) / (n * (n - 1))
        total += (kb.sum() - m) / (m * (m - 1))
        total -= 2.0 * kx.mean()
        kaa += ka / bw
        kbb += kb / bw
        kab += kx / bw
    np.fill_diagonal(kaa, 0.0)
    np.fill_diagonal(kbb, 0.0)
    ta, tb = features_a, features_b

    def bw_fn(g):
        # d/dx exp(-||x-y||^2 / bw) = k * (-2/bw)(x - y); weights kaa/kab carry 1/bw
        da = (-4.0 / (n * (n - 1))) * (kaa.sum(axis=1)[:, None] * A - kaa @ A)
        da += (4.0 / (n * m)) * (kab.sum(axis=1)[:, None] * A - kab @ B)
        db = (-4.0 / (m * (m - 1))) * (kbb.sum(axis=1)[:, None] * B - kbb @ B)
        db += (4.0 / (n * m)) * (kab.sum(axis=0)[:, None] * B - kab.T @ A)
        ta.accumulate_grad(g * da)
        tb.accumulate_grad(g * db)

    return Tensor._make(np.asarray(total), (ta, tb), bw_fn, "mmd")


def random_exchange(
    bn_outputs: list[Tensor],
    fraction: float,
    subparts: list[tuple[int, int]],
    rng: np.random.Generator | None,
) -> list[Tensor]:
    """Swap a uniformly random channel subset across modalities.

    Within each sub-part a fraction of channels is chosen and rotated
    cyclically across the streams (a swap for M=2), reseeded per step.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0,1]")
    m_count = len(bn_outputs)
    if fraction == 0.0 or m_count < 2:
        return bn_outputs
    if rng is None:
        rng = np.random.default_rng(0)
    channels = bn_outputs[0].data.shape[1]
    chosen: list[np.ndarray] = []
    for lo, hi in subparts:
        k = int(round(fraction * (hi - lo)))
        pick = rng.choice(hi - lo, size=k, replace=False) + lo if k else np.empty(0, dtype=int)
        chosen.append(np.sort(pick))
    swap = np.unique(np.concatenate(chosen)) if chosen else np.empty(0, dtype=int)
    if swap.size == 0:
        return bn_outputs

    parents = tuple(bn_outputs)
    outputs = []
    for m in range(m_count):
        src = (m + 1) % m_count
        data = bn_outputs[m].data.copy()
        data[:, swap] = bn_outputs[src].data[:, swap]

        def bw(g, m=m, src=src):
            keep = np.ones(channels, dtype=bool)
            keep[swap] = False
            buf = np.zeros_like(g)
            buf[:, keep] = g[:, keep]
            parents[m].accumulate_grad(buf)
            buf2 = np.zeros_like(g)
            buf2[:, swap] = g[:, swap]
            parents[src].accumulate_grad(buf2)

        outputs.append(Tensor._make(data, parents, bw, "random_exchange"))
    return outputs


def discard_channels(
    bn_outputs: list[Tensor], gammas: list[np.ndarray], plan: ExchangePlan
) -> tuple[list[Tensor], ExchangeReport]:
    """Zero sub-threshold channels instead of replacing them."""
    m_count = len(bn_outputs)
    masks = [plan.replace_mask(np.asarray(gammas[m]), m) for m in range(m_count)]
    report = ExchangeReport(
        counts=[int(mask.sum()) for mask in masks],
        indices=[list(np.nonzero(mask)[0]) for mask in masks],
    )
    if report.total == 0:
        return bn_outputs, report
    outputs = []
    for m in range(m_count):
        mask = masks[m]
        if not mask.any():
            outputs.append(bn_outputs[m])
            continue
        keep = (~mask).astype(np.float64)[None, :, None, None]
        outputs.append(bn_outputs[m] * Tensor(keep))
    return outputs, report


# -- losses and bookkeeping ---------------------------------------------------------


def segmentation_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of [N,K,H,W] logits against an integer [N,H,W] label map."""
    n, k, h, w = logits.shape
    flat = logits.transpose((0, 2, 3, 1)).reshape(n * h * w, k)
    return softmax_cross_entropy(flat, labels.reshape(-1))


def translation_loss(pred: Tensor, target: np.ndarray, kind: str = "mae") -> Tensor:
    t = Tensor(target)
    return mae_loss(pred, t) if kind == "mae" else mse_loss(pred, t)


def cen_loss(
    result: ForwardResult,
    targets: np.ndarray,
    states: list[NormState],
    lam: float,
    task_loss,
    aux_streams: bool = False,
) -> Tensor:
    """Task loss on the ensemble output plus the L1 scaling-factor penalty.

    With `aux_streams` the per-stream losses are averaged in as well (training
    stability option; off by default).
    """
    loss = task_loss(result.ensemble, targets)
    if aux_streams:
        aux = task_loss(result.streams[0], targets)
        for s in result.streams[1:]:
            aux = aux + task_loss(s, targets)
        loss = loss + aux * (1.0 / len(result.streams))
    loss = loss + sparsity_penalty(states, lam)
    if result.align_penalty is not None:
        loss = loss + result.align_penalty
    return loss


def parameter_counts(model: CenModel) -> dict[str, int]:
    """Parameter totals broken down by role; fusion counts the baseline-only
    aggregation parameters (zero for exchange-based fusion)."""
    counts = {"conv": 0, "norm": 0, "head": 0, "ensemble": 0, "fusion": 0}
    for name, t in model.named_parameters().items():
        if name.startswith("fusion."):
            counts["fusion"] += t.size
        elif ".norm" in name:
            counts["norm"] += t.size
        elif name.startswith("head."):
            counts["head"] += t.size
        elif name.startswith("ensemble."):
            counts["ensemble"] += t.size
        else:
            counts["conv"] += t.size
    counts["total"] = sum(counts.values())
    return counts
