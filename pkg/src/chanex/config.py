"""Experiment configuration: a flat key=value format with dotted sections.

Unknown keys and malformed values raise with the offending key named. The
full key list is documented in the README; defaults follow the task family
(batch norm, lambda 5e-3, theta 2e-2 for segmentation; instance norm,
lambda 1e-3, theta 1e-2 for translation).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import TaskSpec
from .net import FUSION_KINDS, SHARING_MODES, STAGES, FusionStrategy


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    strategy: FusionStrategy = field(default_factory=FusionStrategy)
    sharing: str = "shared_conv_private_norm"
    norm_mode: str = "batch"
    lambda_l1: float = 5e-3
    theta: float = 2e-2
    compare_abs: bool = True
    channel_scope: str = "half"
    exchange_enabled: bool = True
    widths: list[int] = field(default_factory=lambda: [24, 24, 24, 24])
    strides: list[int] = field(default_factory=lambda: [2, 1, 1, 1])
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_halve_every: int = 0
    epochs: int = 10
    batch_size: int = 6
    aux_stream_loss: bool = False
    translation_loss: str = "mae"
    eval_train_stats: bool | None = None  # default: instance norm evals on batch stats
    seeds: list[int] = field(default_factory=lambda: [1])
    record_every: int = 10
    task_seed_follows_run: bool = True
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("train.lambda must be >= 0")
        if self.theta <= 0:
            raise ValueError("train.theta must be > 0")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"model.sharing must be one of {SHARING_MODES}")
        if len(self.widths) != len(self.strides):
            raise ValueError("model.widths and model.strides must have equal length")

    def for_seed(self, seed: int) -> "RunConfig":
        """Bind the dataset seed for one run when it follows the run seed."""
        if not self.task_seed_follows_run:
            return self
        return replace(self, task=replace(self.task, seed=seed))


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes", "on"):
        return True
    if text.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


_KEYS = {
    "task.kind": ("task", "kind", str),
    "task.modalities": ("task", "modalities", int),
    "task.classes": ("task", "classes", int),
    "task.out_channels": ("task", "out_channels", int),
    "task.size": ("task", "size", int),
    "task.train_samples": ("task", "train_samples", int),
    "task.val_samples": ("task", "val_samples", int),
    "task.noise": ("task", "noise", float),
    "task.seed": ("task", "seed", int),
    "task.blur": ("task", "blur", int),
    "task.boundary_width": ("task", "boundary_width", int),
    "task.texture_amp": ("task", "texture_amp", float),
    "task.stripes": ("task", "stripes", int),
    "strategy.kind": ("strategy", "kind", str),
    "strategy.stage": ("strategy", "stage", str),
    "strategy.fraction": ("strategy", "fraction", float),
    "strategy.reduction": ("strategy", "reduction", int),
    "strategy.align_weight": ("strategy", "align_weight", float),
    "strategy.align_samples": ("strategy", "align_samples", int),
    "strategy.unimodal_index": ("strategy", "unimodal_index", int),
    "model.sharing": (None, "sharing", str),
    "model.norm": (None, "norm_mode", str),
    "model.widths": (None, "widths", _parse_int_list),
    "model.strides": (None, "strides", _parse_int_list),
    "model.channel_scope": (None, "channel_scope", str),
    "exchange.enabled": (None, "exchange_enabled", _parse_bool),
    "exchange.compare_abs": (None, "compare_abs", _parse_bool),
    "train.lambda": (None, "lambda_l1", float),
    "train.theta": (None, "theta", float),
    "train.lr": (None, "lr", float),
    "train.momentum": (None, "momentum", float),
    "train.weight_decay": (None, "weight_decay", float),
    "train.lr_halve_every": (None, "lr_halve_every", int),
    "train.epochs": (None, "epochs", int),
    "train.batch_size": (None, "batch_size", int),
    "train.aux_stream_loss": (None, "aux_stream_loss", _parse_bool),
    "train.translation_loss": (None, "translation_loss", str),
    "train.eval_train_stats": (None, "eval_train_stats", _parse_bool),
    "run.seeds": (None, "seeds", _parse_int_list),
    "run.record_every": (None, "record_every", int),
    "run.task_seed_follows_run": (None, "task_seed_follows_run", _parse_bool),
    "run.out": (None, "out_dir", str),
    "run.workers": (None, "workers", int),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment; blank lines ignored."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def config_from_pairs(pairs: dict[str, str]) -> RunConfig:
    task_kw: dict[str, object] = {}
    strategy_kw: dict[str, object] = {}
    top_kw: dict[str, object] = {}
    for key, raw in pairs.items():
        if key not in _KEYS:
            raise ValueError(f"unknown config key {key!r}")
        section, name, parser = _KEYS[key]
        try:
            value = parser(raw)
        except ValueError as e:
            raise ValueError(f"bad value for {key!r}: {e}") from None
        if section == "task":
            task_kw[name] = value
        elif section == "strategy":
            strategy_kw[name] = value
        else:
            top_kw[name] = value

    kind = task_kw.get("kind", "toy_segmentation")
    defaults = task_defaults(str(kind))
    for k, v in defaults.items():
        top_kw.setdefault(k, v)
    try:
        cfg = RunConfig(task=TaskSpec(**task_kw), strategy=FusionStrategy(**strategy_kw), **top_kw)
    except TypeError as e:
        raise ValueError(f"invalid configuration: {e}") from None
    return cfg


def task_defaults(kind: str) -> dict[str, object]:
    """Normalization flavour and sparsity defaults per task family."""
    if kind == "toy_translation":
        return {
            "norm_mode": "instance",
            "lambda_l1": 1e-3,
            "theta": 1e-2,
            "widths": [24, 24, 24],
            "strides": [1, 1, 1],
        }
    return {}


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = parse_config_text(Path(path).read_text())
    if overrides:
        pairs.update(overrides)
    return config_from_pairs(pairs)
