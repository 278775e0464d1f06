"""Experiment harness: seeded training runs, ablation grids, sensitivity
sweeps, modality scaling, and CSV/report emission."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Dataset, TaskSpec, generate, mean_accuracy, mean_iou, pixel_accuracy
from .net import (
    CenModel,
    FusionStrategy,
    LayerSpec,
    cen_loss,
    parameter_counts,
    segmentation_cross_entropy,
    translation_loss,
)
from .tensor import OptimState, sgd_step, zero_grad
from .theory import GammaTrace


def build_model(cfg: RunConfig, rng: np.random.Generator, input_channels: list[int]) -> CenModel:
    """Instantiate the model a config describes, given the per-modality input
    channel counts of the dataset."""
    unimodal = cfg.strategy.kind == "unimodal"
    modalities = 1 if unimodal else cfg.task.modalities
    if unimodal:
        cin = input_channels[cfg.strategy.unimodal_index]
    else:
        cin = math.lcm(*input_channels)
    layers = [LayerSpec(channels=c, stride=s) for c, s in zip(cfg.widths, cfg.strides)]
    if cfg.task.kind == "toy_segmentation":
        out_channels = cfg.task.classes
    else:
        out_channels = cfg.task.out_channels
    head_upsample = int(np.prod(cfg.strides))
    eval_batch_stats = cfg.eval_train_stats
    if eval_batch_stats is None:
        eval_batch_stats = cfg.norm_mode == "instance"
    model = CenModel(
        modalities,
        cin,
        layers,
        out_channels,
        sharing=cfg.sharing,
        norm_mode=cfg.norm_mode,
        strategy=cfg.strategy,
        theta=cfg.theta,
        compare_abs=cfg.compare_abs,
        exchange_enabled=cfg.exchange_enabled,
        channel_scope=cfg.channel_scope,
        head_upsample=head_upsample,
        rng=rng,
    )
    model.eval_batch_stats = eval_batch_stats
    return model


def _select_inputs(cfg: RunConfig, xs: list[np.ndarray]) -> list[np.ndarray]:
    if cfg.strategy.kind == "unimodal":
        return [xs[cfg.strategy.unimodal_index]]
    return xs


def _task_loss(cfg: RunConfig):
    if cfg.task.kind == "toy_segmentation":
        return segmentation_cross_entropy
    return lambda pred, target: translation_loss(pred, target, cfg.translation_loss)


def evaluate(model: CenModel, ds: Dataset, cfg: RunConfig) -> dict[str, float]:
    """Per-stream and ensemble metrics over a dataset split."""
    seg = cfg.task.kind == "toy_segmentation"
    n = len(ds)
    stream_preds = [[] for _ in range(model.M)]
    ens_preds = []
    rng = np.random.default_rng(0)  # only consumed by the random-exchange baseline
    use_batch = getattr(model, "eval_batch_stats", False)
    for lo in range(0, n, cfg.batch_size):
        idx = np.arange(lo, min(lo + cfg.batch_size, n))
        xs, _ = ds.batch(idx)
        result = model.forward(_select_inputs(cfg, xs), train=use_batch, rng=rng)
        if use_batch:
            pass  # batch-statistics eval: running stats were updated; harmless at end of training
        for m, s in enumerate(result.streams):
            stream_preds[m].append(s.data)
        ens_preds.append(result.ensemble.data)

    metrics: dict[str, float] = {}

    def add(prefix: str, out: np.ndarray):
        if seg:
            pred = np.argmax(out, axis=1)
            truth = ds.targets
            metrics[f"{prefix}_iou"] = mean_iou(pred, truth, cfg.task.classes)
            metrics[f"{prefix}_pixel_acc"] = pixel_accuracy(pred, truth, cfg.task.classes)
            metrics[f"{prefix}_mean_acc"] = mean_accuracy(pred, truth, cfg.task.classes)
        else:
            diff = out - ds.targets
            metrics[f"{prefix}_mae_x10"] = 10.0 * float(np.mean(np.abs(diff)))
            metrics[f"{prefix}_mse_x10"] = 10.0 * float(np.mean(diff * diff))

    for m in range(model.M):
        add(f"stream{m}", np.concatenate(stream_preds[m]))
    add("ensemble", np.concatenate(ens_preds))
    return metrics


def headline_metric(cfg: RunConfig) -> tuple[str, int]:
    """Summary metric key and direction (+1 higher-better, -1 lower-better)."""
    if cfg.task.kind == "toy_segmentation":
        return "ensemble_iou", 1
    return "ensemble_mae_x10", -1


@dataclass
class SeedResult:
    seed: int
    final: dict[str, float]
    epochs: list[dict[str, float]]
    exchange_rows: list[tuple[int, int, int, int, str]]
    gamma_rows: list[tuple[int, int, int, int, float]]
    params: dict[str, int]
    subthreshold_masked: int
    masked_total: int
    replaced_fraction: float
    recovery_events: int
    recovery_recovered: int
    model: CenModel | None = None


def train_single(cfg: RunConfig, seed: int, keep_model: bool = False) -> SeedResult:
    """One seeded training run; deterministic given (config, seed)."""
    cfg = cfg.for_seed(seed)
    train_ds, val_ds = generate(cfg.task)
    ss = np.random.SeedSequence([seed, 0xC4A17])
    init_ss, shuffle_ss, step_ss = ss.spawn(3)
    model = build_model(cfg, np.random.default_rng(init_ss),
                        [x.shape[1] for x in train_ds.inputs])
    params = model.parameters()
    opt = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    trace = GammaTrace.for_model(model, cfg.record_every)
    loss_fn = _task_loss(cfg)
    states = model.norm_states()
    shuffle_rng = np.random.default_rng(shuffle_ss)
    step_root = np.random.default_rng(step_ss).integers(0, 2**31)

    exchange_rows: list[tuple[int, int, int, int, str]] = []
    epoch_rows: list[dict[str, float]] = []
    step = 0
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        if cfg.lr_halve_every > 0:
            opt.lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            xs, ys = train_ds.batch(idx)
            step_rng = np.random.default_rng([step_root, step])
            result = model.forward(_select_inputs(cfg, xs), train=True, rng=step_rng)
            loss = cen_loss(result, ys, states, cfg.lambda_l1, loss_fn, cfg.aux_stream_loss)
            zero_grad(params)
            loss.backward()
            sgd_step(params, opt)
            epoch_loss += loss.item()
            batches += 1
            step += 1
            trace.maybe_record(step, model)
            if cfg.record_every > 0 and step % cfg.record_every == 0:
                for layer, rep in enumerate(result.reports):
                    for m, (count, chans) in enumerate(zip(rep.counts, rep.indices)):
                        exchange_rows.append(
                            (step, layer, m, count, "|".join(str(c) for c in chans))
                        )
        row = {"epoch": epoch, "train_loss": epoch_loss / max(batches, 1)}
        row.update(evaluate(model, val_ds, cfg))
        epoch_rows.append(row)

    final = dict(epoch_rows[-1])
    final.pop("epoch")
    sub, total = _masked_subthreshold(model, cfg.theta)
    rec = trace.recovery(theta=cfg.theta)
    return SeedResult(
        seed=seed,
        final=final,
        epochs=epoch_rows,
        exchange_rows=exchange_rows,
        gamma_rows=trace.rows(),
        params=parameter_counts(model),
        subthreshold_masked=sub,
        masked_total=total,
        replaced_fraction=sub / total if total else 0.0,
        recovery_events=rec.events,
        recovery_recovered=rec.recovered,
        model=model if keep_model else None,
    )


def _masked_subthreshold(model: CenModel, theta: float) -> tuple[int, int]:
    sub = total = 0
    for layer_states in model.norms:
        for s in layer_states:
            vals = np.abs(s.gamma.data[s.sparsity_mask])
            total += vals.size
            sub += int((vals <= theta).sum())
    return sub, total


# -- run/grid/sweep/scale drivers -------------------------------------------------


@dataclass
class RunSummary:
    config: RunConfig
    seeds: list[SeedResult]
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.seeds and not self.means:
            keys = self.seeds[0].final.keys()
            for k in keys:
                vals = np.array([s.final[k] for s in self.seeds])
                self.means[k] = float(vals.mean())
                self.stds[k] = float(vals.std())


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _write_seed_outputs(out_dir: Path, cfg: RunConfig, res: SeedResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_keys = [k for k in res.epochs[0] if k != "epoch"]
    _write_csv(
        out_dir / "metrics.csv",
        ["epoch"] + metric_keys,
        [[row["epoch"]] + [repr(row[k]) for k in metric_keys] for row in res.epochs],
    )
    _write_csv(
        out_dir / "exchange.csv",
        ["step", "layer", "modality", "replaced_count", "channel_indices"],
        res.exchange_rows,
    )
    _write_csv(
        out_dir / "gammas.csv",
        ["step", "layer", "modality", "channel", "gamma"],
        [(s, l, m, c, repr(g)) for s, l, m, c, g in res.gamma_rows],
    )
    with open(out_dir / "params.txt", "w") as f:
        for name in ("total", "conv", "norm", "head", "ensemble", "fusion"):
            f.write(f"{name} {res.params[name]}\n")
    if res.model is not None:
        save_checkpoint(out_dir / "checkpoint.txt", res.model.named_state())


def _train_seed_worker(cfg: RunConfig, seed: int) -> SeedResult:
    return train_single(cfg, seed)


def run(cfg: RunConfig, out_dir: str | Path | None = None, keep_models: bool = False) -> RunSummary:
    """Train every seed of a config, write per-seed files and a summary."""
    if cfg.workers > 1 and not keep_models:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train_seed_worker, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [train_single(cfg, seed, keep_model=keep_models) for seed in cfg.seeds]
    summary = RunSummary(config=cfg, seeds=results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for res in results:
            _write_seed_outputs(out / f"seed_{res.seed}", cfg, res)
        rows = [
            (k, repr(summary.means[k]), repr(summary.stds[k]), len(results))
            for k in sorted(summary.means)
        ]
        _write_csv(out / "summary.csv", ["metric", "mean", "std", "seeds"], rows)
    return summary


def _same_task(a: RunConfig, b: RunConfig) -> bool:
    return asdict(a.task) == asdict(b.task) and a.seeds == b.seeds


def grid(
    configs: list[RunConfig], names: list[str], out_dir: str | Path | None = None
) -> list[dict[str, object]]:
    """Run a family of configs over shared task and seeds; one row each."""
    if not configs:
        raise ValueError("empty grid")
    if len(names) != len(configs):
        raise ValueError("one name per grid row required")
    for c in configs[1:]:
        if not _same_task(configs[0], c):
            raise ValueError("grid configs must share task and seeds")
    rows = []
    metric_key, _ = headline_metric(configs[0])
    for name, cfg in zip(names, configs):
        sub_dir = Path(out_dir) / name if out_dir is not None else None
        summary = run(cfg, sub_dir)
        row = {
            "name": name,
            "strategy": cfg.strategy.kind,
            "stage": cfg.strategy.stage,
            "sharing": cfg.sharing,
            "lambda": cfg.lambda_l1,
            "scope": cfg.channel_scope,
            "exchange": cfg.exchange_enabled and cfg.strategy.kind == "cen",
            "metric": metric_key,
            "mean": summary.means[metric_key],
            "std": summary.stds[metric_key],
            "params_total": summary.seeds[0].params["total"],
            "params_fusion": summary.seeds[0].params["fusion"],
        }
        for k in sorted(summary.means):
            row[f"mean_{k}"] = summary.means[k]
        rows.append(row)
    if out_dir is not None:
        header = list(rows[0].keys())
        _write_csv(Path(out_dir) / "grid.csv", header, [[r[h] for h in header] for r in rows])
    return rows


def sweep(
    cfg: RunConfig, param: str, values: list[float], out_dir: str | Path | None = None
) -> list[dict[str, float]]:
    """Sensitivity sweep over lambda or theta; reports the headline metric and
    the fraction of penalty-masked channels below threshold at convergence."""
    if param not in ("lambda", "theta"):
        raise ValueError("sweep param must be 'lambda' or 'theta'")
    if not values:
        raise ValueError("sweep needs at least one value")
    metric_key, _ = headline_metric(cfg)
    rows = []
    for v in values:
        if param == "lambda":
            c = replace(cfg, lambda_l1=v)
        else:
            c = replace(cfg, theta=v)
        sub_dir = Path(out_dir) / f"{param}_{v:g}" if out_dir is not None else None
        summary = run(c, sub_dir)
        rows.append(
            {
                "value": v,
                "metric": summary.means[metric_key],
                "metric_std": summary.stds[metric_key],
                "replaced_proportion": float(
                    np.mean([s.replaced_fraction for s in summary.seeds])
                ),
            }
        )
    if out_dir is not None:
        _write_csv(
            Path(out_dir) / f"sweep_{param}.csv",
            ["value", "metric", "metric_std", "replaced_proportion"],
            [[r["value"], repr(r["metric"]), repr(r["metric_std"]), repr(r["replaced_proportion"])] for r in rows],
        )
    return rows


def modality_scaling(
    cfg: RunConfig, counts: list[int], out_dir: str | Path | None = None
) -> list[dict[str, float]]:
    """Train the same config at several modality counts."""
    metric_key, _ = headline_metric(cfg)
    rows = []
    for m in counts:
        c = replace(cfg, task=replace(cfg.task, modalities=m))
        sub_dir = Path(out_dir) / f"m_{m}" if out_dir is not None else None
        summary = run(c, sub_dir)
        rows.append(
            {"modalities": m, "metric": summary.means[metric_key], "metric_std": summary.stds[metric_key]}
        )
    if out_dir is not None:
        _write_csv(
            Path(out_dir) / "scaling.csv",
            ["modalities", "metric", "metric_std"],
            [[r["modalities"], repr(r["metric"]), repr(r["metric_std"])] for r in rows],
        )
    return rows


# -- grid presets ------------------------------------------------------------------


def components_grid(base: RunConfig) -> tuple[list[RunConfig], list[str]]:
    """The six-row sharing/regulation/exchange ablation family."""
    rows = [
        ("unshared", dict(sharing="unshared", lambda_l1=0.0, exchange_enabled=False)),
        ("fully_shared", dict(sharing="fully_shared", lambda_l1=0.0, exchange_enabled=False)),
        ("shared_private_bn", dict(lambda_l1=0.0, exchange_enabled=False)),
        ("l1_no_exchange", dict(exchange_enabled=False)),
        ("cen_half", dict()),
        ("cen_all_channel", dict(channel_scope="all")),
    ]
    configs, names = [], []
    for name, kw in rows:
        configs.append(replace(base, **kw))
        names.append(name)
    return configs, names


def fusion_grid(base: RunConfig) -> tuple[list[RunConfig], list[str]]:
    """Aggregation/alignment baselines at every fusion stage, plus the
    exchange model and the unimodal rows."""
    configs, names = [], []
    for kind in ("concat", "align", "attention"):
        for stage in ("early", "middle", "late", "all"):
            configs.append(
                replace(
                    base,
                    strategy=replace(base.strategy, kind=kind, stage=stage),
                    lambda_l1=0.0,
                    exchange_enabled=False,
                )
            )
            names.append(f"{kind}_{stage}")
    configs.append(replace(base, strategy=replace(base.strategy, kind="cen")))
    names.append("cen")
    for m in range(base.task.modalities):
        configs.append(
            replace(
                base,
                strategy=replace(base.strategy, kind="unimodal", unimodal_index=m),
                lambda_l1=0.0,
                exchange_enabled=False,
            )
        )
        names.append(f"unimodal_{m}")
    return configs, names
