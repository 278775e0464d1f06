"""Deterministic synthetic multimodal tasks and segmentation/regression metrics.

Two desk-scale task families:

* toy_segmentation — a latent Voronoi scene of K classes. Each class carries a
  two-attribute code: modality A renders attribute codes with deliberate
  class collisions, blurred near region boundaries and overlaid with texture;
  modality B renders a sharp boundary map plus the complementary attribute
  code whose collisions A resolves. Neither modality alone identifies every
  class; together they do.
* toy_translation — a smooth target field of which each modality observes a
  different fixed set of stripes (plus a visibility channel). More modalities
  cover more of the field, so the reachable reconstruction error shrinks
  monotonically with the modality count.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

TASK_KINDS = ("toy_segmentation", "toy_translation")


@dataclass
class TaskSpec:
    kind: str = "toy_segmentation"
    modalities: int = 2
    classes: int = 5
    out_channels: int = 1
    size: int = 32
    train_samples: int = 512
    val_samples: int = 128
    noise: float = 0.08
    seed: int = 0
    # complementary-information knobs
    blur: int = 1
    boundary_width: int = 1
    texture_amp: float = 0.2
    stripes: int = 4

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.modalities < 1:
            raise ValueError("modalities must be >= 1")
        if self.kind == "toy_translation" and self.modalities > self.stripes:
            raise ValueError(f"translation task supports at most {self.stripes} modalities")
        if self.kind == "toy_segmentation" and self.classes < 2:
            raise ValueError("segmentation needs at least 2 classes")
        if self.size < 8:
            raise ValueError("size must be >= 8")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ValueError("sample counts must be positive")

    def spec_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Dataset:
    """Stacked multimodal samples: inputs[m] is [n, C_m, H, W]."""

    inputs: list[np.ndarray]
    targets: np.ndarray

    def __len__(self) -> int:
        return self.targets.shape[0]

    def batch(self, idx: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        return [x[idx] for x in self.inputs], self.targets[idx]


def class_codes(classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Two per-class attribute levels with complementary collisions.

    Attribute A collides consecutive class pairs, attribute B collides a
    shifted pairing, and the joint (A, B) code is unique per class.
    """
    ga = np.arange(classes) // 2
    gb = ((np.arange(classes) + (classes + 1) // 2) % classes) // 2
    la = np.linspace(0.2, 0.8, ga.max() + 1)
    lb = np.linspace(0.2, 0.8, gb.max() + 1)
    return la[ga], lb[gb]


def _voronoi_labels(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    points = rng.uniform(0, size, size=(2 * classes, 2))
    cls = np.concatenate([np.arange(classes), rng.integers(0, classes, size=classes)])
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    d = (yy[..., None] - points[:, 0]) ** 2 + (xx[..., None] - points[:, 1]) ** 2
    return cls[np.argmin(d, axis=-1)].astype(np.int64)


def _boundary(labels: np.ndarray, width: int) -> np.ndarray:
    edge = np.zeros_like(labels, dtype=bool)
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[1:, :] |= labels[:-1, :] != labels[1:, :]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    for _ in range(width - 1):
        grown = edge.copy()
        grown[:-1, :] |= edge[1:, :]
        grown[1:, :] |= edge[:-1, :]
        grown[:, :-1] |= edge[:, 1:]
        grown[:, 1:] |= edge[:, :-1]
        edge = grown
    return edge


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    k = 2 * radius + 1
    padded = np.pad(img, radius, mode="edge")
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out / (k * k)


def _texture(size: int, phase: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.sin(2.0 * np.pi * (xx / 4.0 + phase)) * np.sin(2.0 * np.pi * (yy / 4.0 + phase))


def _segmentation_sample(rng: np.random.Generator, spec: TaskSpec):
    labels = _voronoi_labels(rng, spec.size, spec.classes)
    code_a, code_b = class_codes(spec.classes)
    edge = _boundary(labels, spec.boundary_width)
    a_map = code_a[labels]
    b_map = code_b[labels]
    modalities = []
    for m in range(spec.modalities):
        phase = rng.uniform()
        if m % 2 == 0:
            # texture-flavoured: blurred identity (ambiguous near boundaries)
            ident = _box_blur(a_map, spec.blur) + spec.texture_amp * _texture(spec.size, phase)
            filler = _texture(spec.size, phase)
        else:
            # boundary-flavoured: sharp edges plus the complementary code
            ident = b_map.copy()
            filler = edge.astype(np.float64)
        chans = np.stack([ident, filler])
        chans = chans + rng.normal(0.0, spec.noise, size=chans.shape)
        modalities.append(chans)
    return modalities, labels


def _stripe_mask(size: int, stripes: int, m: int) -> np.ndarray:
    band = np.arange(size) // max(size // (2 * stripes), 1)
    return (band % stripes == m).astype(np.float64)[:, None] * np.ones((1, size))


def _translation_sample(rng: np.random.Generator, spec: TaskSpec):
    size = spec.size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    target = np.zeros((size, size))
    for _ in range(6):
        cy, cx = rng.uniform(0, size, size=2)
        amp = rng.uniform(-1.0, 1.0)
        sig = rng.uniform(size / 8, size / 3)
        target += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    target = (target - target.min()) / (target.max() - target.min() + 1e-12)
    target = np.repeat(target[None], spec.out_channels, axis=0)

    modalities = []
    for m in range(spec.modalities):
        mask = _stripe_mask(size, spec.stripes, m)
        view = target[0] * mask + 0.5 * (1.0 - mask)
        chans = np.stack([view, mask])
        chans = chans + rng.normal(0.0, spec.noise, size=chans.shape)
        modalities.append(chans)
    return modalities, target


def generate(spec: TaskSpec, cache_dir: str | Path | None = None) -> tuple[Dataset, Dataset]:
    """Build (train, val) datasets; a pure function of the spec."""
    if cache_dir is not None:
        path = Path(cache_dir) / f"{spec.spec_hash()}.chx"
        if path.exists():
            return load_datasets(path)

    root = np.random.SeedSequence(spec.seed)
    make = _segmentation_sample if spec.kind == "toy_segmentation" else _translation_sample
    splits = []
    for count, ss in zip((spec.train_samples, spec.val_samples), root.spawn(2)):
        rng = np.random.default_rng(ss)
        mods = [[] for _ in range(spec.modalities)]
        targets = []
        for _ in range(count):
            sample, target = make(rng, spec)
            for m, chans in enumerate(sample):
                mods[m].append(chans)
            targets.append(target)
        splits.append(Dataset([np.stack(ch) for ch in mods], np.stack(targets)))
    train, val = splits
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_datasets(path, train, val)
    return train, val


# -- flat binary cache ---------------------------------------------------------------

_MAGIC = b"CHXDATA1"


def save_datasets(path: str | Path, train: Dataset, val: Dataset) -> None:
    """Little-endian flat binary: magic, json header, then raw array bytes."""
    arrays = []
    descr = {"splits": []}
    for name, ds in (("train", train), ("val", val)):
        entry = {"inputs": [], "target": None}
        for x in ds.inputs:
            entry["inputs"].append({"shape": list(x.shape), "dtype": str(x.dtype)})
            arrays.append(np.ascontiguousarray(x))
        entry["target"] = {"shape": list(ds.targets.shape), "dtype": str(ds.targets.dtype)}
        arrays.append(np.ascontiguousarray(ds.targets))
        descr["splits"].append({"name": name, **entry})
    header = json.dumps(descr).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for a in arrays:
            f.write(a.astype(a.dtype.newbyteorder("<")).tobytes())


def load_datasets(path: str | Path) -> tuple[Dataset, Dataset]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a dataset cache file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        descr = json.loads(f.read(hlen).decode())

        def read_array(meta):
            dtype = np.dtype(meta["dtype"]).newbyteorder("<")
            count = int(np.prod(meta["shape"]))
            arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            return arr.reshape(meta["shape"]).astype(np.dtype(meta["dtype"]))

        splits = []
        for entry in descr["splits"]:
            inputs = [read_array(meta) for meta in entry["inputs"]]
            targets = read_array(entry["target"])
            splits.append(Dataset(inputs, targets))
    return splits[0], splits[1]


# -- metrics ---------------------------------------------------------------------------


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, classes: int) -> np.ndarray:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p, t = pred.reshape(-1), truth.reshape(-1)
    if p.min() < 0 or p.max() >= classes or t.min() < 0 or t.max() >= classes:
        raise ValueError(f"labels out of range [0,{classes})")
    return np.bincount(t * classes + p, minlength=classes * classes).reshape(classes, classes)


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    cm = confusion_matrix(pred, truth, classes)
    return float(np.trace(cm) / cm.sum())


def mean_accuracy(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    cm = confusion_matrix(pred, truth, classes)
    truth_counts = cm.sum(axis=1)
    present = truth_counts > 0
    return float(np.mean(np.diag(cm)[present] / truth_counts[present]))


def mean_iou(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    """Mean intersection-over-union; classes absent from both pred and truth
    are excluded from the average."""
    cm = confusion_matrix(pred, truth, classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    included = union > 0
    return float(np.mean(tp[included] / union[included]))


def centroid_oracle_gap(spec: TaskSpec) -> tuple[float, float]:
    """Per-pixel nearest-centroid accuracy using modality A alone vs all
    modalities jointly — quantifies the designed complementarity."""
    if spec.kind != "toy_segmentation":
        raise ValueError("oracle gap is defined for the segmentation task")
    train, val = generate(spec)

    def accuracy(feature_sets_train, feature_sets_val):
        feats_tr = np.concatenate([x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
                                   for x in feature_sets_train], axis=1)
        feats_va = np.concatenate([x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
                                   for x in feature_sets_val], axis=1)
        labels_tr = train.targets.reshape(-1)
        labels_va = val.targets.reshape(-1)
        centroids = np.stack([feats_tr[labels_tr == k].mean(axis=0) for k in range(spec.classes)])
        d = ((feats_va[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        return float((np.argmin(d, axis=1) == labels_va).mean())

    acc_a = accuracy([train.inputs[0]], [val.inputs[0]])
    acc_all = accuracy(train.inputs, val.inputs)
    return acc_a, acc_all
