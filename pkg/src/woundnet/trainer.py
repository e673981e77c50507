"""Training orchestration: mini-batch loop, joint loss, best-loss checkpointing,
evaluation, and single-image prediction.

Checkpoints are a binary format: magic ``WUNT``, version, config snapshot,
epoch index, best total loss, Adam scalars, then length-prefixed named tensors
(params and both Adam moment sets) as little-endian float32 with explicit
dims. Loads validate magic, version, and every parameter shape against the
architecture manifest.
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import losses, metrics
from .data import CLASS_NAMES, Dataset, resize_image, _read_png
from .errors import CheckpointError, ConfigError, TrainingError
from .layers import AdamState, adam_init, adam_step
from .model import ArchSpec, DEFAULT_ARCH, backward, build_model, forward, param_manifest
from .tensor import Rng

MAGIC = b"WUNT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2
    threshold: float = 0.5
    checkpoint_path: str = "model.ckpt"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (blank lines and # comments allowed)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            if key in ("epochs", "batch_size", "seed"):
                values[key] = int(value)
            elif key in ("lr", "val_fraction", "threshold"):
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
    values.update(overrides)
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), **overrides)


def config_text(config: TrainConfig) -> str:
    """Canonical serialization, parseable by parse_config."""
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(TrainConfig))


@dataclass
class EpochLog:
    epoch: int
    cls_loss: float
    seg_loss: float
    total_loss: float
    seconds: float


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    epoch: int
    best_total_loss: float
    params: dict[str, np.ndarray]
    adam: AdamState


def write_epoch_csv(logs: list[EpochLog], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,cls_loss,seg_loss,total_loss,seconds\n")
        for log in logs:
            fh.write(f"{log.epoch},{log.cls_loss!r},{log.seg_loss!r},"
                     f"{log.total_loss!r},{log.seconds!r}\n")


# ---------------------------------------------------------------------------
# checkpoint serialization

def _write_tensor(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name}"))
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"dims of {name}"))
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(fh, 4 * count, f"data of {name}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", ckpt.version))
    cfg = config_text(ckpt.config).encode("utf-8")
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", ckpt.epoch))
    out.write(struct.pack("<d", ckpt.best_total_loss))
    a = ckpt.adam
    out.write(struct.pack("<Q", a.t))
    out.write(struct.pack("<4d", a.lr, a.beta1, a.beta2, a.eps))
    names = list(ckpt.params)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        _write_tensor(out, name, ckpt.params[name])
    for name in names:
        _write_tensor(out, f"{name}.m", a.m[name])
    for name in names:
        _write_tensor(out, f"{name}.v", a.v[name])
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path, arch: ArchSpec = DEFAULT_ARCH) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg_text = _read_exact(fh, cfg_len, "config").decode("utf-8")
        try:
            config = parse_config(cfg_text)
        except ConfigError as e:
            raise CheckpointError(f"{path}: bad config snapshot: {e}") from None
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4, "epoch"))
        (best,) = struct.unpack("<d", _read_exact(fh, 8, "best loss"))
        (t,) = struct.unpack("<Q", _read_exact(fh, 8, "adam step"))
        lr, beta1, beta2, eps = struct.unpack("<4d", _read_exact(fh, 32, "adam scalars"))
        (n,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(3 * n):
            name, arr = _read_tensor(fh)
            tensors[name] = arr

    manifest = param_manifest(arch)
    if n != len(manifest):
        raise CheckpointError(f"{path}: {n} parameter tensors, architecture has {len(manifest)}")
    params, m, v = {}, {}, {}
    for name, shape in manifest:
        for key, dest in ((name, params), (f"{name}.m", m), (f"{name}.v", v)):
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            if tensors[key].shape != shape:
                raise CheckpointError(
                    f"{path}: tensor {key!r} has shape {tensors[key].shape}, "
                    f"architecture expects {shape}")
            dest[name] = tensors[key]
    adam = AdamState(m=m, v=v, t=t, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    return Checkpoint(version=version, config=config, epoch=epoch,
                      best_total_loss=best, params=params, adam=adam)


# ---------------------------------------------------------------------------
# training loop

def _stack_batch(dataset: Dataset, idxs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([dataset.samples[i].image for i in idxs])
    masks = np.stack([dataset.samples[i].mask for i in idxs])
    labels = np.array([dataset.samples[i].label for i in idxs], dtype=np.int64)
    return images, masks, labels


def train(config: TrainConfig, dataset: Dataset, arch: ArchSpec = DEFAULT_ARCH,
          progress=None) -> tuple[Checkpoint, list[EpochLog]]:
    """Run the full training loop; keeps the lowest-total-loss epoch's state.

    The checkpoint file at config.checkpoint_path is overwritten whenever the
    epoch-mean total loss improves. ``progress`` is an optional callable
    receiving each EpochLog.
    """
    if not dataset.train_idx:
        raise TrainingError("dataset has an empty train split")
    params = build_model(config.seed, arch)
    state = adam_init(params, lr=config.lr)
    shuffle_rng = Rng(config.seed ^ 0x5DEECE66D)
    train_idx = list(dataset.train_idx)
    n = len(train_idx)

    best: Checkpoint | None = None
    logs: list[EpochLog] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        cls_sum = 0.0
        seg_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train_idx[p] for p in perm[start:start + config.batch_size]]
            images, masks, labels = _stack_batch(dataset, batch)
            out, cache = forward(params, images, arch)
            cls_loss, grad_cls = losses.cross_entropy(out.class_logits, labels)
            seg_loss, grad_seg = losses.bce_with_logits(out.mask_logits, masks)
            if not (np.isfinite(cls_loss) and np.isfinite(seg_loss)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting at {start}: "
                    f"cls={cls_loss}, seg={seg_loss}")
            grads = backward(params, cache, grad_cls, grad_seg)
            params, state = adam_step(params, grads, state)
            cls_sum += cls_loss * len(batch)
            seg_sum += seg_loss * len(batch)
        cls_mean = cls_sum / n
        seg_mean = seg_sum / n
        total_mean = losses.total_loss(cls_mean, seg_mean)
        log = EpochLog(epoch=epoch, cls_loss=cls_mean, seg_loss=seg_mean,
                       total_loss=total_mean, seconds=time.perf_counter() - t0)
        logs.append(log)
        if progress is not None:
            progress(log)
        if best is None or total_mean < best.best_total_loss:
            best = Checkpoint(version=FORMAT_VERSION, config=config, epoch=epoch,
                              best_total_loss=total_mean, params=params, adam=state)
            if config.checkpoint_path:
                save_checkpoint(best, config.checkpoint_path)
    return best, logs


# ---------------------------------------------------------------------------
# inference

def _predict_batch(params: dict[str, np.ndarray], images: np.ndarray,
                   threshold: float, arch: ArchSpec):
    """Shared inference path -> (labels [B], probs [B,C], binary masks [B,1,S,S])."""
    out, _ = forward(params, images, arch)
    probs = losses.softmax(out.class_logits)
    labels = np.argmax(out.class_logits, axis=1)
    masks = metrics.threshold_mask(losses.sigmoid(out.mask_logits), threshold)
    return labels, probs, masks


def evaluate(ckpt: Checkpoint, dataset: Dataset, split: str,
             threshold: float | None = None, arch: ArchSpec = DEFAULT_ARCH,
             batch_size: int = 8) -> metrics.MetricsReport:
    """Run inference over a split and aggregate the Tables 2-3 style report."""
    if split == "train":
        idxs = dataset.train_idx
    elif split == "val":
        idxs = dataset.val_idx
    else:
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    if not idxs:
        raise TrainingError(f"dataset has an empty {split} split")
    thr = ckpt.config.threshold if threshold is None else threshold

    pred_labels: list[int] = []
    true_labels: list[int] = []
    dices: list[float] = []
    counts = metrics.ConfusionCounts(0, 0, 0, 0)
    for start in range(0, len(idxs), batch_size):
        batch = idxs[start:start + batch_size]
        images, masks, labels = _stack_batch(dataset, batch)
        batch_pred, _, batch_masks = _predict_batch(ckpt.params, images, thr, arch)
        pred_labels.extend(int(p) for p in batch_pred)
        true_labels.extend(int(t) for t in labels)
        for k in range(len(batch)):
            dices.append(metrics.dice(batch_masks[k], masks[k]))
            counts = counts + metrics.confusion(batch_masks[k], masks[k])

    precision, recall, f1 = metrics.precision_recall_f1(counts)
    return metrics.MetricsReport(
        accuracy=metrics.accuracy(pred_labels, true_labels),
        f1_classification=metrics.macro_f1(pred_labels, true_labels,
                                           num_classes=arch.num_classes),
        dice_mean=float(np.mean(dices)),
        precision_seg=precision,
        recall_seg=recall,
        f1_seg=f1,
    )


def predict(ckpt: Checkpoint, image_path, out_path,
            threshold: float | None = None, arch: ArchSpec = DEFAULT_ARCH):
    """Classify one image and write its binary mask PNG (0/255).

    -> (class name, class probabilities [C], mask uint8 [S,S]).
    """
    image = resize_image(_read_png(Path(image_path)))
    thr = ckpt.config.threshold if threshold is None else threshold
    labels, probs, masks = _predict_batch(ckpt.params, image[None], thr, arch)
    mask_u8 = (masks[0, 0] * 255).astype(np.uint8)
    Image.fromarray(mask_u8, mode="L").save(out_path)
    return CLASS_NAMES[int(labels[0])], probs[0], mask_u8
