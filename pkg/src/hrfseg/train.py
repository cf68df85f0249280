"""Adam training with per-epoch validation and best-checkpoint selection.

Each epoch samples fresh 128x32 patches from every annotated training
image, runs mini-batch updates, then scores the full-resolution validation
images (pooled DSC at 0.5 and average precision). The checkpoint on disk
is replaced whenever validation AP improves, so the persisted artifact is
always the best epoch's parameters. A single seed drives weight init,
patch sampling and shuffling, making runs bit-reproducible on one thread.

The training log is a CSV with columns
``epoch,train_loss,val_dsc,val_ap,checkpoint_flag``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import binary_cross_entropy, dice_loss, multiclass_cross_entropy
from .metrics import average_precision, confusion, dsc
from .models import ArchConfig, Model, build_model
from .tensor import Tensor, no_grad, sigmoid, slice_channels, softmax_channels

logger = logging.getLogger("hrfseg.train")

LOSSES = ("ce", "dice")
LOG_COLUMNS = ("epoch", "train_loss", "val_dsc", "val_ap", "checkpoint_flag")


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig
    loss: str = "ce"
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patches_per_epoch: int = 50  # per training image
    vendors: str = "both"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning rate and eps must be positive")
        if self.patches_per_epoch < 1:
            raise ValueError("patches_per_epoch must be at least 1")
        if self.vendors not in ("cirrus", "spectralis", "both"):
            raise ValueError(f"unknown vendor selector {self.vendors!r}")


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict | None = None):
        """Apply one update from ``grads`` (defaults to each param's .grad)."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name] if grads is not None else p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r} (training diverged)")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dsc: float
    val_ap: float
    checkpoint_flag: int


@dataclass
class TrainResult:
    log: list
    checkpoint_path: Path
    best_epoch: int
    best_ap: float
    model: Model
    sampled_sources: set = field(default_factory=set)


def batch_loss(model: Model, x: np.ndarray, y: np.ndarray, loss_name: str):
    """Forward a batch and build the configured loss on the logits."""
    logits = model.forward(Tensor(x.astype(model.dtype)))
    out_mode = model.config.out_mode
    if out_mode == "binary_sigmoid":
        y4 = y.reshape(y.shape[0], 1, *y.shape[-2:])
        if loss_name == "ce":
            return binary_cross_entropy(logits, y4.astype(model.dtype))
        return dice_loss(sigmoid(logits), y4.astype(model.dtype))
    onehot = np.stack([1 - y, y], axis=1).astype(model.dtype)
    if loss_name == "ce":
        return multiclass_cross_entropy(logits, onehot)
    fg = slice_channels(softmax_channels(logits), 1, 2)
    return dice_loss(fg, y.reshape(y.shape[0], 1, *y.shape[-2:]).astype(model.dtype))


def fit_patches(model: Model, patches: list, config: TrainConfig, rng=None) -> list:
    """Run ``config.epochs`` epochs over a fixed patch set; returns the
    per-epoch mean losses. Used directly by overfitting experiments."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    adam = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    losses = []
    for _ in range(config.epochs):
        losses.append(_run_epoch(model, adam, patches, config, rng))
    return losses


def _run_epoch(model, adam, patches, config, rng) -> float:
    order = rng.permutation(len(patches))
    total = 0.0
    n_batches = 0
    for start in range(0, len(patches), config.batch_size):
        chunk = [patches[i] for i in order[start : start + config.batch_size]]
        x = np.stack([p.x for p in chunk])[:, None, :, :]
        y = np.stack([p.y for p in chunk])
        loss = batch_loss(model, x, y, config.loss)
        adam.zero_grad()
        loss.value.backward()
        adam.step()
        total += loss.scalar
        n_batches += 1
    return total / max(n_batches, 1)


def predict_model(model: Model, image: np.ndarray) -> np.ndarray:
    """Probability map for one normalized 2D image, same size as input."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"predict expects a 2D image, got shape {image.shape}")
    with no_grad():
        logits = model.forward(Tensor(image[None, None].astype(model.dtype)))
        if model.config.out_mode == "binary_sigmoid":
            probs = sigmoid(logits).data[0, 0]
        else:
            probs = softmax_channels(logits).data[0, 1]
    return probs


def predict(checkpoint, image: np.ndarray) -> np.ndarray:
    """Probability map from a checkpoint path or an in-memory model."""
    model = checkpoint if isinstance(checkpoint, Model) else load_checkpoint(checkpoint)
    return predict_model(model, image)


def _load_split(manifest, root, vendors):
    """Annotated entries only, rescaled to 320x512 and normalized per volume."""
    selected = manifest.for_vendors(vendors)
    selected = datamod.filter_annotated(selected, root)
    by_volume = {}
    for entry in selected:
        by_volume.setdefault((entry.patient_id, entry.scan_id), []).append(entry)
    items = []
    for key in sorted(by_volume):
        pairs = [datamod.load_entry(e, root) for e in by_volume[key]]
        rescaled = [datamod.rescale_bscan(s, m) for s, m in pairs]
        scans = datamod.normalize_scan([s for s, _ in rescaled])
        masks = [m for _, m in rescaled]
        items.extend(zip(scans, masks))
    return items


def validate_model(model: Model, items: list, threshold: float = 0.5):
    """Pooled DSC at ``threshold`` and AP over full validation images."""
    preds = [predict_model(model, scan.pixels) for scan, _ in items]
    masks = [mask.pixels for _, mask in items]
    counts = confusion(
        np.concatenate([p.ravel() for p in preds]),
        np.concatenate([m.ravel() for m in masks]),
        threshold,
    )
    return dsc(counts), average_precision(preds, masks)


def train(config: TrainConfig, manifest, data_root, out_dir) -> TrainResult:
    """Train per ``config`` on the manifest's train split, validating each
    epoch and persisting the best-AP checkpoint under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_items = _load_split(manifest.for_split("train"), data_root, config.vendors)
    val_items = _load_split(manifest.for_split("val"), data_root, config.vendors)
    if not train_items:
        raise ValueError(f"train split is empty (vendors={config.vendors})")
    if not val_items:
        raise ValueError(f"validation split is empty (vendors={config.vendors})")
    if not any(mask.pixels.any() for _, mask in val_items):
        raise ValueError("validation split has no positive pixels; AP is undefined")

    dtype = np.float32 if config.dtype == "float32" else np.float64
    model = build_model(config.arch, seed=config.seed, dtype=dtype)
    adam = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)

    checkpoint_path = out_dir / "best.ckpt"
    log: list = []
    best_ap = -np.inf
    best_epoch = -1
    sampled = set()
    for epoch in range(1, config.epochs + 1):
        patches = []
        for scan, mask in train_items:
            patches.extend(datamod.sample_patches(scan, mask, config.patches_per_epoch, rng))
        sampled.update((p.patient_id, p.scan_id, p.slice_index) for p in patches)
        train_loss = _run_epoch(model, adam, patches, config, rng)
        val_dsc, val_ap = validate_model(model, val_items)
        improved = val_ap > best_ap
        if improved:
            best_ap = val_ap
            best_epoch = epoch
            save_checkpoint(model, checkpoint_path)
        log.append(EpochRecord(epoch, train_loss, val_dsc, val_ap, int(improved)))
        logger.info(
            "epoch %d/%d: train_loss=%.5f val_dsc=%.4f val_ap=%.4f%s",
            epoch, config.epochs, train_loss, val_dsc, val_ap, " *" if improved else "",
        )
    write_train_log(out_dir / "train_log.csv", log)
    return TrainResult(
        log=log,
        checkpoint_path=checkpoint_path,
        best_epoch=best_epoch,
        best_ap=best_ap,
        model=model,
        sampled_sources=sampled,
    )


def write_train_log(path, log: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for rec in log:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_dsc), repr(rec.val_ap), rec.checkpoint_flag])
    return path


def read_train_log(path) -> list:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != LOG_COLUMNS:
            raise ValueError(f"{path} is not a training log (header {reader.fieldnames})")
        return [
            EpochRecord(
                int(r["epoch"]),
                float(r["train_loss"]),
                float(r["val_dsc"]),
                float(r["val_ap"]),
                int(r["checkpoint_flag"]),
            )
            for r in reader
        ]
