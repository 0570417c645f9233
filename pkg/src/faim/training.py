"""Masking, losses, and the two-stage training procedure.

Stage one reconstructs randomly masked patches under a mean-squared loss
restricted to the masked positions; stage two trains the classifier with
label-smoothed cross-entropy, tracking the best validation accuracy.  Both
stages are deterministic functions of (dataset, config.seed).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import SeriesDataset, split_dataset
from .errors import InputError, ShapeError
from .metrics import accuracy_and_macro_f1
from .model import (
    FaimConfig,
    FaimModel,
    build_model,
    classify_batch,
    reconstruct_forward,
    reference_patches,
    save_checkpoint,
)
from .optim import AdamWState, adamw_step
from .rng import CounterRng, derive_seed
from .tensor import Tape, Tensor, backward, mul, neg, sub, texp, tlog, tsum


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    """Binary per-(channel, patch) mask with exact per-row count."""

    lam: np.ndarray
    ratio: float
    seed: int


def make_mask(shape: tuple[int, ...], ratio: float, seed: int) -> MaskPlan:
    """Exactly round(ratio * Z) ones per row, chosen by seeded shuffle.

    ``shape`` is (..., Z); every leading index gets its own row draw, all
    derived from (seed, shape) so the plan is reproducible.
    """
    if not 0 <= ratio < 1:
        raise InputError(f"mask ratio must be in [0, 1), got {ratio}")
    z = shape[-1]
    n_masked = int(round(ratio * z))
    lam = np.zeros(shape)
    rng = CounterRng(derive_seed(seed, "mask", *shape))
    flat = lam.reshape(-1, z)
    for row in range(flat.shape[0]):
        chosen = rng.permutation(z)[:n_masked]
        flat[row, chosen] = 1.0
    return MaskPlan(lam, ratio, seed)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def masked_mse(x_true, x_hat: Tensor, lam) -> Tensor:
    """Mean over masked patches of the per-patch mean squared error.

    Unmasked patches contribute nothing; their gradient is exactly zero.
    Returns a constant 0 when nothing is masked.
    """
    lam = np.asarray(lam, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_hat.shape != x_true.shape or lam.shape != x_true.shape[:-1]:
        raise ShapeError(
            f"masked_mse shapes disagree: x {x_true.shape}, x_hat {x_hat.shape}, mask {lam.shape}"
        )
    total = float(lam.sum())
    if total == 0.0:
        return Tensor(0.0)
    diff = sub(x_hat, Tensor(x_true))
    per_patch = mul(diff, diff).mean(axis=-1)
    weighted = mul(per_patch, Tensor(lam))
    return mul(tsum(weighted), Tensor(1.0 / total))


def smooth_targets(y: int, n_classes: int, eps: float) -> np.ndarray:
    """(1 - eps) * onehot(y) + eps / k."""
    if not 0 <= eps < 1:
        raise InputError(f"smoothing eps must be in [0, 1), got {eps}")
    if not 0 <= y < n_classes:
        raise InputError(f"label {y} outside [0, {n_classes})")
    targets = np.full(n_classes, eps / n_classes)
    targets[y] += 1.0 - eps
    return targets


def _log_softmax(logits: Tensor) -> Tensor:
    # The max shift is a constant offset: gradients of log-softmax are exact
    # regardless of the shift chosen.
    shift = sub(logits, Tensor(logits.data.max(axis=-1, keepdims=True)))
    lse = tlog(tsum(texp(shift), axis=-1, keepdims=True))
    return sub(shift, lse)


def label_smoothed_ce(logits: Tensor, y: int, eps: float) -> Tensor:
    """Cross-entropy of one logit vector against smoothed targets."""
    if logits.ndim != 1:
        raise ShapeError(f"expected a logit vector, got shape {logits.shape}")
    n_classes = logits.shape[0]
    if n_classes < 2:
        raise InputError(f"need at least 2 classes, got {n_classes}")
    targets = smooth_targets(y, n_classes, eps)
    return neg(tsum(mul(_log_softmax(logits), Tensor(targets))))


def batch_label_smoothed_ce(logits: Tensor, labels: np.ndarray, eps: float) -> Tensor:
    """Mean smoothed cross-entropy over a batch of logit rows."""
    n_batch, n_classes = logits.shape
    targets = np.stack([smooth_targets(int(y), n_classes, eps) for y in labels])
    per_sample_sum = tsum(mul(_log_softmax(logits), Tensor(targets)))
    return mul(neg(per_sample_sum), Tensor(1.0 / n_batch))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("epoch", "split", "loss", "accuracy", "macro_f1", "seconds")


@dataclass
class EpochRow:
    epoch: int
    split: str
    loss: float | None
    accuracy: float | None
    macro_f1: float | None
    seconds: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, epoch, split, loss, accuracy, macro_f1, seconds) -> None:
        self.rows.append(EpochRow(epoch, split, loss, accuracy, macro_f1, seconds))

    def to_csv(self, include_timing: bool = True) -> str:
        """CSV rows; ``include_timing=False`` zeroes the seconds column so the
        file is byte-identical across re-runs (wall time then lives only in
        the summary)."""

        def cell(v):
            return "" if v is None else repr(float(v))

        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            seconds = r.seconds if include_timing else 0.0
            lines.append(
                f"{r.epoch},{r.split},{cell(r.loss)},{cell(r.accuracy)},"
                f"{cell(r.macro_f1)},{cell(seconds)}"
            )
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [f"{key}={self.summary[key]}" for key in sorted(self.summary)]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def predict_dataset(model: FaimModel, dataset: SeriesDataset, batch_size: int = 256) -> np.ndarray:
    x, _ = dataset.arrays()
    preds = []
    for start in range(0, len(x), batch_size):
        logits, _ = classify_batch(model, x[start : start + batch_size])
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def evaluate(model: FaimModel, dataset: SeriesDataset, batch_size: int = 256):
    """(mean CE loss, accuracy, macro F1) on a dataset, no gradients."""
    x, y = dataset.arrays()
    losses = []
    preds = []
    for start in range(0, len(x), batch_size):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        logits, _ = classify_batch(model, xb)
        loss = batch_label_smoothed_ce(logits, yb, model.config.label_smooth_eps)
        losses.append(loss.item() * len(xb))
        preds.append(np.argmax(logits.data, axis=-1))
    preds = np.concatenate(preds)
    accuracy, macro_f1 = accuracy_and_macro_f1(preds, y, dataset.n_classes)
    return float(np.sum(losses) / len(x)), accuracy, macro_f1


def _snapshot(model: FaimModel) -> list[np.ndarray]:
    return [t.data.copy() for t in model.parameters()]


def _restore(model: FaimModel, snapshot: list[np.ndarray]) -> None:
    for tensor, data in zip(model.parameters(), snapshot):
        tensor.data = data.copy()


def _grad_list(model: FaimModel, grads: dict) -> list:
    return [grads.get(t) for t in model.parameters()]


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def pretrain(
    dataset: SeriesDataset, config: FaimConfig, checkpoint_path: str | None = None
) -> tuple[FaimModel, TrainReport]:
    """Masked-reconstruction stage; returns the best-loss parameter state."""
    if len(dataset) == 0:
        raise InputError("cannot pretrain on an empty dataset")
    x, _ = dataset.arrays()
    model = build_model(config, dataset.n_classes, dataset.n_channels, dataset.series_len)
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = CounterRng(derive_seed(config.seed, "pretrain-shuffle"))
    report = TrainReport()
    best_loss = np.inf
    best_state = _snapshot(model)
    for epoch in range(1, config.pretrain_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(x))
        epoch_loss = 0.0
        for step, start in enumerate(range(0, len(x), config.batch_size)):
            xb = x[order[start : start + config.batch_size]]
            plan = make_mask(
                (len(xb), dataset.n_channels, model.n_patches),
                config.mask_ratio,
                derive_seed(config.seed, "pretrain-mask", epoch, step),
            )
            with Tape() as tape:
                recon = reconstruct_forward(xb, plan.lam, model)
                loss = masked_mse(reference_patches(xb, model), recon, plan.lam)
            grads = backward(tape, loss)
            adamw_step(model.parameters(), _grad_list(model, grads), opt)
            epoch_loss += loss.item() * len(xb)
        epoch_loss /= len(x)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_state = _snapshot(model)
        report.add(epoch, "pretrain", epoch_loss, None, None, time.perf_counter() - started)
    _restore(model, best_state)
    report.summary["stage"] = "pretrain"
    report.summary["best_loss"] = repr(best_loss)
    report.summary["epochs"] = config.pretrain_epochs
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, _dataset_meta(dataset, config))
    return model, report


def finetune(
    dataset: SeriesDataset,
    config: FaimConfig,
    init: FaimModel | None = None,
    val_dataset: SeriesDataset | None = None,
    checkpoint_path: str | None = None,
) -> tuple[FaimModel, TrainReport]:
    """Supervised stage; returns the best-validation-accuracy state."""
    if len(dataset) == 0:
        raise InputError("cannot finetune on an empty dataset")
    _, labels = dataset.arrays()
    missing = set(range(dataset.n_classes)) - set(int(v) for v in labels)
    if missing:
        warnings.warn(f"classes {sorted(missing)} absent from the training labels")
    if val_dataset is None:
        train_set, val_set = split_dataset(dataset, 0.2, derive_seed(config.seed, "val"))
    else:
        train_set, val_set = dataset, val_dataset
    model = init
    if model is None:
        model = build_model(config, dataset.n_classes, dataset.n_channels, dataset.series_len)
    x, y = train_set.arrays()
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = CounterRng(derive_seed(config.seed, "finetune-shuffle"))
    report = TrainReport()
    best_acc = -1.0
    best_epoch = 0
    best_state = _snapshot(model)
    for epoch in range(1, config.finetune_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(x))
        epoch_loss = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            with Tape() as tape:
                logits, _ = classify_batch(model, x[idx])
                loss = batch_label_smoothed_ce(logits, y[idx], config.label_smooth_eps)
            grads = backward(tape, loss)
            adamw_step(model.parameters(), _grad_list(model, grads), opt)
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= len(x)
        seconds = time.perf_counter() - started
        val_loss, val_acc, val_f1 = evaluate(model, val_set, config.batch_size)
        if val_acc >= best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = _snapshot(model)
        report.add(epoch, "train", epoch_loss, None, None, seconds)
        report.add(epoch, "val", val_loss, val_acc, val_f1, 0.0)
    _restore(model, best_state)
    report.summary["stage"] = "finetune"
    report.summary["best_val_accuracy"] = repr(best_acc)
    report.summary["best_epoch"] = best_epoch
    report.summary["epochs"] = config.finetune_epochs
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, _dataset_meta(dataset, config))
    return model, report


def _dataset_meta(dataset: SeriesDataset, config: FaimConfig) -> dict:
    return {
        "label_map": dataset.label_map,
        "norm_mean": None if dataset.norm_mean is None else list(dataset.norm_mean),
        "norm_std": None if dataset.norm_std is None else list(dataset.norm_std),
        "seed": config.seed,
    }
