"""Mini-batch SGD training with classical momentum, a staircase learning
rate, optional per-step smooth decay, and periodic checkpointing.

Determinism model: every random choice is drawn from a generator forked
off the config seed with a purpose label — ``shuffle/epoch<N>`` for the
per-epoch permutation, ``dropout/e<N>/s<M>`` per optimizer step,
``valsplit`` for the validation holdout — so a run is a pure function of
(data, config, seed) in single-threaded mode.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt_mod
from .data import (Manifest, atomic_write_bytes, channel_stats, load_image,
                   normalize_images, resize)
from .errors import ConfigError, DataError, NumericError
from .rng import fork_rng
from .tensor import Tensor, make_op, no_grad

HISTORY_HEADER = ("epoch", "lr", "train_loss", "train_acc", "val_acc")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    momentum: float = 0.9
    decay: Optional[float] = None  # None -> initial_lr / epochs_per_trial
    epochs_per_trial: int = 50
    trials: int = 3
    batch_size: int = 32
    loss: str = "cross_entropy"
    seed: int = 0
    checkpoint_every: int = 10
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.initial_lr < 0:
            raise ConfigError(f"initial_lr must be >= 0, got {self.initial_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs_per_trial < 1:
            raise ConfigError("epochs_per_trial must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.decay is None:
            object.__setattr__(self, "decay", self.initial_lr / self.epochs_per_trial)
        elif self.decay < 0:
            raise ConfigError(f"decay must be >= 0, got {self.decay}")

    @property
    def total_epochs(self) -> int:
        return self.trials * self.epochs_per_trial


@dataclass
class TrainData:
    """Prepared arrays: x is (N, C, H, W) float32, y integer labels,
    patients one id per sample (empty string allowed)."""

    x: np.ndarray
    y: np.ndarray
    patients: Sequence[str] = field(default_factory=list)
    x_val: Optional[np.ndarray] = None
    y_val: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"x has {len(self.x)} samples but y has {len(self.y)}")
        if len(self.x) == 0:
            raise DataError("training set is empty")
        if not self.patients:
            self.patients = [""] * len(self.x)
        if len(self.patients) != len(self.x):
            raise DataError("patients list does not match the sample count")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p[label], with p clamped at 1e-12.

    `probs` rows are class probabilities (e.g. softmax output); `labels`
    are integer class indices.
    """
    labels = np.asarray(labels)
    if probs.data.ndim != 2:
        raise DataError(f"cross_entropy expects (batch, classes) probabilities, got {probs.shape}")
    n, k = probs.data.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise DataError(f"label {bad} out of range for {k} classes")

    picked = probs.data[np.arange(n), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    value = -np.log(clamped).mean()

    def backward(g: np.ndarray):
        dprobs = np.zeros_like(probs.data)
        live = picked >= PROB_FLOOR  # gradient is zero where the clamp is active
        dprobs[np.arange(n), labels] = -g.item() * live / (n * clamped)
        return (dprobs,)

    return make_op(np.asarray(value, dtype=probs.dtype), (probs,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Staircase rate: initial_lr x 10^(-floor(epoch / epochs_per_trial))."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * 10.0 ** (-(epoch // config.epochs_per_trial))


def effective_lr(epoch: int, global_step: int, config: TrainConfig) -> float:
    """The staircase rate with the per-step smooth decay applied on top."""
    lr = lr_schedule(epoch, config)
    if config.decay > 0:
        lr = lr / (1.0 + config.decay * global_step)
    return lr


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             velocities: Dict[str, np.ndarray], lr: float, momentum: float
             ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Classical momentum, in place: v <- momentum*v - lr*g; theta <- theta + v."""
    for name, theta in params.items():
        g = grads[name]
        v = velocities[name]
        v *= momentum
        v -= (lr * g).astype(v.dtype, copy=False)
        theta += v
    return params, velocities


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def prepare_train_data(manifest: Manifest, input_size: int,
                       magnification: Optional[str] = None) -> Tuple[TrainData, Dict]:
    """Load a manifest's train split into model-ready arrays.

    Images are resized to input_size x input_size; per-channel mean/std
    are computed over the train images and returned in the stats dict so
    evaluation can normalize identically.
    """
    records = manifest.subset(split="train", magnification=magnification)
    if not records:
        raise DataError("manifest has no train-split records" +
                        (f" at magnification {magnification}" if magnification else ""))
    images = [resize(load_image(rec.path), input_size) for rec in records]
    mean, std = channel_stats(images)
    label_index = {c: i for i, c in enumerate(manifest.vocabulary)}
    for rec in records:
        if rec.class_label not in label_index:
            raise DataError(f"{rec.path}: label {rec.class_label!r} not in manifest vocabulary")
    data = TrainData(
        x=normalize_images(images, mean, std),
        y=np.asarray([label_index[r.class_label] for r in records], dtype=np.int64),
        patients=[r.patient_id for r in records],
    )
    stats = {
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
        "input_size": input_size,
        "vocabulary": list(manifest.vocabulary),
        "magnification": magnification,
    }
    return data, stats


def _holdout_validation(data: TrainData, fraction: float, seed: int) -> TrainData:
    """Move ~fraction of the samples into a validation set, whole patients
    at a time (greedy walk in seeded random order)."""
    groups: Dict[str, List[int]] = {}
    for idx, pid in enumerate(data.patients):
        key = pid if pid else f"\x00anon{idx}"
        groups.setdefault(key, []).append(idx)
    keys = sorted(groups)
    if len(keys) < 2:
        return data  # nothing to hold out without breaking patient disjointness
    rng = fork_rng(seed, "valsplit")
    order = [keys[i] for i in rng.permutation(len(keys))]
    target = fraction * len(data.x)
    val_idx: List[int] = []
    for key in order:
        if len(val_idx) >= target:
            break
        if len(keys) - 1 <= 0:
            break
        val_idx.extend(groups[key])
        keys.remove(key)
    if not val_idx or len(val_idx) == len(data.x):
        return data
    val_mask = np.zeros(len(data.x), dtype=bool)
    val_mask[val_idx] = True
    return TrainData(
        x=data.x[~val_mask],
        y=data.y[~val_mask],
        patients=[p for p, m in zip(data.patients, val_mask) if not m],
        x_val=data.x[val_mask],
        y_val=data.y[val_mask],
    )


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float((probs.argmax(axis=1) == labels).mean())


def predict_probs(model, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities over a sample array, batched."""
    rows = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb = Tensor(np.ascontiguousarray(x[start : start + batch_size]))
            rows.append(model.forward(xb, mode="eval").data)
    return np.concatenate(rows, axis=0)


def write_history(path, rows: List[Tuple]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def train(model, data, config: TrainConfig, out_dir=None,
          config_echo: Optional[Dict] = None) -> Tuple[List[Tuple], ckpt_mod.Checkpoint]:
    """Run the full schedule and return (history rows, final checkpoint).

    `data` is either prepared TrainData or a Manifest (whose train split is
    loaded, resized to the model's input size, and normalized with its own
    channel statistics — recorded in the checkpoint's config echo so
    evaluation can repeat the normalization).

    History rows are (epoch, lr, train_loss, train_acc, val_acc); lr is the
    epoch's staircase rate (the smooth decay applies per step on top of
    it), and val_acc is NaN when no validation samples exist. When
    `out_dir` is given, `checkpoint.irrc` and `history.csv` are written
    every `checkpoint_every` epochs and at the end; on divergence the most
    recent files are left in place and a numeric error is raised.
    """
    echo = dict(config_echo or {})
    if isinstance(data, Manifest):
        data, stats = prepare_train_data(data, model.config.input_shape[1])
        echo.setdefault("pipeline", stats)
    if data.x_val is None and config.val_fraction > 0:
        data = _holdout_validation(data, config.val_fraction, config.seed)
    echo.setdefault("model", _model_config_echo(model))
    echo.setdefault("train", train_config_echo(config))

    params = model.parameters()
    velocities = {name: np.zeros_like(t.data) for name, t in params.items()}
    n = len(data.x)
    history: List[Tuple] = []
    global_step = 0
    out_dir = Path(out_dir) if out_dir is not None else None

    def save(epoch: int) -> ckpt_mod.Checkpoint:
        state = ckpt_mod.checkpoint_from_model(
            model, velocities, echo, epoch=epoch, global_step=global_step, seed=config.seed
        )
        if out_dir is not None:
            ckpt_mod.save_checkpoint(out_dir / "checkpoint.irrc", state)
            write_history(out_dir / "history.csv", history)
        return state

    final_state = None
    for epoch in range(config.total_epochs):
        lr_epoch = lr_schedule(epoch, config)
        perm = fork_rng(config.seed, f"shuffle/epoch{epoch}").permutation(n)
        loss_sum = 0.0
        correct = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            xb = Tensor(np.ascontiguousarray(data.x[idx]))
            yb = data.y[idx]
            drop_rng = fork_rng(config.seed, f"dropout/e{epoch}/s{step}")
            probs = model.forward(xb, mode="train", rng=drop_rng)
            loss = cross_entropy(probs, yb)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                save_note = f" (last checkpoint retained in {out_dir})" if out_dir else ""
                raise NumericError(
                    f"training diverged: loss became {loss_value} at epoch {epoch}, "
                    f"step {step}{save_note}"
                )
            model.zero_grad()
            loss.backward()
            grads = {name: t.grad for name, t in params.items()}
            sgd_step({name: t.data for name, t in params.items()}, grads, velocities,
                     effective_lr(epoch, global_step, config), config.momentum)
            global_step += 1
            loss_sum += loss_value * len(idx)
            correct += int((probs.data.argmax(axis=1) == yb).sum())

        train_loss = loss_sum / n
        train_acc = correct / n
        if data.x_val is not None and len(data.x_val):
            val_acc = _accuracy(predict_probs(model, data.x_val, config.batch_size), data.y_val)
        else:
            val_acc = float("nan")
        history.append((epoch, lr_epoch, train_loss, train_acc, val_acc))

        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.total_epochs:
            final_state = save(epoch)

    if final_state is None or final_state.epoch != config.total_epochs - 1:
        final_state = save(config.total_epochs - 1)
    return history, final_state


def _model_config_echo(model) -> Dict:
    cfg = model.config
    return {
        "num_classes": cfg.num_classes,
        "input_shape": list(cfg.input_shape),
        "stem_widths": list(cfg.stem_widths),
        "block_widths": list(cfg.block_widths),
        "irrus_per_block": cfg.irrus_per_block,
        "time_steps": cfg.time_steps,
        "activation": cfg.activation,
        "dropout_p": cfg.dropout_p,
        "classifier_hidden": cfg.classifier_hidden,
    }


def train_config_echo(config: TrainConfig) -> Dict:
    return {
        "initial_lr": config.initial_lr,
        "momentum": config.momentum,
        "decay": config.decay,
        "epochs_per_trial": config.epochs_per_trial,
        "trials": config.trials,
        "batch_size": config.batch_size,
        "loss": config.loss,
        "seed": config.seed,
        "checkpoint_every": config.checkpoint_every,
        "val_fraction": config.val_fraction,
    }
