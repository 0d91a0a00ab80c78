"""Training recipe: Adam, reduce-LR-on-plateau, early stopping, runtime augmentation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import functional as F
from .augmentation import AugmentationPolicy, augment_batch
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import Normalization, TaskMode
from .metrics import MetricsReport, auc_roc_ovr, confusion, summarize
from .model import Model
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

_SHUFFLE_STREAM = 0x5348464C


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 1000
    lr_decay_factor: float = 0.1
    lr_decay_patience: int = 5
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    monitor: str = "val_loss"
    seed: int = 0
    task: str = "fine18"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.lr_decay_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.monitor not in ("val_loss", "val_accuracy"):
            raise ValueError("monitor must be val_loss or val_accuracy")
        TaskMode.parse(self.task)


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_checkpoint(self) -> tuple:
        arrays = {f"m:{k}": a for k, a in self.m.items()}
        arrays.update({f"v:{k}": a for k, a in self.v.items()})
        meta = {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        return meta, arrays

    @classmethod
    def from_checkpoint(cls, meta: dict, arrays: dict) -> "OptimizerState":
        st = cls(t=int(meta["t"]), beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        for k, a in arrays.items():
            kind, name = k.split(":", 1)
            (st.m if kind == "m" else st.v)[name] = a.copy()
        return st


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]],
              state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name} ({bad} entries); step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


# -- plateau logic ------------------------------------------------------------

class PlateauTracker:
    """Counts epochs without a ``min_delta`` improvement of a monitored value."""

    def __init__(self, mode: str = "min", min_delta: float = 1e-4):
        self.mode = mode
        self.min_delta = min_delta
        self.best: Optional[float] = None
        self.wait = 0

    def improved(self, value: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "min":
            return value <= self.best - self.min_delta
        return value >= self.best + self.min_delta

    def update(self, value: float) -> bool:
        if self.improved(value):
            self.best = value
            self.wait = 0
            return True
        self.wait += 1
        return False

    def state(self) -> dict:
        return {"best": self.best, "wait": self.wait}

    def load(self, d: dict) -> None:
        self.best, self.wait = d["best"], d["wait"]


class ReduceLROnPlateau:
    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, mode: str = "min",
                 min_delta: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.tracker = PlateauTracker(mode, min_delta)

    def step(self, value: float) -> bool:
        """Feed one epoch's metric; True when the rate was just decayed."""
        self.tracker.update(value)
        if self.tracker.wait >= self.patience:
            self.lr *= self.factor
            self.tracker.wait = 0
            return True
        return False


class EarlyStopping:
    def __init__(self, patience: int = 10, mode: str = "min", min_delta: float = 1e-4):
        self.patience = patience
        self.tracker = PlateauTracker(mode, min_delta)
        self.best_epoch = 0

    def step(self, value: float, epoch: int) -> tuple:
        """Returns ``(improved, stop)``."""
        improved = self.tracker.update(value)
        if improved:
            self.best_epoch = epoch
        return improved, self.tracker.wait >= self.patience


def _mode(config: TrainConfig) -> str:
    return "min" if config.monitor == "val_loss" else "max"


def schedule_step(history_values: List[float], lr: float, config: TrainConfig) -> tuple:
    """Replay a metric trace through the scheduler; returns ``(lr, decayed_on_last_epoch)``."""
    sched = ReduceLROnPlateau(lr, config.lr_decay_factor, config.lr_decay_patience,
                              _mode(config), config.min_delta)
    decayed = False
    for v in history_values:
        decayed = sched.step(v)
    return sched.lr, decayed


def early_stop_check(history_values: List[float], config: TrainConfig) -> tuple:
    """Replay a metric trace; returns ``("stop" | "continue", best_epoch)`` (1-based)."""
    stopper = EarlyStopping(config.early_stop_patience, _mode(config), config.min_delta)
    for epoch, v in enumerate(history_values, start=1):
        _, stop = stopper.step(v, epoch)
        if stop:
            return "stop", stopper.best_epoch
    return "continue", stopper.best_epoch


# -- history ------------------------------------------------------------------

HISTORY_FIELDS = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "event"]


@dataclass
class TrainHistory:
    records: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def series(self, key: str) -> List[float]:
        return [r[key] for r in self.records]

    def comparable(self) -> list:
        """Records without wall-clock fields, for reproducibility checks."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_dict(self) -> dict:
        return {"records": self.records, "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(list(d["records"]), d["best_epoch"], d["stop_reason"])


# -- loops --------------------------------------------------------------------

def _batches(n: int, batch_size: int):
    for s in range(0, n, batch_size):
        yield s, min(n, s + batch_size)


def predict(model: Model, images: np.ndarray, batch_size: int = 32,
            normalization: Optional[Normalization] = None) -> np.ndarray:
    """Eval-mode class probabilities for an image array."""
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for s, e in _batches(len(images), batch_size):
            x = images[s:e]
            if normalization is not None:
                x = normalization.apply(x)
            logits = model(Tensor(x.astype(model.head_weight.dtype, copy=False)))
            out.append(F.softmax(logits.data.astype(np.float64)))
    model.train(was)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def _eval_loss_acc(model, dataset, batch_size, normalization):
    idx = np.arange(len(dataset))
    total_loss = 0.0
    correct = 0
    for s, e in _batches(len(idx), batch_size):
        x, y = dataset.get(idx[s:e])
        probs = predict(model, x, batch_size, normalization)
        p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
        total_loss += float(-np.log(p).sum())
        correct += int((probs.argmax(axis=1) == y).sum())
    n = max(len(idx), 1)
    return total_loss / n, correct / n


def train(model: Model, train_set, val_set, config: TrainConfig,
          policy: Optional[AugmentationPolicy] = None,
          normalization: Optional[Normalization] = None,
          run_dir=None, resume: bool = False, log=None) -> TrainHistory:
    """Run the epoch loop and leave the best-epoch weights in ``model``.

    ``train_set``/``val_set`` expose ``len()`` and ``get(indices) -> (images,
    labels)`` with images in [0, 1]; augmentation runs before normalization.
    With ``run_dir`` set, ``checkpoints/best.ckpt`` and ``checkpoints/last.ckpt``
    are written each epoch; ``resume=True`` continues from ``last.ckpt``.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    policy = policy if policy is not None else AugmentationPolicy.none()
    policy.validate()
    log = log or (lambda msg: logger.info(msg))
    mode = _mode(config)
    sched = ReduceLROnPlateau(config.learning_rate, config.lr_decay_factor,
                              config.lr_decay_patience, mode, config.min_delta)
    stopper = EarlyStopping(config.early_stop_patience, mode, config.min_delta)
    opt = OptimizerState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    history = TrainHistory()
    best_snapshot = model.snapshot()
    start_epoch = 1

    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if ckpt_dir is None or not (ckpt_dir / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no checkpoints/last.ckpt in the run directory")
        last, opt_blob = load_checkpoint(ckpt_dir / "last.ckpt", with_optimizer=True)
        model.restore(last.snapshot())
        meta = opt_blob["meta"]
        opt = OptimizerState.from_checkpoint(meta["adam"], opt_blob["arrays"])
        history = TrainHistory.from_dict(meta["history"])
        sched.lr = meta["lr"]
        sched.tracker.load(meta["sched"])
        stopper.tracker.load(meta["stop"])
        stopper.best_epoch = meta["best_epoch"]
        _, best_arrays, _ = read_checkpoint(ckpt_dir / "best.ckpt")
        best_snapshot = {k: a.copy() for k, a in best_arrays.items()}
        start_epoch = len(history.records) + 1
        if history.stop_reason == "early_stop" or len(history.records) >= config.max_epochs:
            model.restore(best_snapshot)
            return history
        history.stop_reason = ""  # a larger max_epochs extends a finished run

    n = len(train_set)
    stop_reason = "max_epochs"
    for epoch in range(start_epoch, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        order = np.random.default_rng([_SHUFFLE_STREAM, config.seed, epoch]).permutation(n)
        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        for s, e in _batches(n, config.batch_size):
            idx = order[s:e]
            if len(idx) < 2 and seen:
                continue  # batch-norm statistics need at least two samples
            x, y = train_set.get(idx)
            x, y = augment_batch(x, y, policy, config.seed, epoch, idx)
            if normalization is not None:
                x = normalization.apply(x)
            model.zero_grad()
            logits = model(Tensor(x.astype(model.head_weight.dtype, copy=False)))
            loss, probs = F.softmax_cross_entropy(logits, y)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"training loss became {lv} in epoch {epoch}")
            backward(loss)
            try:
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, opt, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{exc} in epoch {epoch}") from exc
            loss_sum += lv * len(y)
            correct += int((probs.data.argmax(axis=1) == y).sum())
            seen += len(y)
        val_loss, val_acc = _eval_loss_acc(model, val_set, config.batch_size, normalization)
        monitored = val_loss if config.monitor == "val_loss" else val_acc
        events = []
        improved, stop = stopper.step(monitored, epoch)
        if improved:
            best_snapshot = model.snapshot()
            events.append("best")
        if sched.step(monitored):
            events.append(f"lr_decay:{sched.lr!r}")
        if stop:
            events.append("early_stop")
        history.records.append({
            "epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "train_acc": correct / seen,
            "val_loss": val_loss, "val_acc": val_acc, "event": ";".join(events),
            "wall_time": time.perf_counter() - t0,
        })
        history.best_epoch = stopper.best_epoch
        log(f"epoch {epoch:4d} lr {lr:.2e} train_loss {loss_sum / seen:.4f} "
            f"train_acc {correct / seen:.4f} val_loss {val_loss:.4f} val_acc {val_acc:.4f} {' '.join(events)}")
        if stop:
            stop_reason = "early_stop"
            history.stop_reason = stop_reason
        elif epoch == config.max_epochs:
            history.stop_reason = stop_reason
        if ckpt_dir is not None:
            if improved:
                _save_best(model, best_snapshot, ckpt_dir / "best.ckpt")
            meta, arrays = opt.to_checkpoint()
            save_checkpoint(model, ckpt_dir / "last.ckpt", optimizer={
                "meta": {"adam": meta, "history": history.to_dict(), "lr": sched.lr,
                         "sched": sched.tracker.state(), "stop": stopper.tracker.state(),
                         "best_epoch": stopper.best_epoch},
                "arrays": arrays,
            })
        if stop:
            break
    model.restore(best_snapshot)
    return history


def _save_best(model: Model, snapshot, path) -> None:
    current = model.snapshot()
    model.restore(snapshot)
    save_checkpoint(model, path)
    model.restore(current)


def evaluate(model: Model, dataset, task=None, batch_size: int = 32,
             normalization: Optional[Normalization] = None) -> MetricsReport:
    """Eval-mode metrics over a dataset whose labels are in the model's label space.

    When the model was trained on the 18-class task and ``task`` is coarser,
    predictions and labels are projected (probabilities summed per group).
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    model_task = TaskMode.parse(model.meta.get("task", _task_for(model.config.num_classes)))
    task = model_task if task is None else TaskMode.parse(task)
    if model.config.num_classes != model_task.num_classes:
        raise ValueError(f"model has {model.config.num_classes} outputs but task {model_task.value}")
    if task is not model_task and model_task is not TaskMode.FINE18:
        raise ValueError(f"cannot evaluate a {model_task.value} model on task {task.value}")
    idx = np.arange(len(dataset))
    probs, labels = [], []
    for s, e in _batches(len(idx), batch_size):
        x, y = dataset.get(idx[s:e])
        probs.append(predict(model, x, batch_size, normalization))
        labels.append(y)
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    preds = probs.argmax(axis=1)
    if task is not model_task:
        # coarse prediction = group of the fine argmax; scores summed per group for AUC
        preds = task.project_fine(preds)
        probs = task.project_fine_scores(probs)
        labels = task.project_fine(labels)
    k = task.num_classes
    return summarize(confusion(labels, preds, k), auc_roc_ovr(probs, labels, k),
                     task.class_names(), extra={"task": task.value})


def _task_for(num_classes: int) -> str:
    return {18: "fine18", 6: "fruit6", 3: "quality3"}.get(num_classes, "fine18")
