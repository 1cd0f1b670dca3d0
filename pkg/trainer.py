"""
Two-phase transfer learning: feature extraction with a frozen backbone, then
fine-tuning with a reduced backbone learning rate. AdamW with per-group
cosine warm-restart schedules, class-weighted BCE, early stopping on
validation AUC and checkpointing.
"""
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from data import RoiDataset, SplitAssignment, iter_batches
from errors import ContractError, DataError, DigestMismatchError, NumericError, StorageError, UndefinedMetricError
from fusion import Params, init_model_params, is_backbone, logits_forward, model_forward, parameter_counts
from logger import logger
from metrics import roc_auc
from models import ExperimentConfig, HistoryRow, ModelConfig
from tensor import DiffArray, Function, Tape, constant, parameter, stable_sigmoid

PHASES = ("feature_extraction", "fine_tuning")
HISTORY_COLUMNS = ["epoch", "phase", "train_loss", "val_loss", "val_auc", "lr_new", "lr_backbone"]


# ============================================================================
# LOSS
# ============================================================================

def class_weights(labels) -> Tuple[float, float]:
    """w_c = n / (2 n_c): a balanced set gets (1, 1)"""
    labels = np.asarray(labels)
    n = labels.size
    n1 = int(np.sum(labels == 1))
    n0 = int(np.sum(labels == 0))
    if n0 + n1 != n:
        raise ContractError("labels must be 0 or 1")
    if n0 == 0 or n1 == 0:
        raise DataError(f"class weights need both classes (n0={n0}, n1={n1})")
    return n / (2 * n0), n / (2 * n1)


class WeightedBCE(Function):
    """Mean of w_i * BCE(sigmoid(z_i), y_i) in the overflow-free logit form"""
    name = "weighted_bce"

    def forward(self, z, labels, weights):
        self.z, self.labels, self.weights = z, labels, weights
        per_sample = np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(np.mean(weights * per_sample))

    def backward(self, grad):
        return (grad * self.weights * (stable_sigmoid(self.z) - self.labels) / self.z.size,)


def weighted_bce(
    logits: DiffArray,
    labels,
    weights: Tuple[float, float] = (1.0, 1.0),
    sample_weights: Optional[Sequence[float]] = None,
) -> DiffArray:
    labels = np.asarray(labels, dtype=logits.data.dtype)
    if labels.shape != logits.shape:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    per_sample = np.where(labels == 1, weights[1], weights[0]).astype(logits.data.dtype)
    if sample_weights is not None:
        per_sample = per_sample * np.asarray(sample_weights, dtype=logits.data.dtype)
    return WeightedBCE.apply(logits, labels=labels, weights=per_sample)


# ============================================================================
# OPTIMIZER AND SCHEDULE
# ============================================================================

def adamw_step(
    theta: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One decoupled-weight-decay Adam update; `t` is the 1-based step number.
    Returns new (theta, m, v) arrays in the dtype of `theta`.
    """
    if not (theta.shape == grad.shape == m.shape == v.shape):
        raise ContractError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}")
    beta1, beta2 = betas
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta.astype(m.dtype, copy=False), m, v


class AdamW:
    """Moment buffers and step counts per parameter name"""

    def __init__(self, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.steps: Dict[str, int] = {}

    def step(self, params: Params, grads: Dict[str, np.ndarray], lrs: Dict[str, float]) -> None:
        """Update every parameter named in `grads`; parameter data is replaced, never mutated"""
        for name, grad in grads.items():
            param = params[name]
            grad = np.asarray(grad, dtype=param.data.dtype)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
            t = self.steps.get(name, 0) + 1
            theta, self.m[name], self.v[name] = adamw_step(
                param.data, grad, m, self.v[name], t, lrs[name], self.betas, self.eps, self.weight_decay)
            self.steps[name] = t
            param.data = theta

    def hyperparams(self) -> dict:
        return {"betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}


def cosine_lr(t_cur: float, t_i: float, eta_max: float, eta_min: float) -> float:
    return eta_min + 0.5 * (eta_max - eta_min) * (1 + math.cos(math.pi * t_cur / t_i))


def cycle_position(epoch: int, t0: int, t_mult: int) -> Tuple[int, int]:
    """(T_cur, T_i) for a 0-based epoch"""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    t_i = t0
    while epoch >= t_i:
        epoch -= t_i
        t_i *= t_mult
    return epoch, t_i


@dataclass
class Schedule:
    eta_max: float
    t0: int = 10
    t_mult: int = 2
    eta_min: Optional[float] = None

    def __post_init__(self):
        if self.eta_min is None:
            self.eta_min = self.eta_max / 100
        if self.eta_min > self.eta_max or self.t0 < 1 or self.t_mult < 1:
            raise ContractError(f"invalid schedule {self}")

    def lr(self, epoch: int) -> float:
        return cosine_wr_lr(epoch, self)

    def restarts(self, epochs: int) -> List[int]:
        return [e for e in range(1, epochs) if cycle_position(e, self.t0, self.t_mult)[0] == 0]


def cosine_wr_lr(epoch: int, sched: Schedule) -> float:
    t_cur, t_i = cycle_position(epoch, sched.t0, sched.t_mult)
    return cosine_lr(t_cur, t_i, sched.eta_max, sched.eta_min)


def early_stop(history: Sequence[Optional[float]], patience: int = 10, min_delta: float = 1e-4) -> bool:
    """
    True once the best validation AUC has gone `patience` consecutive epochs
    without an improvement larger than `min_delta`; undefined AUCs never
    count as improvements.
    """
    if patience < 1:
        raise ContractError("patience must be >= 1")
    best = -math.inf
    stale = 0
    for auc in history:
        if auc is not None and auc > best + min_delta:
            best, stale = auc, 0
        else:
            stale += 1
    return stale >= patience


# ============================================================================
# TRAINER
# ============================================================================

def predictor(params: Params, model_cfg: ModelConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Batch of normalized images -> malignancy probabilities; records nothing"""
    def predict(images: np.ndarray) -> np.ndarray:
        return model_forward(constant(images), params, model_cfg).numpy()
    return predict


def write_history(rows: Sequence[HistoryRow], path) -> Path:
    path = Path(path)
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=HISTORY_COLUMNS)
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as exc:
        raise StorageError(f"cannot write history {path}: {exc}") from exc
    return path


class Trainer:
    """
    Runs both training phases for one experiment.

    The global epoch counter drives the learning-rate schedules; early
    stopping is judged on the rows of the current phase only.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        train_set: RoiDataset,
        val_set: RoiDataset,
        split: SplitAssignment,
        out_dir,
    ):
        self.config = config
        self.train_set = train_set
        self.val_set = val_set
        self.split = split
        self.out_dir = Path(out_dir)
        self.train_idx = split.indices(train_set.records, "train")
        self.val_idx = split.indices(val_set.records, "val")
        if not self.train_idx:
            raise DataError("training split is empty")

        train_cfg = config.train
        size = config.data.image_size
        self.params: Params = init_model_params(config.model, (size, size), train_cfg.seed)
        self.parameter_counts = parameter_counts(self.params)
        logger.info(f"Model {config.model.variant}: {self.parameter_counts['total']:,} parameters "
                    f"in {len(self.params)} tensors {self.parameter_counts}")
        self.optimizer = AdamW(train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
        ratio = train_cfg.eta_min_ratio
        self.schedules = {
            "new": Schedule(train_cfg.lr_new, train_cfg.t0, train_cfg.t_mult, train_cfg.lr_new * ratio),
            "backbone": Schedule(train_cfg.lr_backbone, train_cfg.t0, train_cfg.t_mult, train_cfg.lr_backbone * ratio),
        }
        labels = train_set.labels[self.train_idx]
        self.loss_weights = class_weights(labels) if train_cfg.loss_weights == "inverse_frequency" else (1.0, 1.0)
        self.shuffle_rng = np.random.default_rng(train_cfg.seed)
        self.history: List[HistoryRow] = []
        self.best_auc: Optional[float] = None
        self.step_count = 0
        self.config_digest = config.digest()
        self.split_digest = split.digest()

    # ------------------------------------------------------------------ steps

    def phase_lengths(self) -> Dict[str, int]:
        train_cfg = self.config.train
        if train_cfg.shared_budget:
            return {PHASES[0]: train_cfg.phase1_epochs, PHASES[1]: train_cfg.epochs - train_cfg.phase1_epochs}
        return {PHASES[0]: train_cfg.epochs, PHASES[1]: train_cfg.epochs}

    def trainable(self, phase: str) -> List[str]:
        if phase not in PHASES:
            raise ContractError(f"unknown phase {phase!r}")
        if phase == "feature_extraction":
            return [name for name in self.params if not is_backbone(name)]
        return list(self.params)

    def learning_rates(self, epoch: int, phase: str) -> Tuple[float, float]:
        """(new-layer lr, backbone lr); the backbone lr is 0 while frozen"""
        lr_new = self.schedules["new"].lr(epoch)
        lr_backbone = self.schedules["backbone"].lr(epoch) if phase == "fine_tuning" else 0.0
        return lr_new, lr_backbone

    def train_step(self, images: np.ndarray, labels: np.ndarray, phase: str, epoch: int) -> float:
        """Forward, backward and one optimizer update on a single batch"""
        names = set(self.trainable(phase))
        for name, param in self.params.items():
            param.requires_grad = name in names
            param.grad = None

        with Tape() as tape:
            logits = logits_forward(constant(images), self.params, self.config.model)
            loss = weighted_bce(logits, labels, self.loss_weights)
        value = loss.item()
        if not math.isfinite(value):
            self._numeric_failure(f"non-finite loss {value}", phase, epoch, labels)
        tape.backward(loss)

        grads = {name: self.params[name].grad for name in self.params if name in names}
        bad = [name for name, g in grads.items() if g is None or not np.all(np.isfinite(g))]
        if bad:
            self._numeric_failure(f"non-finite gradients in {bad[:5]}", phase, epoch, labels)

        lr_new, lr_backbone = self.learning_rates(epoch, phase)
        lrs = {name: (lr_backbone if is_backbone(name) else lr_new) for name in grads}
        self.optimizer.step(self.params, grads, lrs)
        self.step_count += 1
        return value

    def _numeric_failure(self, reason: str, phase: str, epoch: int, labels: np.ndarray) -> None:
        stats = {
            name: {
                "finite": bool(np.all(np.isfinite(p.data))),
                "max_abs": float(np.max(np.abs(p.data))) if np.all(np.isfinite(p.data)) else None,
            }
            for name, p in self.params.items()
        }
        dump = {
            "reason": reason,
            "phase": phase,
            "epoch": epoch,
            "step": self.step_count,
            "batch_labels": [int(y) for y in labels],
            "params": stats,
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "nan_diagnostic.json"
        path.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        raise NumericError(f"{reason} at epoch {epoch} ({phase}); diagnostic written to {path}")

    # ---------------------------------------------------------------- epochs

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predictor(self.params, self.config.model)(images)

    def validate(self) -> Tuple[float, Optional[float]]:
        """(weighted validation loss, validation AUC or None when undefined)"""
        if not self.val_idx:
            return float("nan"), None
        total, count = 0.0, 0
        scores, labels = [], []
        for images, batch_labels, _ in iter_batches(
                self.val_set, self.val_idx, self.config.eval.batch_size, workers=self.config.data.workers):
            logits = logits_forward(constant(images), self.params, self.config.model)
            total += weighted_bce(logits, batch_labels, self.loss_weights).item() * batch_labels.size
            count += batch_labels.size
            scores.append(1.0 / (1.0 + np.exp(-logits.numpy().astype(np.float64))))
            labels.append(batch_labels)
        try:
            auc = roc_auc(np.concatenate(scores), np.concatenate(labels))
        except UndefinedMetricError:
            auc = None
        return total / max(count, 1), auc

    def train_epoch(self, phase: str) -> HistoryRow:
        epoch = len(self.history)
        order = self.shuffle_rng.permutation(np.asarray(self.train_idx))
        total, count = 0.0, 0
        for images, labels, _ in iter_batches(
                self.train_set, order, self.config.train.batch_size, epoch=epoch, workers=self.config.data.workers):
            total += self.train_step(images, labels, phase, epoch) * labels.size
            count += labels.size
        if count == 0:
            raise DataError("no loadable training samples")

        val_loss, val_auc = self.validate()
        lr_new, lr_backbone = self.learning_rates(epoch, phase)
        row = HistoryRow(
            epoch=epoch, phase=phase, train_loss=total / count, val_loss=val_loss,
            val_auc=val_auc, lr_new=lr_new, lr_backbone=lr_backbone,
        )
        self.history.append(row)
        auc_text = "undefined" if val_auc is None else f"{val_auc:.4f}"
        logger.info(
            f"Epoch {epoch} [{phase}] train_loss={row.train_loss:.4f} val_loss={val_loss:.4f} "
            f"val_auc={auc_text} lr_new={lr_new:.2e} lr_backbone={lr_backbone:.2e}"
        )
        return row

    def phase_finished(self, phase: str) -> bool:
        rows = [row for row in self.history if row.phase == phase]
        if phase == PHASES[0] and any(row.phase == PHASES[1] for row in self.history):
            return True
        if len(rows) >= self.phase_lengths()[phase]:
            return True
        train_cfg = self.config.train
        return bool(rows) and early_stop([row.val_auc for row in rows], train_cfg.patience, train_cfg.min_delta)

    def train_phase(self, phase: str) -> List[HistoryRow]:
        """Run epochs of `phase` until its budget is spent or early stopping fires"""
        rows = []
        logger.info(f"Starting phase {phase} ({len(self.trainable(phase))} trainable tensors)")
        while not self.phase_finished(phase):
            row = self.train_epoch(phase)
            rows.append(row)
            if row.val_auc is not None and (self.best_auc is None or row.val_auc > self.best_auc):
                self.best_auc = row.val_auc
                self.save(self.out_dir / "checkpoints" / "best")
            self.save(self.out_dir / "checkpoints" / "last")
            write_history(self.history, self.out_dir / "history.csv")
        return rows

    def fit(self) -> List[HistoryRow]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for phase in PHASES:
            self.train_phase(phase)
        best = self.out_dir / "checkpoints" / "best"
        if not best.exists():
            self.save(best)
        write_history(self.history, self.out_dir / "history.csv")
        logger.info(f"Training finished after {len(self.history)} epochs; best val AUC {self.best_auc}")
        return self.history

    # ------------------------------------------------------------ checkpoints

    def to_checkpoint(self) -> Checkpoint:
        phase = self.history[-1].phase if self.history else PHASES[0]
        return Checkpoint(
            params={name: p.data for name, p in self.params.items()},
            adam_m=dict(self.optimizer.m),
            adam_v=dict(self.optimizer.v),
            meta={
                "config": self.config.model_dump(mode="json"),
                "config_digest": self.config_digest,
                "split_digest": self.split_digest,
                "epoch": len(self.history),
                "phase": phase,
                "best_auc": self.best_auc,
                "step": self.step_count,
                "optimizer": {"steps": dict(self.optimizer.steps), **self.optimizer.hyperparams()},
                "schedule": {name: vars(s).copy() for name, s in self.schedules.items()},
                "rng_state": self.shuffle_rng.bit_generator.state,
                "history": [row.model_dump() for row in self.history],
            },
        )

    def save(self, path) -> Path:
        return save_checkpoint(self.to_checkpoint(), path)

    def restore(self, checkpoint: Checkpoint) -> None:
        """Resume from `checkpoint`; refuses one made under another config or split"""
        if checkpoint.config_digest != self.config_digest or checkpoint.split_digest != self.split_digest:
            raise DigestMismatchError("checkpoint was produced under a different config or split")
        missing = set(self.params) ^ set(checkpoint.params)
        if missing:
            raise DataError(f"checkpoint tensors do not match the model: {sorted(missing)[:5]}")
        for name, value in checkpoint.params.items():
            self.params[name] = parameter(value.copy(), name=name)
        meta = checkpoint.meta
        self.optimizer.m = {k: v.copy() for k, v in checkpoint.adam_m.items()}
        self.optimizer.v = {k: v.copy() for k, v in checkpoint.adam_v.items()}
        self.optimizer.steps = {k: int(v) for k, v in meta["optimizer"]["steps"].items()}
        self.shuffle_rng.bit_generator.state = meta["rng_state"]
        self.history = [HistoryRow(**row) for row in meta["history"]]
        self.best_auc = meta["best_auc"]
        self.step_count = int(meta.get("step", 0))
        logger.info(f"Resumed from epoch {len(self.history)} (step {self.step_count})")

    def resume(self, path) -> None:
        self.restore(load_checkpoint(path, self.config_digest, self.split_digest))
