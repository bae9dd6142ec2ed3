"""Loss construction, Adam, and the per-fold training loop.

Training supervision mirrors the evaluation protocol: within the training
split, each student's last quiz is the prediction target and the earlier
quizzes are the history ("last_quiz" policy). The "rolling" policy expands
every student into one training unit per prefix (quiz j predicted from
quizzes 1..j-1) and exists for comparison runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from .data import expand_prefixes, make_target_split
from .errors import ConfigError, NumericError, UndefinedMetricError

TARGET_POLICIES = ("last_quiz", "rolling")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every_epochs: int = 3
    epochs: int = 30
    lambda_reg: float = 1e-5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    target_policy: str = "last_quiz"

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every_epochs < 1:
            raise ConfigError("batch_size, epochs, and decay_every_epochs must be >= 1")
        if self.lr0 <= 0 or not (0 < self.decay_factor <= 1):
            raise ConfigError("lr0 must be positive and decay_factor in (0, 1]")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if self.target_policy not in TARGET_POLICIES:
            raise ConfigError(f"target_policy must be one of {TARGET_POLICIES}")
        return self


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 scaled by decay_factor every decay_every_epochs epochs."""
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


def cross_entropy(predictions: ad.Tensor, labels) -> ad.Tensor:
    """Summed binary cross-entropy; predictions must lie strictly in (0, 1)."""
    y = predictions.data
    if y.size == 0:
        raise NumericError("cross_entropy: no predictions")
    if (y <= 0).any() or (y >= 1).any():
        raise NumericError("cross_entropy: predictions must lie strictly in (0, 1)")
    lab = ad.constant(np.asarray(labels, dtype=np.float64).reshape(y.shape))
    hit = ad.mul(lab, ad.log(predictions))
    miss = ad.mul(ad.one_minus(lab), ad.log(ad.one_minus(predictions)))
    return ad.scale(ad.sum_all(ad.add(hit, miss)), -1.0)


def l2_penalty(tensors) -> ad.Tensor:
    """Sum of squared entries over the given parameter tensors."""
    return ad.add_n([ad.sum_all(ad.mul(t, t)) for t in tensors])


def loss(predictions: ad.Tensor, labels, param_tensors, lambda_reg: float) -> ad.Tensor:
    """Cross-entropy plus lambda times the squared parameter norm."""
    ce = cross_entropy(predictions, labels)
    if lambda_reg > 0:
        return ad.add(ce, ad.scale(l2_penalty(param_tensors), lambda_reg))
    return ce


class AdamState:
    """First/second moment accumulators and the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(f"adam_step: gradient shape {g.shape} vs parameter {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_auc: float
    val_rmse: float
    val_r2: float


@dataclass
class TrainResult:
    params: object            # best-validation-AUC snapshot (final when no val)
    final_params: object
    log: list
    best_epoch: int
    n_steps: int


def _training_units(students, policy):
    """(history, targets) training units. last_quiz yields one unit per
    student; rolling expands every quiz prefix into its own unit, so each
    quiz is predicted from its preceding history and units shuffle
    independently into batches."""
    if policy == "rolling":
        students = expand_prefixes(students)
    return [make_target_split(ps) for ps in students]


def train(net, train_students, val_students, cfg: TrainConfig) -> TrainResult:
    """Run the full schedule on one fold and log per-epoch metrics.

    train_loss is the mean cross-entropy per target interaction; validation
    metrics come from scoring each held-out student's last quiz. A non-finite
    loss aborts with the offending batch in the message.
    """
    cfg.validate()
    units = _training_units(train_students, cfg.target_policy)
    if not units:
        raise ConfigError("no training units: every student was filtered out")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(net.params, cfg.beta1, cfg.beta2, cfg.epsilon)
    log = []
    best = None
    best_auc = -np.inf
    best_epoch = -1
    n_steps = 0

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(units))
        ce_total = 0.0
        n_targets = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [units[i] for i in order[lo:lo + cfg.batch_size]]
            net.params.zero_grad()
            parts = []
            batch_targets = 0
            for history, targets in batch:
                preds, _ = net.forward(history, [e for e, _ in targets])
                parts.append(cross_entropy(preds, [a for _, a in targets]))
                batch_targets += len(targets)
            total = parts[0] if len(parts) == 1 else ad.add_n(parts)
            ce_value = float(total.data)
            if cfg.lambda_reg > 0:
                total = ad.add(total, ad.scale(l2_penalty(net.params.tensors()), cfg.lambda_reg))
            if not np.isfinite(float(total.data)):
                students = [h.student_id for h, _ in batch]
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {lo}: students {students}")
            ad.backward(total)
            adam_step(net.params, state, lr)
            n_steps += 1
            ce_total += ce_value
            n_targets += batch_targets

        if val_students:
            try:
                with ad.no_grad():
                    val = metrics_mod.evaluate(net, val_students)
                val_auc, val_rmse, val_r2 = val.auc, val.rmse, val.r2
            except UndefinedMetricError:
                val_auc = val_rmse = val_r2 = float("nan")
        else:
            val_auc = val_rmse = val_r2 = float("nan")
        log.append(EpochRecord(epoch, lr, ce_total / n_targets, val_auc, val_rmse, val_r2))
        if val_students and val_auc > best_auc:
            best_auc = val_auc
            best = net.params.copy()
            best_epoch = epoch

    if best is None:
        best = net.params.copy()
        best_epoch = cfg.epochs - 1
    return TrainResult(best, net.params, log, best_epoch, n_steps)


EPOCH_LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_auc", "val_rmse", "val_r2"]


def write_epoch_log(path, log):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_LOG_COLUMNS)
        for r in log:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss),
                        repr(r.val_auc), repr(r.val_rmse), repr(r.val_r2)])
