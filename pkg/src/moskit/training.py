"""Training loops: SGD+momentum, triangular cyclical LR, accumulation.

The regression model trains with length-sorted micro-batches whose
gradients are accumulated into an effective batch (8 x 10 = 80 by
default), a triangular cyclical learning rate between 0.0005 and 0.005
(full cycle 200 updates), and early stopping on validation L1. If the
stopped model's validation predictions do not cover the score range
(minimum above 1.5 or maximum below 4.5), training resumes unchanged, up
to a restart cap.

The classification model transfers the best regression weights (new final
layer) and trains in three phases: projection frozen at lr 0.0005 / batch
100, then batch x1.5 and lr x0.2, then everything unfrozen at batch 8.

All randomness flows from the run seed, so two runs with the same
configuration produce byte-identical history CSVs in 64-bit mode.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .batching import pad_and_mask, plan_sorted
from .dataset import Dataset, class_weights, load_features, mos_to_class
from .errors import InvalidInputError, NumericError
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    loss_classification,
    loss_mse,
    loss_regression,
    parameter_names,
    transfer_from_regression,
)


@dataclass
class CyclicalLr:
    """Triangular learning-rate schedule, peak at half cycle."""

    base_lr: float = 0.0005
    max_lr: float = 0.005
    cycle_len: int = 200

    def __post_init__(self):
        if not (0 < self.base_lr <= self.max_lr):
            raise InvalidInputError("need 0 < base_lr <= max_lr")
        if self.cycle_len < 2 or self.cycle_len % 2:
            raise InvalidInputError("cycle length must be even and >= 2")

    def __call__(self, iteration: int) -> float:
        return cyclical_lr(iteration, self.base_lr, self.max_lr, self.cycle_len)


def cyclical_lr(iteration: int, base_lr: float = 0.0005, max_lr: float = 0.005,
                cycle_len: int = 200) -> float:
    """Learning rate at an update index under the triangular schedule.

    Rises linearly from base to max over the first half cycle and falls
    back over the second: base at 0, max at cycle_len/2, base at cycle_len.
    """
    half = cycle_len / 2.0
    pos = iteration % cycle_len
    return base_lr + (max_lr - base_lr) * (1.0 - abs(pos - half) / half)


@dataclass
class OptimizerState:
    """Momentum buffers, one per parameter tensor."""

    momentum: float
    buffers: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, params: ModelParams, momentum: float = 0.9) -> "OptimizerState":
        return cls(momentum, {k: np.zeros_like(v) for k, v in params.tensors.items()})


def sgd_momentum_step(params: ModelParams, grads: dict, state: OptimizerState,
                      lr: float, frozen: frozenset | set = frozenset()) -> None:
    """In-place update: v <- mu*v + g; p <- p - lr*v, skipping frozen layers.

    Frozen layers keep both their parameters and momentum buffers
    bit-identical; names in ``frozen`` must refer to existing layers.
    """
    from .model import layer_of

    known = {layer_of(name) for name in grads}
    unknown = set(frozen) - known
    if unknown:
        raise InvalidInputError(f"frozen set names unknown layers: {sorted(unknown)}")
    for name, g in grads.items():
        if layer_of(name) in frozen:
            continue
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient", layer=layer_of(name))
        buf = state.buffers[name]
        buf *= state.momentum
        buf += g
        params.tensors[name] -= lr * buf


class GradientAccumulator:
    """Averages micro-batch gradients into one effective-batch gradient.

    Micro-batch gradients are per-sample means, so the emitted gradient is
    the sample-count-weighted average: identical (up to rounding) to the
    gradient of one large batch over the same samples.
    """

    def __init__(self, steps: int):
        if steps < 1:
            raise InvalidInputError("accumulation steps must be >= 1")
        self.steps = steps
        self._sums: dict[str, np.ndarray] | None = None
        self._count = 0
        self._samples = 0

    def add(self, grads: dict, n_samples: int):
        """Feed one micro-batch; returns the effective gradient when the
        window completes, else None."""
        if self._sums is None:
            self._sums = {k: g * n_samples for k, g in grads.items()}
        else:
            for k, g in grads.items():
                self._sums[k] += g * n_samples
        self._count += 1
        self._samples += n_samples
        if self._count < self.steps:
            return None
        effective = {k: s / self._samples for k, s in self._sums.items()}
        self._sums = None
        self._count = 0
        self._samples = 0
        return effective


@dataclass
class TrainRunConfig:
    """Everything a training run needs besides the data and model shape."""

    micro_batch: int = 8
    accumulation_steps: int = 10
    seed: int = 0
    max_epochs: int = 100
    patience: int = 5
    max_restarts: int = 3
    optimizer: str = "sgd_momentum"  # adaptive optimizers intentionally absent
    momentum: float = 0.9
    schedule: str = "cyclical"  # or "constant"
    base_lr: float = 0.0005
    max_lr: float = 0.005
    cycle_len: int = 200
    constant_lr: float = 0.0005
    loss: str = "l1"  # or "mse"
    clip_norm: float | None = None
    coverage_low: float = 1.5
    coverage_high: float = 4.5
    eval_batch: int = 32
    target_train_loss: float | None = None  # stop once train loss dips below

    def lr_at(self, iteration: int) -> float:
        if self.schedule == "cyclical":
            return cyclical_lr(iteration, self.base_lr, self.max_lr, self.cycle_len)
        return self.constant_lr


@dataclass
class PhaseSpec:
    """One stage of a multi-phase schedule."""

    name: str
    frozen: frozenset
    batch_size: int
    lr: float
    accumulation_steps: int = 1


def classification_phases(base_lr: float = 0.0005, base_batch: int = 100) -> list[PhaseSpec]:
    """The three-phase transfer schedule for the classification head.

    Phase 1 freezes the front projection (the stand-in for the pretrained
    feature extractor). Phase 2 grows the batch by 1.5x and cuts the rate
    to 20%. Phase 3 unfreezes everything at batch 8 and keeps phase 2's
    rate: the smallest-batch phase is the noisiest and wants the small step.
    """
    return [
        PhaseSpec("cls1", frozenset({"projection"}), base_batch, base_lr),
        PhaseSpec("cls2", frozenset({"projection"}), int(base_batch * 1.5), base_lr * 0.2),
        PhaseSpec("cls3", frozenset(), 8, base_lr * 0.2),
    ]


@dataclass
class HistoryRow:
    iteration: int
    lr: float
    train_loss: float
    val_loss: float
    phase: str
    batch_size: int


HISTORY_FIELDS = ["iteration", "lr", "train_loss", "val_loss", "phase", "batch_size"]


def history_to_csv(rows: list[HistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for r in rows:
        writer.writerow([r.iteration, repr(r.lr), repr(r.train_loss), repr(r.val_loss),
                         r.phase, r.batch_size])
    return buf.getvalue()


@dataclass
class TrainResult:
    params: ModelParams
    best_val_loss: float
    history: list[HistoryRow]
    restarts: int = 0
    diverged: bool = False


@dataclass
class SequenceData:
    """In-memory training split: aligned ids, feature sequences, targets."""

    ids: list[str]
    features: dict[str, np.ndarray]
    targets: dict[str, float]

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "SequenceData":
        feats = {u.id: load_features(u) for u in ds.utterances}
        return cls(ids=[u.id for u in ds.utterances], features=feats, targets=ds.targets())

    def lengths(self) -> dict[str, int]:
        return {i: self.features[i].shape[0] for i in self.ids}


def _clip(grads: dict, clip_norm: float | None) -> dict:
    if clip_norm is None:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= clip_norm:
        return grads
    scale = clip_norm / total
    return {k: g * scale for k, g in grads.items()}


class _Loop:
    """Shared epoch machinery for all training entry points.

    Owns the parameters, optimizer state, update counter, dropout rng and
    history; each train_* function drives it with its own schedule and
    stopping policy. Single-writer: parameter mutation happens only here.
    """

    def __init__(self, params: ModelParams, train: SequenceData, val: SequenceData,
                 cfg: TrainRunConfig, loss_kind: str, weights=None):
        if cfg.optimizer not in ("sgd", "sgd_momentum"):
            raise InvalidInputError(
                f"unsupported optimizer {cfg.optimizer!r}; only SGD (+momentum) converges "
                "reliably for this setup")
        self.params = params
        self.train = train
        self.val = val
        self.cfg = cfg
        self.loss_kind = loss_kind
        self.weights = weights
        self.momentum = 0.0 if cfg.optimizer == "sgd" else cfg.momentum
        self.state = OptimizerState.fresh(params, self.momentum)
        self.accumulator = GradientAccumulator(cfg.accumulation_steps)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7041]))
        self.updates = 0
        self.epoch = 0
        self.history: list[HistoryRow] = []
        self.last_lr = cfg.lr_at(0)
        if loss_kind == "classification":
            self.class_targets = {
                i: mos_to_class(t) for i, t in train.targets.items()
            }
            self.val_class_targets = {i: mos_to_class(t) for i, t in val.targets.items()}

    def reset_optimizer(self):
        self.state = OptimizerState.fresh(self.params, self.momentum)
        self.accumulator = GradientAccumulator(self.cfg.accumulation_steps)

    def _micro_loss(self, ids, mode):
        data = self.train if mode == "train" else self.val
        feats = [data.features[i] for i in ids]
        padded, valid = pad_and_mask(feats)
        preds, trace = forward(self.params, padded, valid, mode=mode,
                               rng=self.rng if mode == "train" else None)
        if self.loss_kind == "classification":
            targets = self.class_targets if mode == "train" else self.val_class_targets
            y = np.array([targets[i] for i in ids])
            loss, lgrad = loss_classification(preds, y, self.weights)
        else:
            y = np.array([data.targets[i] for i in ids])
            fn = loss_mse if self.loss_kind == "mse" else loss_regression
            loss, lgrad = fn(preds, y)
        return loss, lgrad, trace

    def run_epoch(self, batch_size: int, frozen: frozenset, lr: float | None) -> float:
        """One pass over the training data; returns the mean sample loss.

        ``lr=None`` follows the run config's schedule (indexed by update
        count); a float applies that fixed rate.
        """
        epoch_seed = int(np.random.SeedSequence([self.cfg.seed, 1279, self.epoch]).generate_state(1)[0])
        plan = plan_sorted(self.train.lengths(), batch_size, epoch_seed)
        total = 0.0
        n = 0
        for ids in plan.batches:
            loss, lgrad, trace = self._micro_loss(ids, "train")
            grads = backward(trace, lgrad)
            total += loss * len(ids)
            n += len(ids)
            effective = self.accumulator.add(grads, len(ids))
            if effective is not None:
                step_lr = self.cfg.lr_at(self.updates) if lr is None else lr
                sgd_momentum_step(self.params, _clip(effective, self.cfg.clip_norm),
                                  self.state, step_lr, frozen)
                self.updates += 1
                self.last_lr = step_lr
        self.epoch += 1
        return total / n

    def val_predictions(self) -> np.ndarray:
        preds = []
        order = self.val.ids
        for k in range(0, len(order), self.cfg.eval_batch):
            ids = order[k : k + self.cfg.eval_batch]
            padded, valid = pad_and_mask([self.val.features[i] for i in ids])
            p, _ = forward(self.params, padded, valid, mode="eval")
            preds.append(np.atleast_1d(p) if p.ndim == 1 else p)
        return np.concatenate(preds, axis=0)

    def val_loss(self) -> float:
        total = 0.0
        order = self.val.ids
        for k in range(0, len(order), self.cfg.eval_batch):
            ids = order[k : k + self.cfg.eval_batch]
            loss, _, _ = self._micro_loss(ids, "eval")
            total += loss * len(ids)
        return total / len(order)

    def log(self, train_loss: float, val_loss: float, phase: str, batch_size: int,
            effective_batch: int):
        self.history.append(HistoryRow(
            iteration=self.updates, lr=self.last_lr, train_loss=train_loss,
            val_loss=val_loss, phase=phase, batch_size=effective_batch,
        ))


def _run_phase(loop: _Loop, phase_name: str, batch_size: int, lr: float | None,
               frozen: frozenset, max_epochs: int, patience: int,
               accumulation: int) -> tuple[ModelParams, float, bool]:
    """Train with early stopping; returns (best params, best val, diverged)."""
    loop.accumulator = GradientAccumulator(accumulation)
    best_val = np.inf
    best_params = loop.params.copy()
    stale = 0
    effective = batch_size * accumulation
    target = loop.cfg.target_train_loss
    for _ in range(max_epochs):
        try:
            train_loss = loop.run_epoch(batch_size, frozen, lr)
            val_loss = loop.val_loss()
        except NumericError:
            # parameters blew up mid-epoch; keep the last good snapshot
            return best_params, best_val, True
        loop.log(train_loss, val_loss, phase_name, batch_size, effective)
        if not np.isfinite(val_loss):
            return best_params, best_val, True
        if val_loss < best_val:
            best_val = val_loss
            best_params = loop.params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= max(patience, 1):
                break
        if target is not None and train_loss < target:
            break
    return best_params, best_val, False


def train_regression(train: SequenceData, val: SequenceData, model_cfg: ModelConfig,
                     cfg: TrainRunConfig) -> TrainResult:
    """Full regression methodology with the range-coverage restart loop.

    Early stopping fires on validation loss; the run then checks that
    validation predictions span the score range (some below
    ``coverage_low``, some above ``coverage_high``). While they do not,
    training resumes with unchanged settings, up to ``max_restarts``
    times. Returns the parameters with the best validation loss seen.
    """
    if model_cfg.head != "regression":
        raise InvalidInputError("train_regression needs a regression-head config")
    params = init_params(model_cfg, cfg.seed)
    loop = _Loop(params, train, val, cfg, cfg.loss)
    best_params = params.copy()
    best_val = np.inf
    restarts = 0
    while True:
        phase = "reg" if restarts == 0 else f"reg_restart{restarts}"
        p, v, diverged = _run_phase(
            loop, phase, cfg.micro_batch, None, frozenset(), cfg.max_epochs,
            cfg.patience, cfg.accumulation_steps,
        )
        loop.params = p.copy()  # early stopping restores the phase's best weights
        if v < best_val:
            best_val, best_params = v, p
        if diverged:
            return TrainResult(best_params, best_val, loop.history, restarts, diverged=True)
        preds = loop.val_predictions()
        covered = preds.min() <= cfg.coverage_low and preds.max() >= cfg.coverage_high
        if covered or restarts >= cfg.max_restarts:
            return TrainResult(best_params, best_val, loop.history, restarts)
        restarts += 1  # resume with unchanged settings, momentum carried over


def train_classification(train: SequenceData, val: SequenceData,
                         reg_params: ModelParams, model_cfg: ModelConfig,
                         cfg: TrainRunConfig, train_ds: Dataset | None = None,
                         phases: list[PhaseSpec] | None = None,
                         phase_end=None) -> TrainResult:
    """Three-phase transfer training for the 33-class head.

    Weights come from the regression checkpoint (new output layer); the
    loss is cross entropy weighted by inverse class frequency. Each phase
    gets fresh optimizer state (batch size and rate change discontinuously)
    and its own early stopping; the best parameters of a phase seed the
    next. ``phase_end(name, params)`` is called after each phase when
    given, for instrumentation.
    """
    if model_cfg.head != "classification":
        raise InvalidInputError("train_classification needs a classification-head config")
    params = transfer_from_regression(reg_params, model_cfg, cfg.seed)
    if train_ds is not None:
        weights = class_weights(train_ds)
    else:
        weights = _weights_from_targets(train.targets, model_cfg.num_classes)
    loop = _Loop(params, train, val, cfg, "classification", weights=weights)
    phases = phases if phases is not None else classification_phases(cfg.base_lr)
    best_params = params.copy()
    best_val = np.inf
    for spec in phases:
        loop.reset_optimizer()
        p, v, diverged = _run_phase(
            loop, spec.name, spec.batch_size, spec.lr, spec.frozen, cfg.max_epochs,
            cfg.patience, spec.accumulation_steps,
        )
        loop.params = p.copy()
        if v < best_val:
            best_val, best_params = v, p
        if phase_end is not None:
            phase_end(spec.name, loop.params)
        if diverged:
            return TrainResult(best_params, best_val, loop.history, diverged=True)
    return TrainResult(best_params, best_val, loop.history)


def _weights_from_targets(targets: dict[str, float], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes)
    for t in targets.values():
        counts[mos_to_class(t) - 1] += 1
    weights = np.zeros(num_classes)
    observed = counts > 0
    weights[observed] = 1.0 / counts[observed]
    if observed.any():
        weights[observed] /= weights[observed].mean()
    return weights


FINETUNE_LR = 0.0001
FINETUNE_BATCH = 10


def finetune(params: ModelParams, train: SequenceData, val: SequenceData,
             cfg: TrainRunConfig, lr: float = FINETUNE_LR,
             batch_size: int = FINETUNE_BATCH) -> TrainResult:
    """Continue regression training on another domain at a fixed small rate.

    Defaults: lr 0.0001, batch 10, no accumulation, early stopping on the
    new domain's validation loss. ``max_epochs=0`` returns the input
    parameters unchanged.
    """
    if params.config.head != "regression":
        raise InvalidInputError("finetune expects a regression checkpoint")
    loop = _Loop(params.copy(), train, val, cfg, cfg.loss)
    if cfg.max_epochs == 0:
        return TrainResult(loop.params, np.inf, [])
    p, v, diverged = _run_phase(loop, "finetune", batch_size, lr, frozenset(),
                                cfg.max_epochs, cfg.patience, 1)
    return TrainResult(p, v, loop.history, diverged=diverged)
