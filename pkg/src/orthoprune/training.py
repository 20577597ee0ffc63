"""Training loops, optimizers, pruning pipeline, and early-ticket search.

Shuffling is re-seeded per epoch from (run seed, epoch index), so resuming
from a checkpoint replays exactly the batches a straight-through run would
have seen; together with optimizer state in the checkpoint this makes
interrupted and uninterrupted runs bit-identical.

A non-finite value anywhere in a training step aborts the epoch, restores
the model and optimizer to the start-of-epoch snapshot, and raises
DivergenceError.

The regularized loss is task cross-entropy plus lambda times the
orthonormality penalty. Weight decay and the regularizer remain mutually
exclusive: both pull on filter norms and their estimates disagree. When the
regularizer is off its code path is never entered.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as en
from .engine import EngineError, Tensor
from .data import Dataset, augment_batch
from .importance import (
    ImportanceTable,
    bn_scale_importance,
    l1_importance,
    normalized_taylor_importance,
    taylor_importance,
)
from .models import ModelGraph, enumerate_prunable, evaluate_loss, load_model, save_model
from .ortho import OrthoConfig, ortho_loss
from .pruning import (
    CompressionReport,
    PrunePlan,
    apply_plan,
    compression_report,
    make_plan,
    schedule_ratios,
    select_victims,
)

__all__ = [
    "TrainingError",
    "DivergenceError",
    "SGD",
    "Adam",
    "TrainConfig",
    "EpochStats",
    "TrainResult",
    "lr_for_epoch",
    "train",
    "accuracy",
    "compute_table",
    "prune_pipeline",
    "PipelineResult",
    "mask_overlap",
    "early_bird_search",
    "EarlyBirdResult",
]


class TrainingError(RuntimeError):
    """Invalid training configuration or checkpoint mismatch."""


class DivergenceError(TrainingError):
    """A training step produced non-finite values; state was rolled back."""


# -- optimizers -----------------------------------------------------------


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {
            name: np.zeros_like(p.data) for name, p in self.params
        }

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{name}.v": v for name, v in self.velocity.items()}

    def load_state_dict(self, state) -> None:
        for name in self.velocity:
            self.velocity[name][...] = state[f"{name}.v"]


class Adam:
    def __init__(
        self,
        params,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)], dtype=np.float32)}
        for name in self.m:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.v"] = self.v[name]
        return out

    def load_state_dict(self, state) -> None:
        self.t = int(state["t"][0])
        for name in self.m:
            self.m[name][...] = state[f"{name}.m"]
            self.v[name][...] = state[f"{name}.v"]


def _build_optimizer(model: ModelGraph, config: "TrainConfig"):
    params = model.parameters()
    if config.optimizer == "sgd":
        return SGD(params, config.lr, config.momentum, config.weight_decay)
    return Adam(params, config.lr, weight_decay=config.weight_decay)


# -- configuration --------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    ortho: OrthoConfig | None = None
    augment: bool = False
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer must be adam or sgd, got '{self.optimizer}'")
        if not (0.0 <= self.momentum < 1.0):
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0.0 < self.lr_decay <= 1.0):
            problems.append(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if list(self.milestones) != sorted(set(self.milestones)) or any(
            m < 0 for m in self.milestones
        ):
            problems.append(f"milestones must be increasing and non-negative, got {self.milestones}")
        if self.weight_decay > 0 and self.ortho is not None and self.ortho.enabled:
            problems.append(
                "weight_decay and the orthonormality regularizer are mutually "
                "exclusive; disable one of them"
            )
        if problems:
            raise TrainingError("invalid training configuration:\n  " + "\n  ".join(problems))

    @property
    def ortho_on(self) -> bool:
        return self.ortho is not None and self.ortho.enabled


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr * config.lr_decay**passed


# -- the training loop ----------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_ce: float
    train_penalty: float | None
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final(self) -> EpochStats | None:
        return self.history[-1] if self.history else None


def accuracy(model: ModelGraph, images, labels, batch_size: int = 256) -> float:
    hits = 0
    for s in range(0, images.shape[0], batch_size):
        logits = model.forward(Tensor(images[s : s + batch_size])).data
        hits += int((logits.argmax(axis=1) == labels[s : s + batch_size]).sum())
    return hits / images.shape[0]


def _snapshot(model: ModelGraph, opt):
    return (
        {k: v.copy() for k, v in model.state_dict().items()},
        {k: v.copy() for k, v in opt.state_dict().items()},
    )


def _restore(model: ModelGraph, opt, snap) -> None:
    model.load_state_dict(snap[0])
    opt.load_state_dict(snap[1])
    model.zero_grads()


def train(
    model: ModelGraph,
    dataset: Dataset,
    config: TrainConfig,
    checkpoint_path=None,
    resume: bool = False,
    diagnostics_path=None,
    epoch_hook=None,
) -> TrainResult:
    """Run the epoch loop; returns per-epoch statistics.

    `epoch_hook(model, stats)` runs after each epoch; a truthy return stops
    training early. With `resume`, the checkpoint's epoch counter decides
    where to pick up.
    """
    config.validate()
    opt = _build_optimizer(model, config)
    start_epoch = 0
    if resume:
        if checkpoint_path is None:
            raise TrainingError("resume requested without a checkpoint path")
        start_epoch = _load_checkpoint(checkpoint_path, model, opt) + 1

    x, y = dataset.train_images, dataset.train_labels
    n = x.shape[0]
    lam = config.ortho.lambda_coeff if config.ortho_on else 0.0
    result = TrainResult()

    for epoch in range(start_epoch, config.epochs):
        opt.lr = lr_for_epoch(config, epoch)
        snap = _snapshot(model, opt)
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
        perm = rng.permutation(n)
        ce_sum = 0.0
        pen_sum = 0.0
        seen = 0
        try:
            for s in range(0, n, config.batch_size):
                idx = perm[s : s + config.batch_size]
                xb = x[idx]
                if config.augment:
                    xb = augment_batch(xb, rng)
                with en.GradTape():
                    logits = model.forward(Tensor(xb), training=True)
                    ce = en.softmax_cross_entropy(logits, y[idx])
                    if config.ortho_on:
                        penalty = ortho_loss(model)
                        total = en.add(ce, en.mul_scalar(penalty, lam))
                    else:
                        total = ce
                en.backward(total)
                opt.step()
                model.zero_grads()
                ce_sum += ce.item() * idx.size
                if config.ortho_on:
                    pen_sum += penalty.item() * idx.size
                seen += idx.size
        except EngineError as err:
            _restore(model, opt, snap)
            raise DivergenceError(
                f"non-finite value during epoch {epoch}; state rolled back to "
                f"the start of the epoch ({err})"
            ) from err

        train_ce = ce_sum / seen
        train_pen = (pen_sum / seen) if config.ortho_on else None
        stats = EpochStats(
            epoch=epoch,
            lr=opt.lr,
            train_loss=train_ce + lam * (train_pen or 0.0),
            train_ce=train_ce,
            train_penalty=train_pen,
            val_loss=evaluate_loss(model, dataset.val_images, dataset.val_labels),
            val_acc=accuracy(model, dataset.val_images, dataset.val_labels),
        )
        result.history.append(stats)
        if diagnostics_path is not None:
            _append_diagnostics(diagnostics_path, stats)
        if checkpoint_path is not None:
            _save_checkpoint(checkpoint_path, model, opt, epoch)
        if epoch_hook is not None and epoch_hook(model, stats):
            result.stopped_early = True
            break
    return result


def _append_diagnostics(path, stats: EpochStats) -> None:
    fields = ["epoch", "lr", "train_loss", "train_ce", "train_penalty", "val_loss", "val_acc"]
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(fields)
        writer.writerow(
            [
                stats.epoch,
                f"{stats.lr:.8g}",
                f"{stats.train_loss:.8g}",
                f"{stats.train_ce:.8g}",
                "" if stats.train_penalty is None else f"{stats.train_penalty:.8g}",
                f"{stats.val_loss:.8g}",
                f"{stats.val_acc:.8g}",
            ]
        )


def _save_checkpoint(path, model: ModelGraph, opt, epoch: int) -> None:
    extra = {f"opt.{k}": v for k, v in opt.state_dict().items()}
    extra["train.epoch"] = np.array([float(epoch)], dtype=np.float32)
    save_model(path, model, extra=extra, meta={"kind": "checkpoint"})


def _load_checkpoint(path, model: ModelGraph, opt) -> int:
    loaded, extra, _ = load_model(path)
    if loaded.to_topology() != model.to_topology():
        raise TrainingError("checkpoint topology does not match the model")
    model.load_state_dict(loaded.state_dict())
    opt.load_state_dict({k[len("opt.") :]: v for k, v in extra.items() if k.startswith("opt.")})
    return int(extra["train.epoch"][0])


# -- importance dispatch ---------------------------------------------------


def compute_table(
    model: ModelGraph, metric: str, images=None, labels=None, batch_size: int = 256
) -> ImportanceTable:
    if metric == "l1":
        return l1_importance(model)
    if metric == "bn_scale":
        return bn_scale_importance(model)
    if metric in ("taylor", "normalized_taylor"):
        if images is None or labels is None:
            raise TrainingError(f"metric '{metric}' needs data")
        fn = taylor_importance if metric == "taylor" else normalized_taylor_importance
        return fn(model, images, labels, batch_size=batch_size)
    raise TrainingError(f"unknown importance metric '{metric}'")


# -- multi-round pruning pipeline -----------------------------------------


@dataclass
class RoundReport:
    round: int
    ratio: float
    victims: int
    units_before: int
    units_after: int
    retrain_ortho: bool
    val_acc: float


@dataclass
class PipelineResult:
    model: ModelGraph
    rounds: list[RoundReport]
    compression: CompressionReport
    requested_survival: float
    achieved_survival: float
    history: list[EpochStats]


def prune_pipeline(
    model: ModelGraph,
    dataset: Dataset,
    target: float,
    rounds: int,
    metric: str,
    train_config: TrainConfig,
    retrain_config: TrainConfig,
    input_extents: tuple[int, int],
) -> PipelineResult:
    """Train, then alternate scoring/surgery/retraining over a ratio
    schedule. The final retraining round always runs with the regularizer
    off so the delivered model is tuned for the plain task loss."""
    original = model.copy()
    history: list[EpochStats] = []
    history += train(model, dataset, train_config).history

    ratios = schedule_ratios(target, rounds)
    requested_survival = 1.0
    achieved_survival = 1.0
    reports: list[RoundReport] = []
    for k, ratio in enumerate(ratios):
        requested_survival *= 1.0 - ratio
        table = compute_table(
            model, metric, dataset.train_images, dataset.train_labels,
            batch_size=train_config.batch_size,
        )
        before = len(enumerate_prunable(model))
        plan = make_plan(model, table, ratio)
        model = apply_plan(model, plan)
        after = len(enumerate_prunable(model))
        achieved_survival *= after / before

        last = k == len(ratios) - 1
        round_cfg = retrain_config if not last else replace(
            retrain_config, ortho=None, weight_decay=retrain_config.weight_decay
        )
        round_hist = train(model, dataset, round_cfg).history
        history += round_hist
        reports.append(
            RoundReport(
                round=k,
                ratio=ratio,
                victims=len(plan.victims),
                units_before=before,
                units_after=after,
                retrain_ortho=round_cfg.ortho_on,
                val_acc=round_hist[-1].val_acc if round_hist else float("nan"),
            )
        )
    return PipelineResult(
        model=model,
        rounds=reports,
        compression=compression_report(original, model, input_extents),
        requested_survival=requested_survival,
        achieved_survival=achieved_survival,
        history=history,
    )


# -- early tickets ---------------------------------------------------------


def mask_overlap(a, b) -> float:
    """Jaccard similarity between two victim sets."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


@dataclass
class EarlyBirdResult:
    found_epoch: int
    plan: PrunePlan
    overlaps: list[float]
    history: list[EpochStats]
    converged: bool


def early_bird_search(
    model: ModelGraph,
    dataset: Dataset,
    config: TrainConfig,
    fraction: float,
    metric: str = "bn_scale",
    threshold: float = 0.9,
    patience: int = 2,
) -> EarlyBirdResult:
    """Train until the victim mask stops moving, then emit the prune plan.

    After every epoch the would-be victim set is compared to the previous
    epoch's; once the overlap stays at or above the threshold for `patience`
    consecutive epochs the ticket is considered found and training stops.
    """
    if not (0.0 < threshold <= 1.0):
        raise TrainingError(f"threshold must lie in (0, 1], got {threshold}")
    if patience < 1:
        raise TrainingError(f"patience must be positive, got {patience}")
    state = {"prev": None, "streak": 0, "found": None}

    def hook(m, stats):
        table = compute_table(
            m, metric, dataset.train_images, dataset.train_labels,
            batch_size=config.batch_size,
        )
        victims = tuple(select_victims(m, table, fraction))
        if state["prev"] is not None:
            ov = mask_overlap(state["prev"], victims)
            overlaps.append(ov)
            state["streak"] = state["streak"] + 1 if ov >= threshold else 0
        state["prev"] = victims
        if state["streak"] >= patience:
            state["found"] = stats.epoch
            return True
        return False

    overlaps: list[float] = []
    result = train(model, dataset, config, epoch_hook=hook)
    final_table = compute_table(
        model, metric, dataset.train_images, dataset.train_labels,
        batch_size=config.batch_size,
    )
    plan = make_plan(model, final_table, fraction)
    found = state["found"] if state["found"] is not None else config.epochs - 1
    return EarlyBirdResult(
        found_epoch=found,
        plan=plan,
        overlaps=overlaps,
        history=result.history,
        converged=state["found"] is not None,
    )
