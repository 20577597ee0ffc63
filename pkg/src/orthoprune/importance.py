"""Filter-importance metrics and their group extensions.

The first-order importance of removing a unit is the squared inner product
between its weights and the loss gradient at those weights. Scores are
accumulated per batch and averaged; batchnorm runs in inference mode while
scoring so the estimate reflects the deployed network, and only the task
loss contributes to the gradient.

For a whole group removed jointly, the estimate is the square of the summed
signed per-unit terms, so cross terms between units appear explicitly. The
exact quantity both approximate is the squared change in loss caused by
masking the unit or group.

Also provided: weight-magnitude and batchnorm-scale baselines, plus a
layer-normalized variant of the first-order score.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as en
from .engine import Tensor
from .models import FilterRef, ModelGraph, enumerate_prunable, evaluate_loss

__all__ = [
    "ImportanceError",
    "ImportanceTable",
    "unit_dots",
    "taylor_importance",
    "normalized_taylor_importance",
    "l1_importance",
    "bn_scale_importance",
    "group_joint_scores",
    "group_sum_scores",
    "loss_change_squared",
    "zeroed_loss_change",
    "METRICS",
]

METRICS = ("taylor", "normalized_taylor", "l1", "bn_scale")


class ImportanceError(RuntimeError):
    """Malformed importance query or score table."""


@dataclass
class ImportanceTable:
    """Per-unit scores for one metric over one model's prunable units."""

    metric: str
    scores: dict[FilterRef, float]
    batches: int = 0
    fallbacks: frozenset = field(default_factory=frozenset)

    def score(self, ref: FilterRef) -> float:
        try:
            return self.scores[FilterRef(*ref)]
        except KeyError:
            raise ImportanceError(f"no score recorded for {ref}") from None

    def ranked(self) -> list[tuple[FilterRef, float]]:
        """Ascending by score; ties broken by (layer, filter)."""
        return sorted(self.scores.items(), key=lambda kv: (kv[1], kv[0]))

    def validate_against(self, model: ModelGraph) -> None:
        expected = set(enumerate_prunable(model))
        got = set(self.scores)
        if expected != got:
            missing = sorted(expected - got)[:4]
            extra = sorted(got - expected)[:4]
            raise ImportanceError(
                f"score table does not cover the model: missing {missing}, extra {extra}"
            )

    def to_rows(self) -> list[tuple[int, int, float, int]]:
        return [
            (ref.layer, ref.filter, score, int(ref in self.fallbacks))
            for ref, score in sorted(self.scores.items())
        ]


def _batch_slices(n: int, batch_size: int):
    if batch_size < 1:
        raise ImportanceError(f"batch_size must be positive, got {batch_size}")
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def unit_dots(
    model: ModelGraph, images: np.ndarray, labels: np.ndarray, batch_size: int = 256
):
    """Signed per-batch weight/gradient inner products for every unit.

    Returns (refs, dots) where dots has one row per batch and one column per
    unit, in float64. All squared-score variants derive from this matrix.
    """
    refs = enumerate_prunable(model)
    slices = _batch_slices(images.shape[0], batch_size)
    if not slices:
        raise ImportanceError("unit_dots: empty dataset")
    dots = np.zeros((len(slices), len(refs)), dtype=np.float64)
    for b, (s, e) in enumerate(slices):
        model.zero_grads()
        with en.GradTape():
            logits = model.forward(Tensor(images[s:e]), training=False)
            loss = en.softmax_cross_entropy(logits, labels[s:e])
        en.backward(loss)
        for u, ref in enumerate(refs):
            w = model.unit_weight(ref).astype(np.float64)
            g = model.unit_grad(ref).astype(np.float64)
            dots[b, u] = float(w @ g)
    model.zero_grads()
    return refs, dots


def taylor_importance(
    model: ModelGraph, images: np.ndarray, labels: np.ndarray, batch_size: int = 256
) -> ImportanceTable:
    """Squared first-order scores, averaged over batches."""
    refs, dots = unit_dots(model, images, labels, batch_size)
    means = (dots**2).mean(axis=0)
    scores = {ref: float(means[u]) for u, ref in enumerate(refs)}
    return ImportanceTable("taylor", scores, batches=dots.shape[0])


def normalized_taylor_importance(
    model: ModelGraph, images: np.ndarray, labels: np.ndarray, batch_size: int = 256
) -> ImportanceTable:
    """First-order scores rescaled to unit L2 norm within each layer."""
    base = taylor_importance(model, images, labels, batch_size)
    by_layer: dict[int, float] = {}
    for ref, s in base.scores.items():
        by_layer[ref.layer] = by_layer.get(ref.layer, 0.0) + s * s
    scores = {}
    for ref, s in base.scores.items():
        norm = np.sqrt(by_layer[ref.layer])
        scores[ref] = float(s / norm) if norm > 0.0 else 0.0
    return ImportanceTable("normalized_taylor", scores, batches=base.batches)


def l1_importance(model: ModelGraph) -> ImportanceTable:
    """Data-free baseline: the L1 norm of each unit's weights."""
    scores = {
        ref: float(np.abs(model.unit_weight(ref)).sum()) for ref in enumerate_prunable(model)
    }
    return ImportanceTable("l1", scores)


def bn_scale_importance(model: ModelGraph) -> ImportanceTable:
    """Baseline: |batchnorm scale| per unit; units without one (classifier
    filters, block entry channels) fall back to the L1 score and are flagged."""
    scores = {}
    fallbacks = set()
    for ref in enumerate_prunable(model):
        gamma = model.unit_bn_scale(ref)
        if gamma is None:
            scores[ref] = float(np.abs(model.unit_weight(ref)).sum())
            fallbacks.add(ref)
        else:
            scores[ref] = abs(gamma)
    return ImportanceTable("bn_scale", scores, fallbacks=frozenset(fallbacks))


def _group_columns(refs, groups) -> list[list[int]]:
    index = {FilterRef(*r): i for i, r in enumerate(refs)}
    resolved = []
    for group in groups:
        cols = []
        seen = set()
        for ref in group:
            ref = FilterRef(*ref)
            if ref in seen:
                raise ImportanceError(f"duplicate unit {ref} in group")
            seen.add(ref)
            if ref not in index:
                raise ImportanceError(f"unit {ref} not present in the dot table")
            cols.append(index[ref])
        if not cols:
            raise ImportanceError("empty group")
        resolved.append(cols)
    return resolved


def group_joint_scores(refs, dots: np.ndarray, groups) -> list[float]:
    """Joint first-order score per group: mean over batches of the squared
    sum of the group's signed terms. This includes the cross terms."""
    out = []
    for cols in _group_columns(refs, groups):
        joint = dots[:, cols].sum(axis=1)
        out.append(float((joint**2).mean()))
    return out


def group_sum_scores(refs, dots: np.ndarray, groups) -> list[float]:
    """Additive score per group: the sum of the members' individual
    importances. This is the estimate pruning actually ranks by; it drops
    the cross terms, so it is only unbiased when units do not interact."""
    singles = (dots**2).mean(axis=0)
    return [float(singles[cols].sum()) for cols in _group_columns(refs, groups)]


def loss_change_squared(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    refs,
    batch_size: int = 256,
    base_loss: float | None = None,
) -> float:
    """Exact target of the estimates: squared loss change from masking.

    `base_loss` lets callers reuse the unmasked evaluation across queries.
    """
    if base_loss is None:
        base_loss = evaluate_loss(model, images, labels, batch_size=batch_size)
    mask = model.mask_for_units([FilterRef(*r) for r in refs])
    masked = evaluate_loss(model, images, labels, batch_size=batch_size, mask=mask)
    return (masked - base_loss) ** 2


def zeroed_loss_change(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    refs,
    batch_size: int = 256,
    base_loss: float | None = None,
) -> float:
    """Squared loss change from writing zeros into the member units' weights.

    Unlike the masking variant, normalization shift terms keep flowing, so
    this is exactly the perturbation the first-order scores expand around:
    the score for one unit approximates this value for its singleton group.
    """
    if base_loss is None:
        base_loss = evaluate_loss(model, images, labels, batch_size=batch_size)
    probe = model.copy()
    probe.zero_unit_weights([FilterRef(*r) for r in refs])
    zeroed = evaluate_loss(probe, images, labels, batch_size=batch_size)
    return (zeroed - base_loss) ** 2
