"""Estimator-reliability and filter-dependence measurements.

The reliability experiment asks how well the additive group score (sum of
the members' individual importances, the quantity pruning actually ranks
by) predicts the exact squared loss change when whole groups of units are
masked at once: sample many random groups, compute both quantities, and
correlate them. Strong inter-filter coupling hurts the estimate because
the cross terms it drops then carry real weight.

Filter dependence itself is measured two ways: partial correlations between
per-channel activations (what remains of a pairwise relationship after
conditioning on every other channel in the layer), and off-diagonal cosine
structure of the weight Gram matrices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor
from .importance import group_sum_scores, unit_dots, zeroed_loss_change
from .models import ModelGraph, evaluate_loss
from .ortho import filter_cosine_stats

__all__ = [
    "ExperimentError",
    "pearson",
    "ReliabilityResult",
    "reliability_experiment",
    "partial_correlations",
    "partial_correlation_stats",
    "gram_experiment",
]


class ExperimentError(RuntimeError):
    """Degenerate statistics or a malformed experiment request."""


def pearson(x, y) -> float:
    """Two-pass correlation coefficient in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ExperimentError(f"pearson needs two equal-length vectors, got {x.shape} {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        raise ExperimentError("pearson undefined: an input has zero variance")
    return float((xc * yc).sum() / denom)


@dataclass
class ReliabilityResult:
    r: float
    estimates: np.ndarray
    truths: np.ndarray
    group_size: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "group_size": self.group_size,
            "groups": int(self.estimates.size),
            "degenerate": self.degenerate,
        }


def reliability_experiment(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    group_size: int,
    n_groups: int,
    seed: int = 0,
    batch_size: int = 256,
) -> ReliabilityResult:
    """Correlate additive group scores with exact squared loss changes
    from zeroing each group's weights. Groups are drawn from the
    convolutional units only (classifier rows are not filters), and
    sampling is keyed on (seed, group index) so any single group can be
    reproduced alone."""
    if n_groups < 2:
        raise ExperimentError(f"need at least 2 groups, got {n_groups}")
    refs, dots = unit_dots(model, images, labels, batch_size=batch_size)
    pool = [i for i, r in enumerate(refs) if model.nodes[r.layer].kind != "classifier"]
    if group_size < 1 or group_size > len(pool):
        raise ExperimentError(f"group_size {group_size} outside [1, {len(pool)}]")
    base = evaluate_loss(model, images, labels, batch_size=batch_size)
    groups = []
    for trial in range(n_groups):
        rng = np.random.default_rng(np.random.SeedSequence((seed, trial)))
        picks = rng.choice(len(pool), size=group_size, replace=False)
        groups.append([refs[pool[i]] for i in picks])
    estimates = np.array(group_sum_scores(refs, dots, groups))
    truths = np.array(
        [
            zeroed_loss_change(model, images, labels, g, batch_size=batch_size, base_loss=base)
            for g in groups
        ]
    )
    try:
        r = pearson(estimates, truths)
        degenerate = False
    except ExperimentError:
        r = float("nan")
        degenerate = True
    return ReliabilityResult(r, estimates, truths, group_size, degenerate)


def partial_correlations(features: np.ndarray, ridge: float = 1e-4) -> np.ndarray:
    """Partial correlation matrix of columns, via the ridged precision
    matrix of their correlations."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ExperimentError(f"need [samples, >=2 channels], got {x.shape}")
    if ridge < 0:
        raise ExperimentError(f"ridge must be non-negative, got {ridge}")
    corr = np.corrcoef(x, rowvar=False)
    prec = np.linalg.inv(corr + ridge * np.eye(corr.shape[0]))
    d = np.sqrt(np.diag(prec))
    partial = -prec / np.outer(d, d)
    np.fill_diagonal(partial, 1.0)
    return partial


def _offdiag_abs(matrix: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(matrix.shape[0], k=1)
    return np.abs(matrix[iu])


def _pooled_features(model: ModelGraph, images: np.ndarray, batch_size: int):
    """Spatially averaged activations per conv-like node, over all images."""
    chunks: dict[int, list[np.ndarray]] = {}
    for s in range(0, images.shape[0], batch_size):
        cap: dict[int, np.ndarray] = {}
        model.forward(Tensor(images[s : s + batch_size]), training=False, capture=cap)
        for idx, act in cap.items():
            chunks.setdefault(idx, []).append(act.mean(axis=(2, 3)))
    return {idx: np.concatenate(parts) for idx, parts in chunks.items()}


def partial_correlation_stats(
    model: ModelGraph,
    images: np.ndarray,
    ridge: float = 1e-4,
    batch_size: int = 256,
) -> dict[str, dict[str, float]]:
    """Per regularized layer: summary of pairwise activation dependence
    after conditioning on the layer's other channels. Constant channels
    (for example masked ones) are excluded before the computation."""
    regularized = {name for name, _ in model.regularized_layers()}
    features = _pooled_features(model, images, batch_size)
    out: dict[str, dict[str, float]] = {}
    for idx, feats in features.items():
        name = model.nodes[idx].name
        if name not in regularized:
            continue
        keep = feats.std(axis=0) > 1e-12
        dropped = int((~keep).sum())
        kept = feats[:, keep]
        if kept.shape[1] < 2:
            continue
        partial = partial_correlations(kept, ridge=ridge)
        off = _offdiag_abs(partial)
        out[name] = {
            "mean_abs": float(off.mean()),
            "median_abs": float(np.median(off)),
            "max_abs": float(off.max()),
            "channels": int(kept.shape[1]),
            "dropped_constant": dropped,
        }
    return out


def gram_experiment(model: ModelGraph) -> dict[str, dict[str, float]]:
    """Off-diagonal cosine structure of every regularized filter bank."""
    out = {}
    for name, w in model.regularized_layers():
        mean_abs, max_abs = filter_cosine_stats(w.data)
        out[name] = {"mean_abs": mean_abs, "max_abs": max_abs, "filters": int(w.shape[0])}
    return out
