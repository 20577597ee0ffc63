"""Pruning schedules, victim selection, and exact structural surgery.

Surgery removes whole units and every weight slice that only existed to
serve them. The guiding invariant, enforced by tests: a pruned model's
forward pass equals the original model's forward pass with the same units'
activations zeroed. Three removal patterns cover the families:

- physical removal: the filter row disappears, its batchnorm channel
  disappears, and the consumer's matching input slice disappears;
- zero-fill removal: the filter row disappears but a record re-inserts an
  all-zero channel, used where the tensor extent is pinned from outside
  (classifier logits, residual block outputs, the residual stem);
- entry-channel removal: a residual block stops reading one of its input
  channels, cutting the matching input slices of its first convolution and
  projection and zeroing the channel on the shortcut path.

Per selection round a layer may lose at most 95 percent of its current
units, except residual-family layers, which may shrink to a single unit.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .engine import Tensor
from .importance import ImportanceTable
from .models import FilterRef, MapToZeroRecord, ModelGraph, enumerate_prunable, flops_count, param_count

__all__ = [
    "PruningError",
    "schedule_ratios",
    "select_victims",
    "PrunePlan",
    "make_plan",
    "apply_plan",
    "model_signature",
    "CompressionReport",
    "compression_report",
    "efficiency_score",
]


class PruningError(RuntimeError):
    """Invalid schedule, selection, or surgery request."""


def schedule_ratios(target: float, rounds: int) -> list[float]:
    """Per-round removal ratios whose survival product hits the target.

    Each round removes ratio r_k of the units still present. The sequence
    is decreasing and satisfies prod(1 - r_k) = 1 - target exactly.
    """
    if not (0.0 < target < 1.0):
        raise PruningError(f"target ratio must lie in (0, 1), got {target}")
    if rounds < 1:
        raise PruningError(f"rounds must be positive, got {rounds}")
    q = target / rounds
    return [q / ((1.0 - target) + k * q) for k in range(1, rounds + 1)]


def _layer_cap(model: ModelGraph, layer: int) -> int:
    """Most units one round may remove from a layer."""
    n = model.unit_count(layer)
    if model.family == "residual":
        return n - 1
    return int(np.floor(0.95 * n))


def select_victims(model: ModelGraph, table: ImportanceTable, fraction: float) -> list[FilterRef]:
    """Lowest-scoring units totalling a fraction of all prunable units.

    Picks in ascending score order, skipping layers that hit their cap.
    A positive fraction removes at least one unit.
    """
    if not (0.0 <= fraction < 1.0):
        raise PruningError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0.0:
        return []
    table.validate_against(model)
    total = len(table.scores)
    want = max(1, int(np.floor(fraction * total)))
    caps = {layer: _layer_cap(model, layer) for layer in model.prunable_layers()}
    taken: dict[int, int] = {}
    victims: list[FilterRef] = []
    for ref, _ in table.ranked():
        if len(victims) == want:
            break
        if taken.get(ref.layer, 0) >= caps[ref.layer]:
            continue
        victims.append(ref)
        taken[ref.layer] = taken.get(ref.layer, 0) + 1
    if len(victims) < want:
        raise PruningError(
            f"cannot remove {want} units: per-layer caps leave only {len(victims)} available"
        )
    return victims


def model_signature(model: ModelGraph) -> str:
    blob = json.dumps(model.to_topology(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PrunePlan:
    """A victim set bound to the exact topology it was selected against."""

    signature: str
    victims: tuple[FilterRef, ...]
    fraction: float = 0.0
    metric: str = ""

    def to_dict(self) -> dict:
        return {
            "signature": self.signature,
            "fraction": self.fraction,
            "metric": self.metric,
            "victims": [[r.layer, r.filter] for r in self.victims],
        }

    @staticmethod
    def from_dict(d: dict) -> "PrunePlan":
        return PrunePlan(
            signature=d["signature"],
            victims=tuple(FilterRef(int(l), int(f)) for l, f in d["victims"]),
            fraction=float(d.get("fraction", 0.0)),
            metric=d.get("metric", ""),
        )


def make_plan(model: ModelGraph, table: ImportanceTable, fraction: float) -> PrunePlan:
    victims = select_victims(model, table, fraction)
    return PrunePlan(
        signature=model_signature(model),
        victims=tuple(victims),
        fraction=fraction,
        metric=table.metric,
    )


# -- surgery helpers ------------------------------------------------------


def _drop_rows(t: Tensor, rows) -> Tensor:
    return Tensor(np.delete(t.data, rows, axis=0), requires_grad=True)


def _drop_cols(t: Tensor, cols) -> Tensor:
    return Tensor(np.delete(t.data, cols, axis=1), requires_grad=True)


def _shrink_bn(node, channels) -> None:
    node.scale = _drop_rows(node.scale, channels)
    node.shift = _drop_rows(node.shift, channels)
    node.running_mean = np.delete(node.running_mean, channels, axis=0)
    node.running_var = np.delete(node.running_var, channels, axis=0)
    node.in_channels = node.out_channels = int(node.scale.shape[0])


def _next_conv_consumer(model: ModelGraph, idx: int) -> int | None:
    for j in range(idx + 1, len(model.nodes)):
        if model.nodes[j].kind in ("conv", "pointwise", "classifier", "depthwise"):
            return j
    return None


def _residual_role(model: ModelGraph, idx: int) -> str:
    """stem, block_internal (first conv of a block), or block_output."""
    if idx == 0:
        return "stem"
    if model.nodes[idx - 1].kind == "residual_begin":
        return "block_internal"
    if idx + 2 < len(model.nodes) and model.nodes[idx + 2].kind == "residual_end":
        return "block_output"
    raise PruningError(f"cannot classify residual conv at node {idx}")


def apply_plan(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """Return a pruned copy of the model; the input is left untouched."""
    if plan.signature != model_signature(model):
        raise PruningError("plan was made for a different topology")
    by_layer: dict[int, list[int]] = {}
    for ref in plan.victims:
        ref = FilterRef(*ref)
        model._check_ref(ref)
        bucket = by_layer.setdefault(ref.layer, [])
        if ref.filter in bucket:
            raise PruningError(f"duplicate victim {ref}")
        bucket.append(ref.filter)
    for layer, filters in by_layer.items():
        if len(filters) >= model.unit_count(layer):
            raise PruningError(f"plan would empty node {layer} entirely")
    out = model.copy()
    for layer in sorted(by_layer):
        _prune_layer(out, layer, sorted(by_layer[layer]))
    return out


def _prune_layer(model: ModelGraph, idx: int, victims: list[int]) -> None:
    node = model.nodes[idx]
    kind = node.kind
    if kind == "classifier":
        rec = node.map_to_zero or MapToZeroRecord(node.out_channels)
        node.map_to_zero = rec.merge(victims)
        node.weight = _drop_rows(node.weight, victims)
        node.out_channels = int(node.weight.shape[0])
        return
    if kind == "residual_begin":
        cut = node.input_cut or MapToZeroRecord(node.block_channels)
        node.input_cut = cut.merge(victims)
        conv1 = model.nodes[idx + 1]
        conv1.weight = _drop_cols(conv1.weight, victims)
        conv1.in_channels = int(conv1.weight.shape[1])
        if node.proj_weight is not None:
            node.proj_weight = _drop_cols(node.proj_weight, victims)
        return
    if kind == "pointwise":
        node.weight = _drop_rows(node.weight, victims)
        node.out_channels = int(node.weight.shape[0])
        _shrink_bn(model.nodes[idx + 1], victims)
        dw = model.next_depthwise(idx)
        if dw is not None:
            dwn = model.nodes[dw]
            dwn.weight = _drop_rows(dwn.weight, victims)
            dwn.in_channels = dwn.out_channels = int(dwn.weight.shape[0])
            _shrink_bn(model.nodes[dw + 1], victims)
            consumer = _next_conv_consumer(model, dw)
        else:
            consumer = _next_conv_consumer(model, idx)
        cn = model.nodes[consumer]
        cn.weight = _drop_cols(cn.weight, victims)
        cn.in_channels = int(cn.weight.shape[1])
        return
    if kind == "conv" and model.family == "residual":
        role = _residual_role(model, idx)
        node.weight = _drop_rows(node.weight, victims)
        node.out_channels = int(node.weight.shape[0])
        _shrink_bn(model.nodes[idx + 1], victims)
        if role == "stem":
            relu = model.nodes[idx + 2]
            rec = relu.map_to_zero or MapToZeroRecord(node.out_channels + len(victims))
            relu.map_to_zero = rec.merge(victims)
        elif role == "block_internal":
            conv2 = model.nodes[idx + 3]
            conv2.weight = _drop_cols(conv2.weight, victims)
            conv2.in_channels = int(conv2.weight.shape[1])
        else:  # block_output: extent is pinned by the residual addition
            end = model.nodes[idx + 2]
            rec = end.map_to_zero or MapToZeroRecord(node.out_channels + len(victims))
            end.map_to_zero = rec.merge(victims)
        return
    if kind == "conv":  # plain family
        node.weight = _drop_rows(node.weight, victims)
        node.out_channels = int(node.weight.shape[0])
        _shrink_bn(model.nodes[idx + 1], victims)
        consumer = _next_conv_consumer(model, idx)
        if consumer is None:
            raise PruningError(f"conv at node {idx} has no consumer")
        cn = model.nodes[consumer]
        cn.weight = _drop_cols(cn.weight, victims)
        cn.in_channels = int(cn.weight.shape[1])
        return
    raise PruningError(f"node {idx} ({kind}) cannot be pruned")


# -- compression accounting ------------------------------------------------


def efficiency_score(compression_ratio: float, flops_reduction: float) -> float:
    """Single figure of merit: parameter ratio scaled by compute saved."""
    return compression_ratio * flops_reduction


@dataclass(frozen=True)
class CompressionReport:
    params_original: int
    params_pruned: int
    flops_original: int
    flops_pruned: int

    @property
    def compression_ratio(self) -> float:
        return self.params_original / self.params_pruned

    @property
    def flops_reduction(self) -> float:
        return 1.0 - self.flops_pruned / self.flops_original

    @property
    def efficiency(self) -> float:
        return efficiency_score(self.compression_ratio, self.flops_reduction)

    def to_dict(self) -> dict:
        return {
            "params_original": self.params_original,
            "params_pruned": self.params_pruned,
            "flops_original": self.flops_original,
            "flops_pruned": self.flops_pruned,
            "compression_ratio": self.compression_ratio,
            "flops_reduction": self.flops_reduction,
            "efficiency": self.efficiency,
        }


def compression_report(
    original: ModelGraph, pruned: ModelGraph, input_extents: tuple[int, int]
) -> CompressionReport:
    _, p_orig = param_count(original)
    _, p_new = param_count(pruned)
    _, f_orig = flops_count(original, input_extents)
    _, f_new = flops_count(pruned, input_extents)
    return CompressionReport(p_orig, p_new, f_orig, f_new)
