"""Convolutional model families as explicit layer graphs.

Three families are supported:

- ``plain``     stages of conv/batchnorm/relu with average pooling between
                stages; removing a filter deletes the matching input channel
                of the next convolution.
- ``residual``  a stem followed by two-conv residual blocks. Channels at a
                block's input and output are prunable independently; zero-fill
                records re-insert all-zero channels so the addition always
                sees the original extents. Downsampling blocks use a 1x1
                projection shortcut, which is not itself prunable.
- ``depthsep``  a stem followed by depthwise/pointwise pairs. Pointwise
                filters are the prunable units; the depthwise filter reading a
                pruned channel is removed together with it.

Every family ends in a 1x1 convolutional classifier followed by global
average pooling, so there is no fully connected layer anywhere. Classifier
filters count as prunable units; removing one pins that logit to zero via a
zero-fill record rather than changing the class count.

The graph also provides activation masking: ``mask_for_units`` maps a set of
prunable units to the points where zeroing their activations is exactly
equivalent to removing them structurally. This is the reference semantics
that pruning surgery is tested against.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import engine as en
from .engine import Tensor

__all__ = [
    "ModelError",
    "FilterRef",
    "MapToZeroRecord",
    "LayerNode",
    "ModelGraph",
    "build_model",
    "enumerate_prunable",
    "flops_count",
    "param_count",
    "evaluate_loss",
    "save_model",
    "load_model",
    "MODEL_MAGIC",
]

FAMILIES = ("plain", "residual", "depthsep")

CONVISH = ("conv", "pointwise", "depthwise", "classifier")


class ModelError(RuntimeError):
    """Structural contract violation in a model graph."""


class FilterRef(NamedTuple):
    """One prunable unit: (index of the owning node, unit index within it)."""

    layer: int
    filter: int


@dataclass(frozen=True)
class MapToZeroRecord:
    """Channels removed from a tensor that must reappear as zeros.

    `original` is the extent before any pruning; `pruned` lists removed
    positions in original coordinates, strictly increasing.
    """

    original: int
    pruned: tuple[int, ...] = ()

    def __post_init__(self):
        if self.original < 1:
            raise ModelError(f"MapToZeroRecord: bad extent {self.original}")
        p = tuple(int(i) for i in self.pruned)
        if list(p) != sorted(set(p)):
            raise ModelError("MapToZeroRecord: pruned indices must be strictly increasing")
        if p and (p[0] < 0 or p[-1] >= self.original):
            raise ModelError("MapToZeroRecord: pruned index out of range")
        object.__setattr__(self, "pruned", p)

    @property
    def survivors(self) -> tuple[int, ...]:
        dead = set(self.pruned)
        return tuple(i for i in range(self.original) if i not in dead)

    def merge(self, newly_pruned_positions) -> "MapToZeroRecord":
        """Add survivor-coordinate positions to the pruned set."""
        surv = self.survivors
        extra = {surv[int(i)] for i in newly_pruned_positions}
        return MapToZeroRecord(self.original, tuple(sorted(set(self.pruned) | extra)))


@dataclass
class LayerNode:
    """One step of the forward walk; unused fields stay at their defaults."""

    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    pool_size: int = 2
    block_channels: int = 0
    weight: Tensor | None = None
    scale: Tensor | None = None
    shift: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    map_to_zero: MapToZeroRecord | None = None
    input_cut: MapToZeroRecord | None = None
    proj_weight: Tensor | None = None
    proj_scale: Tensor | None = None
    proj_shift: Tensor | None = None
    proj_running_mean: np.ndarray | None = None
    proj_running_var: np.ndarray | None = None


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def _bn_state(c: int) -> dict:
    return dict(
        scale=Tensor(np.ones(c, dtype=np.float32), requires_grad=True),
        shift=Tensor(np.zeros(c, dtype=np.float32), requires_grad=True),
        running_mean=np.zeros(c, dtype=np.float32),
        running_var=np.ones(c, dtype=np.float32),
    )


class ModelGraph:
    """Ordered layer nodes plus the constructor arguments that shaped them."""

    def __init__(self, family, widths, blocks, classes, in_channels, seed, nodes):
        self.family = family
        self.widths = tuple(int(w) for w in widths)
        self.blocks = tuple(int(b) for b in blocks)
        self.classes = int(classes)
        self.in_channels = int(in_channels)
        self.seed = int(seed)
        self.nodes: list[LayerNode] = nodes

    # -- forward ----------------------------------------------------------

    def forward(self, x, training: bool = False, mask=None, capture=None) -> Tensor:
        """Compute logits [N, classes]; `mask` zeroes activation channels.

        `mask` maps node index -> channel indices zeroed right after that
        node (for a residual block entry, before the block consumes it).
        `capture`, if a dict, is filled with node-index -> activation arrays
        for every conv-like node, taken after its activation function.
        """
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.data.ndim != 4 or t.shape[1] != self.in_channels:
            raise ModelError(
                f"forward: expected input [N, {self.in_channels}, H, W], got {t.shape}"
            )
        mask = mask or {}
        shortcuts: list[Tensor] = []
        pending_conv: int | None = None
        nodes = self.nodes
        for i, node in enumerate(nodes):
            k = node.kind
            if k == "residual_begin":
                if i in mask:
                    t = en.zero_channels(t, mask[i])
                entry = t
                cut = node.input_cut
                cut_active = cut is not None and cut.pruned
                if node.proj_weight is not None:
                    sin = en.gather_channels(entry, cut.survivors) if cut_active else entry
                    sc = en.conv2d(sin, node.proj_weight, stride=node.stride, pad=0)
                    sc = en.batchnorm(
                        sc,
                        node.proj_scale,
                        node.proj_shift,
                        node.proj_running_mean,
                        node.proj_running_var,
                        training,
                    )
                else:
                    sc = en.zero_channels(entry, cut.pruned) if cut_active else entry
                shortcuts.append(sc)
                t = en.gather_channels(entry, cut.survivors) if cut_active else entry
                continue
            if k == "residual_end":
                if not shortcuts:
                    raise ModelError("forward: residual_end without matching begin")
                branch = t
                rec = node.map_to_zero
                if rec is not None and rec.pruned:
                    branch = en.expand_channels(branch, rec.original, rec.survivors)
                t = en.relu(en.add(shortcuts.pop(), branch))
                continue
            if k in ("conv", "pointwise", "classifier"):
                t = en.conv2d(t, node.weight, stride=node.stride, pad=node.pad)
                pending_conv = i
            elif k == "depthwise":
                t = en.depthwise_conv2d(t, node.weight, stride=node.stride, pad=node.pad)
                pending_conv = i
            elif k == "batchnorm":
                t = en.batchnorm(
                    t, node.scale, node.shift, node.running_mean, node.running_var, training
                )
            elif k == "relu":
                t = en.relu(t)
            elif k == "pool":
                t = en.avg_pool2d(t, node.pool_size)
            else:
                raise ModelError(f"forward: unknown node kind '{k}'")
            rec = node.map_to_zero
            if rec is not None and rec.pruned:
                t = en.expand_channels(t, rec.original, rec.survivors)
            if i in mask:
                t = en.zero_channels(t, mask[i])
            if capture is not None and pending_conv is not None:
                nxt = nodes[i + 1].kind if i + 1 < len(nodes) else None
                done_bn = k == "batchnorm" and nxt != "relu"
                if k == "relu" or done_bn or (k == "classifier" and nxt != "batchnorm"):
                    capture[pending_conv] = t.data
                    pending_conv = None
        if shortcuts:
            raise ModelError("forward: unterminated residual block")
        return en.global_avg_pool(t)

    # -- parameters and state --------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, node in enumerate(self.nodes):
            prefix = f"n{i:03d}.{node.name}"
            if node.weight is not None:
                out.append((f"{prefix}.weight", node.weight))
            if node.scale is not None:
                out.append((f"{prefix}.scale", node.scale))
                out.append((f"{prefix}.shift", node.shift))
            if node.proj_weight is not None:
                out.append((f"{prefix}.proj_weight", node.proj_weight))
                out.append((f"{prefix}.proj_scale", node.proj_scale))
                out.append((f"{prefix}.proj_shift", node.proj_shift))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, node in enumerate(self.nodes):
            prefix = f"n{i:03d}.{node.name}"
            if node.weight is not None:
                out[f"{prefix}.weight"] = node.weight.data
            if node.scale is not None:
                out[f"{prefix}.scale"] = node.scale.data
                out[f"{prefix}.shift"] = node.shift.data
                out[f"{prefix}.running_mean"] = node.running_mean
                out[f"{prefix}.running_var"] = node.running_var
            if node.proj_weight is not None:
                out[f"{prefix}.proj_weight"] = node.proj_weight.data
                out[f"{prefix}.proj_scale"] = node.proj_scale.data
                out[f"{prefix}.proj_shift"] = node.proj_shift.data
                out[f"{prefix}.proj_running_mean"] = node.proj_running_mean
                out[f"{prefix}.proj_running_var"] = node.proj_running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise ModelError(f"load_state_dict: missing entries {sorted(missing)[:4]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ModelError(
                    f"load_state_dict: shape mismatch for {name}: {src.shape} vs {arr.shape}"
                )
            arr[...] = src

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.grad = None

    def copy(self) -> "ModelGraph":
        clone = from_topology(self.to_topology())
        clone.load_state_dict(self.state_dict())
        return clone

    # -- prunable units ---------------------------------------------------

    def prunable_kinds(self) -> tuple[str, ...]:
        if self.family == "depthsep":
            return ("pointwise", "classifier")
        if self.family == "residual":
            return ("conv", "classifier", "residual_begin")
        return ("conv", "classifier")

    def unit_count(self, node_idx: int) -> int:
        node = self.nodes[node_idx]
        if node.kind == "residual_begin":
            cut = node.input_cut
            return node.block_channels - (len(cut.pruned) if cut else 0)
        return node.out_channels

    def prunable_layers(self) -> list[int]:
        kinds = self.prunable_kinds()
        return [i for i, n in enumerate(self.nodes) if n.kind in kinds]

    def bn_after(self, node_idx: int) -> int | None:
        j = node_idx + 1
        if j < len(self.nodes) and self.nodes[j].kind == "batchnorm":
            return j
        return None

    def next_depthwise(self, node_idx: int) -> int | None:
        for j in range(node_idx + 1, len(self.nodes)):
            if self.nodes[j].kind == "depthwise":
                return j
            if self.nodes[j].kind in ("conv", "pointwise", "classifier"):
                return None
        return None

    def _check_ref(self, ref: FilterRef) -> LayerNode:
        if not (0 <= ref.layer < len(self.nodes)):
            raise ModelError(f"bad layer index {ref.layer}")
        node = self.nodes[ref.layer]
        if node.kind not in self.prunable_kinds():
            raise ModelError(f"node {ref.layer} ({node.kind}) has no prunable units")
        if not (0 <= ref.filter < self.unit_count(ref.layer)):
            raise ModelError(f"unit index {ref.filter} out of range at node {ref.layer}")
        return node

    def _begin_consumers(self, begin_idx: int) -> LayerNode:
        conv1 = self.nodes[begin_idx + 1]
        if conv1.kind != "conv":
            raise ModelError("residual_begin not followed by its first convolution")
        return conv1

    def unit_weight(self, ref: FilterRef) -> np.ndarray:
        """Flattened weights owned by one prunable unit (current values)."""
        node = self._check_ref(ref)
        if node.kind == "residual_begin":
            conv1 = self._begin_consumers(ref.layer)
            parts = [conv1.weight.data[:, ref.filter].ravel()]
            if node.proj_weight is not None:
                parts.append(node.proj_weight.data[:, ref.filter].ravel())
            return np.concatenate(parts)
        return node.weight.data[ref.filter].ravel()

    def zero_unit_weights(self, refs) -> None:
        """Overwrite each unit's owned weights (the unit_weight view) with
        zeros, in place. Normalization parameters are left untouched, so a
        zeroed channel still emits its shift term downstream."""
        for ref in refs:
            ref = FilterRef(*ref)
            node = self._check_ref(ref)
            if node.kind == "residual_begin":
                conv1 = self._begin_consumers(ref.layer)
                conv1.weight.data[:, ref.filter] = 0.0
                if node.proj_weight is not None:
                    node.proj_weight.data[:, ref.filter] = 0.0
            else:
                node.weight.data[ref.filter] = 0.0

    def unit_grad(self, ref: FilterRef) -> np.ndarray:
        node = self._check_ref(ref)
        if node.kind == "residual_begin":
            conv1 = self._begin_consumers(ref.layer)
            if conv1.weight.grad is None:
                raise ModelError("unit_grad: no gradient available; run backward first")
            parts = [conv1.weight.grad[:, ref.filter].ravel()]
            if node.proj_weight is not None:
                parts.append(node.proj_weight.grad[:, ref.filter].ravel())
            return np.concatenate(parts)
        if node.weight.grad is None:
            raise ModelError("unit_grad: no gradient available; run backward first")
        return node.weight.grad[ref.filter].ravel()

    def unit_bn_scale(self, ref: FilterRef) -> float | None:
        """The batchnorm scale paired with a unit, or None if it has none."""
        node = self._check_ref(ref)
        if node.kind in ("residual_begin", "classifier"):
            return None
        bn = self.bn_after(ref.layer)
        if bn is None:
            return None
        return float(self.nodes[bn].scale.data[ref.filter])

    def mask_for_units(self, refs) -> dict[int, np.ndarray]:
        """Activation-zeroing points equivalent to removing the given units."""
        points: dict[int, set[int]] = {}
        for ref in refs:
            node = self._check_ref(FilterRef(*ref))
            if node.kind == "residual_begin":
                cut = node.input_cut
                pos = cut.survivors[ref.filter] if cut else ref.filter
                points.setdefault(ref.layer, set()).add(pos)
                continue
            if node.kind == "classifier":
                rec = node.map_to_zero
                pos = rec.survivors[ref.filter] if rec and rec.pruned else ref.filter
                points.setdefault(ref.layer, set()).add(pos)
                continue
            bn = self.bn_after(ref.layer)
            target = bn if bn is not None else ref.layer
            points.setdefault(target, set()).add(ref.filter)
            if node.kind == "pointwise":
                dw = self.next_depthwise(ref.layer)
                if dw is not None:
                    dwbn = self.bn_after(dw)
                    points.setdefault(dwbn if dwbn is not None else dw, set()).add(ref.filter)
        return {i: np.array(sorted(chs), dtype=np.int64) for i, chs in points.items()}

    def regularized_layers(self) -> list[tuple[str, Tensor]]:
        """(name, weight) for every conv-like layer except the classifier."""
        out = []
        for node in self.nodes:
            if node.kind in ("conv", "pointwise", "depthwise"):
                out.append((node.name, node.weight))
            if node.kind == "residual_begin" and node.proj_weight is not None:
                out.append((f"{node.name}_proj", node.proj_weight))
        return out

    # -- serialization ----------------------------------------------------

    def to_topology(self) -> dict:
        nodes = []
        for node in self.nodes:
            d = {
                "kind": node.kind,
                "name": node.name,
                "in_channels": node.in_channels,
                "out_channels": node.out_channels,
                "kernel": node.kernel,
                "stride": node.stride,
                "pad": node.pad,
                "pool_size": node.pool_size,
                "block_channels": node.block_channels,
                "map_to_zero": _rec_dump(node.map_to_zero),
                "input_cut": _rec_dump(node.input_cut),
                "proj": (
                    {"in_channels": node.proj_weight.shape[1], "out_channels": node.proj_weight.shape[0]}
                    if node.proj_weight is not None
                    else None
                ),
            }
            nodes.append(d)
        return {
            "family": self.family,
            "widths": list(self.widths),
            "blocks": list(self.blocks),
            "classes": self.classes,
            "in_channels": self.in_channels,
            "seed": self.seed,
            "nodes": nodes,
        }


def _rec_dump(rec: MapToZeroRecord | None):
    if rec is None:
        return None
    return [rec.original, list(rec.pruned)]


def _rec_load(obj) -> MapToZeroRecord | None:
    if obj is None:
        return None
    return MapToZeroRecord(int(obj[0]), tuple(int(i) for i in obj[1]))


def from_topology(top: dict) -> ModelGraph:
    """Rebuild a graph skeleton (zero weights) from its topology dict."""
    nodes = []
    for d in top["nodes"]:
        node = LayerNode(
            kind=d["kind"],
            name=d["name"],
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            kernel=int(d["kernel"]),
            stride=int(d["stride"]),
            pad=int(d["pad"]),
            pool_size=int(d["pool_size"]),
            block_channels=int(d["block_channels"]),
            map_to_zero=_rec_load(d["map_to_zero"]),
            input_cut=_rec_load(d["input_cut"]),
        )
        if node.kind in ("conv", "pointwise", "classifier"):
            shape = (node.out_channels, node.in_channels, node.kernel, node.kernel)
            node.weight = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        elif node.kind == "depthwise":
            shape = (node.out_channels, 1, node.kernel, node.kernel)
            node.weight = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        elif node.kind == "batchnorm":
            for k, v in _bn_state(node.out_channels).items():
                setattr(node, k, v)
        if d.get("proj") is not None:
            pin, pout = int(d["proj"]["in_channels"]), int(d["proj"]["out_channels"])
            node.proj_weight = Tensor(np.zeros((pout, pin, 1, 1), dtype=np.float32), requires_grad=True)
            bn = _bn_state(pout)
            node.proj_scale = bn["scale"]
            node.proj_shift = bn["shift"]
            node.proj_running_mean = bn["running_mean"]
            node.proj_running_var = bn["running_var"]
        nodes.append(node)
    return ModelGraph(
        top["family"],
        top["widths"],
        top["blocks"],
        top["classes"],
        top["in_channels"],
        top["seed"],
        nodes,
    )


# -- builders -------------------------------------------------------------


def build_model(
    family: str,
    widths,
    blocks_per_stage=None,
    classes: int = 10,
    in_channels: int = 3,
    seed: int = 0,
) -> ModelGraph:
    """Construct an initialized model graph for one of the three families."""
    if family not in FAMILIES:
        raise ModelError(f"unknown family '{family}'; expected one of {FAMILIES}")
    widths = [int(w) for w in widths]
    if not widths:
        raise ModelError("widths must be non-empty")
    if any(w < 2 for w in widths):
        raise ModelError("width < 2 cannot satisfy the one-filter floor after pruning")
    blocks = [1] * len(widths) if blocks_per_stage is None else [int(b) for b in blocks_per_stage]
    if len(blocks) != len(widths) or any(b < 1 for b in blocks):
        raise ModelError("blocks_per_stage must match widths and be positive")
    if classes < 2:
        raise ModelError("need at least 2 classes")
    if in_channels < 1:
        raise ModelError("need at least 1 input channel")
    if family == "depthsep" and len(widths) < 2:
        raise ModelError("depthsep needs a stem width plus at least one pair stage")

    rng = np.random.default_rng(seed)
    build = {"plain": _build_plain, "residual": _build_residual, "depthsep": _build_depthsep}[
        family
    ]
    nodes = build(rng, widths, blocks, classes, in_channels)
    return ModelGraph(family, widths, blocks, classes, in_channels, seed, nodes)


def _conv_node(rng, name, cin, cout, kernel, stride, pad, kind="conv") -> LayerNode:
    node = LayerNode(
        kind=kind, name=name, in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, pad=pad
    )
    node.weight = _he_uniform(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
    return node


def _bn_node(name, c) -> LayerNode:
    node = LayerNode(kind="batchnorm", name=name, in_channels=c, out_channels=c)
    for k, v in _bn_state(c).items():
        setattr(node, k, v)
    return node


def _relu_node(name, c) -> LayerNode:
    return LayerNode(kind="relu", name=name, in_channels=c, out_channels=c)


def _build_plain(rng, widths, blocks, classes, in_channels):
    nodes = []
    c = in_channels
    for s, (w, b) in enumerate(zip(widths, blocks)):
        for j in range(b):
            nodes.append(_conv_node(rng, f"conv{s}_{j}", c, w, 3, 1, 1))
            nodes.append(_bn_node(f"bn{s}_{j}", w))
            nodes.append(_relu_node(f"relu{s}_{j}", w))
            c = w
        if s < len(widths) - 1:
            nodes.append(LayerNode(kind="pool", name=f"pool{s}", in_channels=c, out_channels=c))
    nodes.append(_conv_node(rng, "head", c, classes, 1, 1, 0, kind="classifier"))
    return nodes


def _build_residual(rng, widths, blocks, classes, in_channels):
    nodes = [
        _conv_node(rng, "stem", in_channels, widths[0], 3, 1, 1),
        _bn_node("stem_bn", widths[0]),
        _relu_node("stem_relu", widths[0]),
    ]
    c = widths[0]
    k = 0
    for s, (w, b) in enumerate(zip(widths, blocks)):
        for j in range(b):
            downsample = j == 0 and s > 0
            stride = 2 if downsample else 1
            begin = LayerNode(
                kind="residual_begin",
                name=f"b{k}_begin",
                in_channels=c,
                out_channels=c,
                stride=stride,
                block_channels=c,
            )
            if downsample or (j == 0 and w != c):
                begin.proj_weight = _he_uniform(rng, (w, c, 1, 1), c)
                bn = _bn_state(w)
                begin.proj_scale = bn["scale"]
                begin.proj_shift = bn["shift"]
                begin.proj_running_mean = bn["running_mean"]
                begin.proj_running_var = bn["running_var"]
                begin.block_channels = c
            nodes.append(begin)
            nodes.append(_conv_node(rng, f"b{k}_conv1", c, w, 3, stride, 1))
            nodes.append(_bn_node(f"b{k}_bn1", w))
            nodes.append(_relu_node(f"b{k}_relu1", w))
            nodes.append(_conv_node(rng, f"b{k}_conv2", w, w, 3, 1, 1))
            nodes.append(_bn_node(f"b{k}_bn2", w))
            nodes.append(
                LayerNode(
                    kind="residual_end",
                    name=f"b{k}_end",
                    in_channels=w,
                    out_channels=w,
                    block_channels=w,
                    map_to_zero=MapToZeroRecord(w),
                )
            )
            c = w
            k += 1
    nodes.append(_conv_node(rng, "head", c, classes, 1, 1, 0, kind="classifier"))
    return nodes


def _build_depthsep(rng, widths, blocks, classes, in_channels):
    nodes = [
        _conv_node(rng, "stem", in_channels, widths[0], 3, 1, 1),
        _bn_node("stem_bn", widths[0]),
        _relu_node("stem_relu", widths[0]),
    ]
    c = widths[0]
    i = 0
    for s in range(1, len(widths)):
        w = widths[s]
        for j in range(blocks[s]):
            stride = 2 if (j == 0 and s >= 2) else 1
            dw = LayerNode(
                kind="depthwise",
                name=f"dw{i}",
                in_channels=c,
                out_channels=c,
                kernel=3,
                stride=stride,
                pad=1,
            )
            dw.weight = _he_uniform(rng, (c, 1, 3, 3), 9)
            nodes.append(dw)
            nodes.append(_bn_node(f"dw{i}_bn", c))
            nodes.append(_relu_node(f"dw{i}_relu", c))
            nodes.append(_conv_node(rng, f"pw{i}", c, w, 1, 1, 0, kind="pointwise"))
            nodes.append(_bn_node(f"pw{i}_bn", w))
            nodes.append(_relu_node(f"pw{i}_relu", w))
            c = w
            i += 1
    nodes.append(_conv_node(rng, "head", c, classes, 1, 1, 0, kind="classifier"))
    return nodes


# -- enumeration and cost accounting --------------------------------------


def enumerate_prunable(model: ModelGraph) -> list[FilterRef]:
    """All prunable units in stable (node order, ascending index) order."""
    refs = []
    for i in model.prunable_layers():
        refs.extend(FilterRef(i, f) for f in range(model.unit_count(i)))
    return refs


def flops_count(model: ModelGraph, input_extents: tuple[int, int]):
    """Multiply-accumulate counts per weighted layer, and their total.

    Only convolutions cost anything: batchnorm, activations, pooling,
    additions and zero-fill re-insertions all count as zero.
    """
    h, w = (int(e) for e in input_extents)
    if h < 1 or w < 1:
        raise ModelError(f"flops_count: bad input extents ({h}, {w})")
    per_layer: dict[str, int] = {}
    c = model.in_channels
    shortcut_stack = []

    def conv_out(hh, ww, kernel, stride, pad):
        return (hh + 2 * pad - kernel) // stride + 1, (ww + 2 * pad - kernel) // stride + 1

    for node in model.nodes:
        k = node.kind
        if k in ("conv", "pointwise", "classifier"):
            ho, wo = conv_out(h, w, node.kernel, node.stride, node.pad)
            macs = ho * wo * node.kernel * node.kernel * node.weight.shape[1] * node.weight.shape[0]
            per_layer[node.name] = macs
            h, w, c = ho, wo, node.weight.shape[0]
            if node.map_to_zero is not None and node.map_to_zero.pruned:
                c = node.map_to_zero.original
        elif k == "depthwise":
            ho, wo = conv_out(h, w, node.kernel, node.stride, node.pad)
            per_layer[node.name] = ho * wo * node.kernel * node.kernel * node.weight.shape[0]
            h, w = ho, wo
        elif k == "pool":
            h, w = h // node.pool_size, w // node.pool_size
        elif k == "residual_begin":
            if node.proj_weight is not None:
                ho, wo = conv_out(h, w, 1, node.stride, 0)
                pin, pout = node.proj_weight.shape[1], node.proj_weight.shape[0]
                per_layer[f"{node.name}_proj"] = ho * wo * pin * pout
                shortcut_stack.append((pout, ho, wo))
            else:
                shortcut_stack.append((c, h, w))
            cut = node.input_cut
            if cut is not None and cut.pruned:
                c = len(cut.survivors)
        elif k == "residual_end":
            c, _, _ = shortcut_stack.pop()
            c = node.map_to_zero.original if node.map_to_zero else c
        elif k == "relu" and node.map_to_zero is not None and node.map_to_zero.pruned:
            c = node.map_to_zero.original
    return per_layer, sum(per_layer.values())


def param_count(model: ModelGraph):
    """Weight plus batchnorm affine parameter counts per layer, and total."""
    per_layer: dict[str, int] = {}
    for node in model.nodes:
        if node.weight is not None:
            per_layer[node.name] = int(node.weight.size)
        if node.scale is not None:
            per_layer[node.name] = per_layer.get(node.name, 0) + int(
                node.scale.size + node.shift.size
            )
        if node.proj_weight is not None:
            per_layer[f"{node.name}_proj"] = int(
                node.proj_weight.size + node.proj_scale.size + node.proj_shift.size
            )
    return per_layer, sum(per_layer.values())


def evaluate_loss(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
    mask=None,
    training: bool = False,
) -> float:
    """Mean cross-entropy over a dataset slice, computed in eval mode."""
    n = images.shape[0]
    if n == 0:
        raise ModelError("evaluate_loss: empty input")
    total = 0.0
    for start in range(0, n, batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits = model.forward(Tensor(xb), training=training, mask=mask)
        loss = en.softmax_cross_entropy(logits, yb)
        total += loss.item() * xb.shape[0]
    return total / n


# -- model files ----------------------------------------------------------

MODEL_MAGIC = b"OPRNMDL1"


def save_model(path, model: ModelGraph, extra: dict | None = None, meta: dict | None = None) -> None:
    """Write topology header plus all tensors (and optional extras) to disk."""
    header = json.dumps(
        {"topology": model.to_topology(), "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tensors = dict(model.state_dict())
    for name, arr in (extra or {}).items():
        key = f"extra.{name}"
        if key in tensors:
            raise ModelError(f"save_model: duplicate extra tensor {name}")
        tensors[key] = np.asarray(arr, dtype=np.float32)
    blob = en.pack_tensors(tensors)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(blob)


def load_model(path):
    """Read a model file; returns (model, extra_tensors, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise ModelError("load_model: bad magic string")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    tensors = en.unpack_tensors(raw[16 + hlen :])
    model = from_topology(header["topology"])
    state = {k: v for k, v in tensors.items() if not k.startswith("extra.")}
    extra = {k[len("extra.") :]: v for k, v in tensors.items() if k.startswith("extra.")}
    model.load_state_dict(state)
    return model, extra, header.get("meta", {})
