"""Skeleton encoder: block stack, global/part pooling, projection heads.

The model owns flat name->array views of every parameter and buffer so the
optimizer can update arrays in place and checkpoints can serialize them in a
fixed manifest order.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import ConfigError, DataFormatError, PartitionError, ShapeError
from .graph import PartPartition, SkeletonGraph, make_partition, make_skeleton_graph

CHECKPOINT_FORMAT = "skelalign-checkpoint-v1"


@dataclass
class EncoderConfig:
    num_classes: int
    head_dim: int = 256          # output width of the per-slot projection heads
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 16, 32, 32)
    strides: tuple[int, ...] = (1, 1, 2, 1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides must have equal length")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")


# The stack depth and widths used on NTU-scale data in the reference recipe;
# the desk-scale default above trains in seconds instead.
PAPER_PRESET_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
PAPER_PRESET_STRIDES = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)


@dataclass
class EncoderOutput:
    global_feature: np.ndarray            # [B, F_out]
    part_features: np.ndarray | None      # [slots, B, head_dim], None when skipped
    logits: np.ndarray                    # [B, num_classes]


def pool_features(h_last, partition: PartPartition):
    """Global and per-part average pooling of [B, F, T, N] features.

    Returns (global [B, F], parts [K, B, F]); the global feature averages
    over all frames and joints, part k over frames and its joint group.
    """
    if h_last.ndim != 4:
        raise ShapeError(f"expected rank-4 features, got {h_last.shape}")
    n = h_last.shape[3]
    g = h_last.mean(axis=(2, 3))
    parts = []
    for gname, group in zip(partition.group_names, partition.groups):
        if not group:
            raise PartitionError(f"group {gname!r} is empty")
        if max(group) >= n:
            raise PartitionError(f"group {gname!r} references joint {max(group)} but features have {n}")
        parts.append(h_last[:, :, :, list(group)].mean(axis=(2, 3)))
    return g, np.stack(parts)


class EncoderModel:
    """Stacked graph/temporal blocks with classifier and projection heads.

    Single-threaded per instance: forward caches feed the matching backward.
    ``rng=None`` builds zero-filled parameters (used when loading weights).
    """

    def __init__(self, config: EncoderConfig, graph: SkeletonGraph,
                 partition: PartPartition, include_global: bool | None = None,
                 rng=None, dtype=np.float32):
        self.config = config
        self.graph = graph
        self.partition = partition
        self.include_global = partition.include_global if include_global is None else include_global
        self.num_slots = partition.num_parts + int(self.include_global)
        self.dtype = dtype

        self.blocks = []
        fan_in = config.in_channels
        for ch, st in zip(config.channels, config.strides):
            self.blocks.append(layers.EncoderBlock(
                graph.adjacency_norm, fan_in, ch, st, rng, dtype,
                bn_momentum=config.bn_momentum, bn_eps=config.bn_eps))
            fan_in = ch
        self.feature_dim = fan_in
        self.classifier = layers.Linear(fan_in, config.num_classes, rng, dtype)
        self.part_heads = [layers.Linear(fan_in, config.head_dim, rng, dtype)
                           for _ in range(self.num_slots)]

    # -- parameter plumbing ------------------------------------------------

    def _named_layers(self):
        for i, block in enumerate(self.blocks):
            for sub, layer in block.sublayers():
                yield f"blocks.{i}.{sub}", layer
        yield "classifier", self.classifier
        for s, head in enumerate(self.part_heads):
            yield f"part_heads.{s}", head

    def params(self) -> OrderedDict[str, np.ndarray]:
        out = OrderedDict()
        for prefix, layer in self._named_layers():
            for name, arr in layer.params.items():
                out[f"{prefix}.{name}"] = arr
        return out

    def buffers(self) -> OrderedDict[str, np.ndarray]:
        out = OrderedDict()
        for prefix, layer in self._named_layers():
            for name, arr in layer.buffers.items():
                out[f"{prefix}.{name}"] = arr
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self._named_layers():
            for name, arr in layer.grads.items():
                out[f"{prefix}.{name}"] = arr
        return out

    def clear_grads(self):
        for _, layer in self._named_layers():
            layer.grads = {}

    # -- forward / backward -------------------------------------------------

    def forward(self, x, train=False, compute_parts=True) -> EncoderOutput:
        """Run [B, 3, T, N] coordinates through the full encoder."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B,{self.config.in_channels},T,N] input, got {x.shape}")
        if x.shape[3] != self.graph.num_joints:
            raise ShapeError(f"input has {x.shape[3]} joints, graph has {self.graph.num_joints}")
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        for block in self.blocks:
            h = block.forward(h, train)
        b, t, n, f = h.shape
        self._pool_shape = (b, t, n, f)
        g = h.mean(axis=(1, 2))
        logits = self.classifier.forward(g)
        part_features = None
        if compute_parts:
            pooled = [h[:, :, list(grp), :].mean(axis=(1, 2)) for grp in self.partition.groups]
            if self.include_global:
                pooled.append(g)
            self._pooled = pooled
            part_features = np.stack([head.forward(p)
                                      for head, p in zip(self.part_heads, pooled)])
        return EncoderOutput(global_feature=g, part_features=part_features, logits=logits)

    def backward(self, dlogits=None, dpart_features=None):
        """Accumulate parameter gradients; returns nothing.

        ``dpart_features`` is [slots, B, head_dim] aligned with the forward's
        part_features (requires compute_parts=True on that forward).
        """
        b, t, n, f = self._pool_shape
        dh = np.zeros((b, t, n, f), dtype=self.dtype)
        dg = np.zeros((b, f), dtype=self.dtype)
        if dlogits is not None:
            dg += self.classifier.backward(dlogits.astype(self.dtype, copy=False))
        if dpart_features is not None:
            for s, head in enumerate(self.part_heads):
                dpool = head.backward(dpart_features[s].astype(self.dtype, copy=False))
                if self.include_global and s == len(self.part_heads) - 1:
                    dg += dpool
                else:
                    grp = list(self.partition.groups[s])
                    dh[:, :, grp, :] += dpool[:, None, None, :] / (t * len(grp))
        dh += dg[:, None, None, :] / (t * n)
        for block in reversed(self.blocks):
            dh = block.backward(dh)

    # -- gradcheck support ---------------------------------------------------

    def relu_tie_margin(self, x, train=True) -> float:
        """Smallest |pre-activation| / max-pool tie gap across the stack."""
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        margin = np.inf
        for block in self.blocks:
            gx = block.gc.forward(h)
            pre_in = block.bn.forward(block.mtc.forward(gx), train)
            r = h if block.residual is None else block.residual.forward(h)
            pre = pre_in + r
            margin = min(margin, float(np.abs(pre).min()))
            for op, red in zip(block.mtc.ops, block.mtc.reduce):
                if isinstance(op, layers.TemporalMaxPool):
                    margin = min(margin, op.tie_margin(red.forward(gx)))
            h = np.where(pre > 0, pre, 0.0)
        return margin


def build_model(graph, partition, num_classes, head_dim, rng, dtype=np.float32,
                channels=(16, 16, 32, 32), strides=(1, 1, 2, 1),
                include_global=None) -> EncoderModel:
    config = EncoderConfig(num_classes=num_classes, head_dim=head_dim,
                           channels=tuple(channels), strides=tuple(strides))
    return EncoderModel(config, graph, partition, include_global=include_global,
                        rng=rng, dtype=dtype)


# -- checkpoint serialization --------------------------------------------


def _manifest(model: EncoderModel):
    entries = [{"name": k, "shape": list(v.shape), "kind": "param"}
               for k, v in model.params().items()]
    entries += [{"name": k, "shape": list(v.shape), "kind": "buffer"}
                for k, v in model.buffers().items()]
    return entries


def save_checkpoint(model: EncoderModel, out_dir, extra: dict | None = None):
    """Write model.json (architecture + manifest) and weights.f32."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {
            "num_classes": model.config.num_classes,
            "head_dim": model.config.head_dim,
            "in_channels": model.config.in_channels,
            "channels": list(model.config.channels),
            "strides": list(model.config.strides),
            "bn_momentum": model.config.bn_momentum,
            "bn_eps": model.config.bn_eps,
            "include_global": model.include_global,
        },
        "skeleton": {
            "name": model.graph.name,
            "num_joints": model.graph.num_joints,
            "edges": [list(e) for e in model.graph.edges],
            "parent": list(model.graph.parent),
        },
        "partition": {
            "name": model.partition.name,
            "group_names": list(model.partition.group_names),
            "groups": [list(g) for g in model.partition.groups],
            "include_global": model.partition.include_global,
        },
        "manifest": _manifest(model),
        "extra": extra or {},
    }
    with open(os.path.join(out_dir, "model.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    arrays = list(model.params().values()) + list(model.buffers().values())
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    with open(os.path.join(out_dir, "weights.f32"), "wb") as f:
        f.write(blob)


def load_checkpoint(path) -> tuple[EncoderModel, dict]:
    """Rebuild a model from a checkpoint directory (or its model.json path)."""
    if os.path.isdir(path):
        json_path = os.path.join(path, "model.json")
    else:
        json_path = path
    weights_path = os.path.join(os.path.dirname(json_path), "weights.f32")
    with open(json_path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"unrecognized checkpoint format {doc.get('format')!r}")
    arch, skel, part = doc["architecture"], doc["skeleton"], doc["partition"]
    graph = make_skeleton_graph(skel["name"], skel["num_joints"], skel["edges"], skel["parent"])
    partition = make_partition(part["name"], part["group_names"], part["groups"],
                               graph.num_joints, part["include_global"])
    config = EncoderConfig(
        num_classes=arch["num_classes"], head_dim=arch["head_dim"],
        in_channels=arch["in_channels"], channels=tuple(arch["channels"]),
        strides=tuple(arch["strides"]), bn_momentum=arch["bn_momentum"],
        bn_eps=arch["bn_eps"])
    model = EncoderModel(config, graph, partition,
                         include_global=arch["include_global"], rng=None)
    with open(weights_path, "rb") as f:
        blob = f.read()
    arrays = list(model.params().items()) + list(model.buffers().items())
    offset = 0
    for entry, (name, arr) in zip(doc["manifest"], arrays):
        if entry["name"] != name or list(arr.shape) != entry["shape"]:
            raise DataFormatError(f"manifest mismatch at {entry['name']!r} (model has {name} {arr.shape})")
        nbytes = arr.size * 4
        if offset + nbytes > len(blob):
            raise DataFormatError(
                f"weights.f32 truncated at byte {len(blob)}; {name} needs bytes [{offset},{offset + nbytes})")
        arr[...] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise DataFormatError(f"weights.f32 has {len(blob) - offset} trailing bytes after offset {offset}")
    return model, doc.get("extra", {})
