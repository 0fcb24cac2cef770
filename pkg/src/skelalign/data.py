"""Synthetic part-motion datasets, input modalities, and disk formats.

Generated samples start from a fixed rest pose; the joints of each class's
active body parts get a sinusoidal displacement (class frequency and
amplitude, random phase and per-joint direction) and every joint gets
Gaussian jitter.  Alongside the coordinates the generator emits a
description corpus whose texts name which parts move and how, mirroring how
a language model would describe the action.

On-disk dataset layout (one directory per split):
    meta.json   {"shape": [S,3,T,N], "num_classes", "class_names", "generator"}
    data.f32    row-major little-endian fp32 of shape [S,3,T,N]
    labels.u32  little-endian uint32, length S
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (ConfigError, DataFormatError, InvalidGraphError,
                     ShapeError, UnsupportedPartitionError)
from .graph import SkeletonGraph, build_partition, build_skeleton, validate_parent_map
from .textbank import ClassDescription, DescriptionCorpus

MODALITIES = ("joint", "bone", "joint_motion", "bone_motion")

DATASET_FORMAT = "skelalign-dataset-v1"


@dataclass
class SkeletonBatch:
    """Dense [S, 3, T, N] coordinate array with integer class labels."""

    data: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise ShapeError(f"expected [S,3,T,N] data, got {self.data.shape}")
        if self.data.shape[2] < 2:
            raise ShapeError("need at least two frames")
        if len(self.labels) != self.data.shape[0]:
            raise ShapeError("labels/data length mismatch")
        if not np.isfinite(self.data).all():
            raise ConfigError("non-finite values in coordinate data")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels outside [0,{self.num_classes})")

    @property
    def num_samples(self) -> int:
        return self.data.shape[0]


@dataclass
class ClassRecipe:
    name: str
    active_parts: tuple[str, ...]
    frequency: float    # full cycles over the sequence
    amplitude: float

    def key(self):
        return (tuple(sorted(self.active_parts)), self.frequency, self.amplitude)


@dataclass
class SyntheticSpec:
    """Everything needed to regenerate a dataset deterministically."""

    skeleton: str = "toy10"
    frames: int = 32
    train_per_class: int = 100
    test_per_class: int = 50
    noise_sigma: float = 0.1
    seed: int = 7
    classes: list[ClassRecipe] = field(default_factory=lambda: list(DEFAULT_RECIPES))

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError("need at least two frames")
        keys = [r.key() for r in self.classes]
        if len(set(keys)) != len(keys):
            raise ConfigError("class recipes must be pairwise distinct")
        valid = set(build_partition("four_part", build_skeleton(self.skeleton)).group_names)
        for r in self.classes:
            bad = set(r.active_parts) - valid
            if bad:
                raise ConfigError(f"class {r.name!r} uses unknown parts {sorted(bad)}; valid: {sorted(valid)}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "skeleton": self.skeleton, "frames": self.frames,
            "train_per_class": self.train_per_class, "test_per_class": self.test_per_class,
            "noise_sigma": self.noise_sigma, "seed": self.seed,
            "classes": [{"name": r.name, "active_parts": list(r.active_parts),
                         "frequency": r.frequency, "amplitude": r.amplitude}
                        for r in self.classes],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        try:
            classes = [ClassRecipe(name=c["name"], active_parts=tuple(c["active_parts"]),
                                   frequency=float(c["frequency"]), amplitude=float(c["amplitude"]))
                       for c in doc["classes"]] if "classes" in doc else list(DEFAULT_RECIPES)
            return cls(skeleton=doc.get("skeleton", "toy10"), frames=int(doc.get("frames", 32)),
                       train_per_class=int(doc.get("train_per_class", 100)),
                       test_per_class=int(doc.get("test_per_class", 50)),
                       noise_sigma=float(doc.get("noise_sigma", 0.1)),
                       seed=int(doc.get("seed", 7)), classes=classes)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None


DEFAULT_RECIPES = (
    ClassRecipe("wave hands", ("hands",), 3.0, 0.30),
    ClassRecipe("stomp legs", ("legs",), 3.0, 0.30),
    ClassRecipe("nod head", ("head",), 3.0, 0.30),
    ClassRecipe("sway hips", ("hip",), 3.0, 0.30),
    ClassRecipe("clap hands", ("hands",), 6.0, 0.15),
    ClassRecipe("jumping jacks", ("hands", "legs"), 3.0, 0.30),
)

REST_POSES = {
    "toy10": [
        (0.0, 0.9, 0.0), (0.0, 0.5, 0.0), (-0.5, 0.5, 0.0), (0.5, 0.5, 0.0),
        (0.0, 0.2, 0.0), (0.0, 0.0, 0.0), (-0.2, -0.45, 0.0), (0.2, -0.45, 0.0),
        (-0.2, -0.9, 0.0), (0.2, -0.9, 0.0),
    ],
    "ntu25": [
        (0.0, 0.0, 0.0), (0.0, 0.25, 0.0), (0.0, 0.55, 0.0), (0.0, 0.7, 0.0),
        (-0.2, 0.5, 0.0), (-0.3, 0.25, 0.0), (-0.35, 0.05, 0.0), (-0.37, -0.03, 0.0),
        (0.2, 0.5, 0.0), (0.3, 0.25, 0.0), (0.35, 0.05, 0.0), (0.37, -0.03, 0.0),
        (-0.12, -0.05, 0.0), (-0.14, -0.45, 0.0), (-0.15, -0.85, 0.0), (-0.18, -0.92, 0.1),
        (0.12, -0.05, 0.0), (0.14, -0.45, 0.0), (0.15, -0.85, 0.0), (0.18, -0.92, 0.1),
        (0.0, 0.45, 0.0), (-0.39, -0.08, 0.0), (-0.34, -0.07, 0.0), (0.39, -0.08, 0.0),
        (0.34, -0.07, 0.0),
    ],
    "ucla20": [
        (0.0, 0.0, 0.0), (0.0, 0.3, 0.0), (0.0, 0.55, 0.0), (0.0, 0.75, 0.0),
        (-0.2, 0.5, 0.0), (-0.3, 0.25, 0.0), (-0.35, 0.05, 0.0), (-0.38, -0.03, 0.0),
        (0.2, 0.5, 0.0), (0.3, 0.25, 0.0), (0.35, 0.05, 0.0), (0.38, -0.03, 0.0),
        (-0.12, -0.05, 0.0), (-0.14, -0.45, 0.0), (-0.15, -0.85, 0.0), (-0.18, -0.92, 0.1),
        (0.12, -0.05, 0.0), (0.14, -0.45, 0.0), (0.15, -0.85, 0.0), (0.18, -0.92, 0.1),
    ],
}


class SyntheticDataset(NamedTuple):
    train: SkeletonBatch
    test: SkeletonBatch
    corpus: DescriptionCorpus


def _active_joints(spec: SyntheticSpec, graph) -> dict[str, tuple[int, ...]]:
    partition = build_partition("four_part", graph)
    return dict(zip(partition.group_names, partition.groups))


def _generate_split(spec: SyntheticSpec, graph, split_tag: int, per_class: int) -> SkeletonBatch:
    rest = np.asarray(REST_POSES[spec.skeleton], dtype=np.float64).T  # [3, N]
    part_joints = _active_joints(spec, graph)
    t_axis = np.arange(spec.frames, dtype=np.float64)
    total = per_class * spec.num_classes
    data = np.empty((total, 3, spec.frames, graph.num_joints), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    s = 0
    for class_id, recipe in enumerate(spec.classes):
        for idx in range(per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=[spec.seed, split_tag, class_id, idx]))
            x = np.broadcast_to(rest[:, None, :], (3, spec.frames, graph.num_joints)).copy()
            for part in recipe.active_parts:
                phase = rng.uniform(0.0, 2 * np.pi)
                wave = np.sin(2 * np.pi * recipe.frequency * t_axis / spec.frames + phase)
                for j in part_joints[part]:
                    direction = rng.standard_normal(3)
                    direction /= np.linalg.norm(direction)
                    x[:, :, j] += recipe.amplitude * direction[:, None] * wave[None, :]
            x += rng.normal(0.0, spec.noise_sigma, size=x.shape)
            data[s] = x.astype(np.float32)
            labels[s] = class_id
            s += 1
    return SkeletonBatch(data=data, labels=labels, num_classes=spec.num_classes)


_SPEED_WORDS = ((2.0, "slow"), (4.0, "steady"), (7.0, "quick"), (np.inf, "rapid"))
_SIZE_WORDS = ((0.1, "subtle"), (0.25, "small"), (0.5, "wide"), (np.inf, "sweeping"))
_PATTERNS = ("circle", "arc", "wave", "line")
_SYNONYM_VERBS = ("move", "swing", "shake", "rock", "sway",
                  "wiggle", "pump", "flap", "bob", "stir")


def _word_for(value, table) -> str:
    for threshold, word in table:
        if value < threshold:
            return word
    return table[-1][1]


def _describe_class(spec: SyntheticSpec, graph, class_id: int) -> ClassDescription:
    recipe = spec.classes[class_id]
    speed = _word_for(recipe.frequency, _SPEED_WORDS)
    size = _word_for(recipe.amplitude, _SIZE_WORDS)
    pattern = _PATTERNS[class_id % len(_PATTERNS)]
    active = set()
    for part in recipe.active_parts:
        active.update(_active_joints(spec, graph)[part])

    part_descriptions = {}
    for scheme in ("two_part", "four_part", "six_part"):
        try:
            partition = build_partition(scheme, graph)
        except UnsupportedPartitionError:
            continue
        for gname, group in zip(partition.group_names, partition.groups):
            if set(group) & active:
                part_descriptions[gname] = f"{gname} moves in a {speed} {size} {pattern}"
            else:
                part_descriptions[gname] = f"{gname} remains stationary"
    moving = " and ".join(recipe.active_parts)
    part_descriptions["body"] = (
        f"the {moving} move in a {speed} {size} {pattern}; other parts remain stationary")

    adverb = speed + "ly" if not speed.endswith("y") else "steadily"
    synonyms = [f"{verb} the {moving} {adverb}" for verb in _SYNONYM_VERBS]
    paragraph = (f"The person performs {recipe.name}. "
                 + "; ".join(part_descriptions[n] for n in ("head", "hands", "hip", "legs")
                             if n in part_descriptions) + ".")
    return ClassDescription(class_id=class_id, label_name=recipe.name,
                            paragraph=paragraph, synonyms=synonyms,
                            part_descriptions=part_descriptions)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Train/test splits plus the matching description corpus.

    Bit-reproducible for a fixed spec: every sample derives its own rng from
    (seed, split, class, index), so generation order does not matter.
    """
    if spec.skeleton not in REST_POSES:
        raise ConfigError(f"no rest pose for skeleton {spec.skeleton!r}")
    graph = build_skeleton(spec.skeleton)
    train = _generate_split(spec, graph, 0, spec.train_per_class)
    test = _generate_split(spec, graph, 1, spec.test_per_class)
    corpus = DescriptionCorpus([_describe_class(spec, graph, c)
                                for c in range(spec.num_classes)])
    return SyntheticDataset(train, test, corpus)


# -- modality derivation ----------------------------------------------------


def to_bone(batch: SkeletonBatch, graph: SkeletonGraph) -> SkeletonBatch:
    """Parent-relative offsets; the root joint becomes the zero vector."""
    if not validate_parent_map(graph):
        raise InvalidGraphError(f"invalid parent map on skeleton {graph.name!r}")
    parent = np.asarray(graph.parent)
    bones = batch.data - batch.data[:, :, :, parent]
    return SkeletonBatch(data=bones, labels=batch.labels, num_classes=batch.num_classes)


def to_motion(batch: SkeletonBatch) -> SkeletonBatch:
    """Frame differences x[t+1] - x[t]; the last frame becomes zero."""
    motion = np.zeros_like(batch.data)
    motion[:, :, :-1] = batch.data[:, :, 1:] - batch.data[:, :, :-1]
    return SkeletonBatch(data=motion, labels=batch.labels, num_classes=batch.num_classes)


def derive_modality(batch: SkeletonBatch, modality: str, graph: SkeletonGraph) -> SkeletonBatch:
    if modality == "joint":
        return batch
    if modality == "bone":
        return to_bone(batch, graph)
    if modality == "joint_motion":
        return to_motion(batch)
    if modality == "bone_motion":
        return to_motion(to_bone(batch, graph))
    raise ConfigError(f"unknown modality {modality!r}; choose from {MODALITIES}")


def resize_temporal(batch: SkeletonBatch, t_target: int) -> SkeletonBatch:
    """Linear interpolation onto a uniform grid of t_target frames."""
    t = batch.data.shape[2]
    if t_target < 2:
        raise ConfigError("need at least two target frames")
    if t == t_target:
        return SkeletonBatch(data=batch.data.copy(), labels=batch.labels.copy(),
                             num_classes=batch.num_classes)
    pos = np.linspace(0.0, t - 1, t_target)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    w = (pos - lo).astype(batch.data.dtype)
    resized = (batch.data[:, :, lo] * (1 - w[None, None, :, None])
               + batch.data[:, :, hi] * w[None, None, :, None])
    return SkeletonBatch(data=resized, labels=batch.labels.copy(),
                         num_classes=batch.num_classes)


# -- disk round trip ---------------------------------------------------------


def save_dataset(batch: SkeletonBatch, out_dir, class_names=None, generator: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "shape": list(batch.data.shape),
        "num_classes": batch.num_classes,
        "class_names": list(class_names) if class_names is not None else None,
        "generator": generator or {},
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "data.f32"), "wb") as f:
        f.write(np.ascontiguousarray(batch.data, dtype="<f4").tobytes())
    with open(os.path.join(out_dir, "labels.u32"), "wb") as f:
        f.write(np.ascontiguousarray(batch.labels, dtype="<u4").tobytes())


def load_dataset(path) -> tuple[SkeletonBatch, dict]:
    """Load one split directory; validates byte lengths against meta.json."""
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    if meta.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"unrecognized dataset format {meta.get('format')!r}")
    shape = meta["shape"]
    if len(shape) != 4 or shape[1] != 3:
        raise DataFormatError(f"meta shape must be [S,3,T,N], got {shape}")
    s = shape[0]
    with open(os.path.join(path, "data.f32"), "rb") as f:
        data_blob = f.read()
    expected = int(np.prod(shape)) * 4
    if len(data_blob) != expected:
        raise DataFormatError(
            f"data.f32: expected {expected} bytes for shape {shape}, got {len(data_blob)} "
            f"(diverges at offset {min(expected, len(data_blob))})")
    with open(os.path.join(path, "labels.u32"), "rb") as f:
        labels_blob = f.read()
    if len(labels_blob) != s * 4:
        raise DataFormatError(f"labels.u32: expected {s * 4} bytes, got {len(labels_blob)}")
    data = np.frombuffer(data_blob, dtype="<f4").reshape(shape).copy()
    labels = np.frombuffer(labels_blob, dtype="<u4").astype(np.int64)
    batch = SkeletonBatch(data=data, labels=labels, num_classes=int(meta["num_classes"]))
    return batch, meta
