"""Frozen text-feature banks standing in for a pretrained text encoder.

A bank maps (class, contrast slot, variant) to a unit-norm embedding row.
Variants exist because one class can own several equivalent texts (synonym
lists); training samples among them uniformly.  Any callable text -> vector
works as an embedder; the shipped one is a deterministic hashed bag-of-words
so the whole pipeline runs without pretrained weights.  Banks built from
real encoders can be injected through the same bank.json/bank.f32 files.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import (BankLookupError, ConfigError, CorpusError,
                     DataFormatError, DegenerateFeatureError)
from .graph import PartPartition

_TOKEN_RE = re.compile(r"[a-z0-9]+")

PROMPT_TYPES = ("label_name", "synonym", "paragraph", "body_parts", "synonym_plus_parts")


@dataclass
class ClassDescription:
    class_id: int
    label_name: str
    paragraph: str
    synonyms: list[str]
    part_descriptions: dict[str, str]


@dataclass
class DescriptionCorpus:
    classes: list[ClassDescription]

    def __post_init__(self):
        ids = sorted(c.class_id for c in self.classes)
        if ids != list(range(len(self.classes))):
            raise CorpusError(f"class ids must be dense 0..C-1, got {ids}")
        self.classes = sorted(self.classes, key=lambda c: c.class_id)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def label_names(self) -> list[str]:
        return [c.label_name for c in self.classes]

    def save(self, path):
        doc = {"classes": [{
            "class_id": c.class_id,
            "label_name": c.label_name,
            "paragraph": c.paragraph,
            "synonyms": c.synonyms,
            "part_descriptions": c.part_descriptions,
        } for c in self.classes]}
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DescriptionCorpus":
        with open(path) as f:
            doc = json.load(f)
        try:
            classes = [ClassDescription(
                class_id=int(c["class_id"]), label_name=c["label_name"],
                paragraph=c.get("paragraph", ""), synonyms=list(c.get("synonyms", [])),
                part_descriptions=dict(c.get("part_descriptions", {})),
            ) for c in doc["classes"]]
        except KeyError as exc:
            raise CorpusError(f"corpus JSON missing field {exc}") from None
        return cls(classes)


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{token}".encode(), digest_size=16).digest()
    words = np.frombuffer(digest, dtype="<u4")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(w) for w in words]))
    return rng.standard_normal(dim)


def hashed_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-words embedding: sum of hashed token vectors.

    Tokens are lowercase alphanumeric runs; each token seeds a fixed signed
    pseudo-random direction.  The sum is L2-normalized; empty text maps to
    the first basis vector.
    """
    if dim < 8:
        raise ConfigError(f"embedding dim must be >= 8, got {dim}")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        v = np.zeros(dim)
        v[0] = 1.0
        return v
    acc = np.zeros(dim)
    for tok in tokens:
        acc += _token_vector(tok, dim, seed)
    return acc / np.linalg.norm(acc)


class HashedEmbedder:
    """hashed_embed with a fixed dimension and hashing namespace seed."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim, self.seed = dim, seed

    def __call__(self, text: str) -> np.ndarray:
        return hashed_embed(text, self.dim, self.seed)


@dataclass
class TextFeatureBank:
    """Unit-norm fp32 rows keyed by (class_id, slot_id); variants as lists."""

    dim: int
    entries: dict[tuple[int, int], list[np.ndarray]]
    class_names: list[str] | None = None
    slot_names: list[str] | None = None

    @property
    def num_classes(self) -> int:
        return 1 + max(c for c, _ in self.entries)

    @property
    def num_slots(self) -> int:
        return 1 + max(s for _, s in self.entries)

    def variants(self, class_id: int, slot_id: int) -> list[np.ndarray]:
        try:
            return self.entries[(class_id, slot_id)]
        except KeyError:
            raise BankLookupError(f"no entry for class {class_id}, slot {slot_id}") from None


def sample_variant(bank: TextFeatureBank, class_id: int, slot_id: int, rng) -> np.ndarray:
    """Uniform choice among the variants of one (class, slot) entry."""
    variants = bank.variants(class_id, slot_id)
    return variants[int(rng.integers(len(variants)))]


def _unit_f32(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        raise DegenerateFeatureError("embedder produced a zero vector")
    return (vec / norm).astype("<f4")


def build_bank(corpus: DescriptionCorpus, partition: PartPartition,
               prompt_type: str, embedder, dim: int | None = None) -> TextFeatureBank:
    """Embed corpus texts into one bank laid out for the given partition.

    Slot order: one slot per partition group, then (when the partition
    carries a global slot) one global slot.  Texts per prompt type:

    - label_name / paragraph: that single text in every slot;
    - synonym: every synonym as a variant, shared by all slots;
    - body_parts: slot k gets its part's description; the global slot gets
      all part descriptions joined;
    - synonym_plus_parts: part slots as in body_parts, global slot gets the
      synonym variants.
    """
    if prompt_type not in PROMPT_TYPES:
        raise ConfigError(f"unknown prompt type {prompt_type!r}; choose from {PROMPT_TYPES}")
    if dim is None:
        dim = len(np.asarray(embedder("probe")))
    slot_names = list(partition.group_names)
    if partition.include_global:
        slot_names.append("global")

    def part_text(cls: ClassDescription, part_name: str) -> str:
        try:
            return cls.part_descriptions[part_name]
        except KeyError:
            raise CorpusError(
                f"class {cls.class_id} ({cls.label_name!r}) has no description "
                f"for part {part_name!r}") from None

    entries: dict[tuple[int, int], list[np.ndarray]] = {}
    for cls in corpus.classes:
        for slot_id, slot_name in enumerate(slot_names):
            is_global = partition.include_global and slot_id == len(slot_names) - 1
            if prompt_type == "label_name":
                texts = [cls.label_name]
            elif prompt_type == "paragraph":
                texts = [cls.paragraph]
            elif prompt_type == "synonym":
                texts = list(cls.synonyms)
            elif prompt_type == "body_parts":
                if is_global:
                    texts = ["; ".join(part_text(cls, n) for n in partition.group_names)]
                else:
                    texts = [part_text(cls, slot_name)]
            else:  # synonym_plus_parts
                texts = list(cls.synonyms) if is_global else [part_text(cls, slot_name)]
            if not texts:
                raise CorpusError(f"class {cls.class_id} has no text for prompt {prompt_type!r}")
            entries[(cls.class_id, slot_id)] = [_unit_f32(embedder(t)) for t in texts]
    return TextFeatureBank(dim=dim, entries=entries,
                           class_names=corpus.label_names(), slot_names=slot_names)


def knn_select(query_text: str, candidate_texts, k: int, embedder) -> list[int]:
    """Indices of the k candidates most cosine-similar to the query.

    Ties break toward the lower index.  Useful for picking the description
    snippets closest to an action name in embedding space.
    """
    candidates = list(candidate_texts)
    if not candidates:
        raise ConfigError("empty candidate list")
    if k > len(candidates):
        raise ConfigError(f"k={k} exceeds {len(candidates)} candidates")
    q = np.asarray(embedder(query_text), dtype=np.float64)
    q = q / np.linalg.norm(q)
    sims = np.empty(len(candidates))
    for i, text in enumerate(candidates):
        v = np.asarray(embedder(text), dtype=np.float64)
        sims[i] = (q @ v) / np.linalg.norm(v)
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:k]]


# -- bank serialization: bank.json index + bank.f32 rows -------------------


def save_bank(bank: TextFeatureBank, out_dir):
    """Write bank.json plus bank.f32; offset is the row index into the f32 file."""
    os.makedirs(out_dir, exist_ok=True)
    index = []
    rows = []
    for (class_id, slot_id) in sorted(bank.entries):
        for variant_id, vec in enumerate(bank.entries[(class_id, slot_id)]):
            index.append({"class": class_id, "slot": slot_id,
                          "variant": variant_id, "offset": len(rows)})
            rows.append(np.ascontiguousarray(vec, dtype="<f4"))
    doc = {"dim": bank.dim, "entries": index}
    if bank.class_names is not None:
        doc["class_names"] = bank.class_names
    if bank.slot_names is not None:
        doc["slot_names"] = bank.slot_names
    with open(os.path.join(out_dir, "bank.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "bank.f32"), "wb") as f:
        f.write(b"".join(r.tobytes() for r in rows))


def load_bank(path) -> TextFeatureBank:
    if os.path.isdir(path):
        json_path = os.path.join(path, "bank.json")
    else:
        json_path = path
    with open(json_path) as f:
        doc = json.load(f)
    dim = int(doc["dim"])
    with open(os.path.join(os.path.dirname(json_path), "bank.f32"), "rb") as f:
        blob = f.read()
    row_bytes = dim * 4
    if len(blob) % row_bytes != 0:
        raise DataFormatError(f"bank.f32 length {len(blob)} is not a multiple of row size {row_bytes}")
    num_rows = len(blob) // row_bytes
    entries: dict[tuple[int, int], list[np.ndarray]] = {}
    for e in doc["entries"]:
        offset = int(e["offset"])
        if offset >= num_rows:
            raise DataFormatError(f"entry offset {offset} beyond {num_rows} rows in bank.f32")
        vec = np.frombuffer(blob[offset * row_bytes:(offset + 1) * row_bytes], dtype="<f4")
        key = (int(e["class"]), int(e["slot"]))
        entries.setdefault(key, [])
        variant = int(e["variant"])
        if variant != len(entries[key]):
            raise DataFormatError(f"variants of class {key[0]} slot {key[1]} are not contiguous")
        entries[key].append(vec)
    return TextFeatureBank(dim=dim, entries=entries,
                           class_names=doc.get("class_names"),
                           slot_names=doc.get("slot_names"))
