"""Labeled embedding sets and the LEB1 on-disk format.

A set is stored as two files sharing a stem:

``<stem>.leb``
    4-byte magic ``LEB1``, u32 LE row count, u32 LE dim, then row-major LE
    float32 values.
``<stem>.jsonl``
    A header object ``{"dim", "normalized", "attribute_vocab"}`` followed by
    one object per matrix row with keys ``id, modality, concept, attributes,
    counterfactual_of, prompt_text``.

Rows are held in memory as float64. Sets whose header says
``normalized: false`` are L2-normalized at load time.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConsistencyError, DataError, FormatError, IoError, PairingError

MAGIC = b"LEB1"
HEADER = struct.Struct("<4sII")
MODALITIES = ("text", "image")

__all__ = [
    "SampleLabel",
    "LabeledEmbeddingSet",
    "load_set",
    "save_set",
    "pair_counterfactuals",
    "normalize_rows",
    "read_matrix",
    "write_matrix",
    "set_paths",
]


@dataclass(frozen=True)
class SampleLabel:
    id: str
    modality: str
    concept: str
    attributes: Mapping[str, str] = field(default_factory=dict)
    counterfactual_of: str | None = None
    prompt_text: str | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "modality": self.modality,
            "concept": self.concept,
            "attributes": dict(self.attributes),
            "counterfactual_of": self.counterfactual_of,
            "prompt_text": self.prompt_text,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SampleLabel":
        try:
            return cls(
                id=str(obj["id"]),
                modality=obj["modality"],
                concept=obj["concept"],
                attributes=dict(obj.get("attributes") or {}),
                counterfactual_of=obj.get("counterfactual_of"),
                prompt_text=obj.get("prompt_text"),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad label record: {obj!r}") from exc


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Return a float64 copy of ``matrix`` with unit-L2 rows.

    Zero rows raise :class:`DataError`.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot normalize a zero row")
    return matrix / norms


@dataclass(frozen=True)
class LabeledEmbeddingSet:
    """Immutable embedding matrix with per-row labels.

    ``transform`` names the operation that produced non-unit rows on purpose
    (e.g. ``"ba-debias"``); such sets are stored and reloaded verbatim.
    """

    labels: tuple[SampleLabel, ...]
    matrix: np.ndarray
    attribute_vocab: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    normalized: bool = True
    transform: str | None = None

    def __post_init__(self):
        labels = tuple(self.labels)
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        if matrix.ndim != 2:
            raise ConsistencyError("embedding matrix must be 2-D")
        if len(labels) == 0 or matrix.shape[0] == 0:
            raise ConsistencyError("empty embedding sets are not allowed")
        if matrix.shape[0] != len(labels):
            raise ConsistencyError(
                f"{len(labels)} labels for {matrix.shape[0]} matrix rows"
            )
        # derived sets (e.g. after dimension clipping) may shrink to a single dim
        if matrix.shape[1] < (1 if self.transform is not None else 2):
            raise ConsistencyError("embedding dim must be >= 2")
        if not np.all(np.isfinite(matrix)):
            raise DataError("embedding matrix contains NaN or Inf")
        matrix.flags.writeable = False
        vocab = {k: tuple(v) for k, v in dict(self.attribute_vocab).items()}
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "attribute_vocab", vocab)
        self._validate_labels()

    def _validate_labels(self):
        index = {}
        for i, lab in enumerate(self.labels):
            if lab.id in index:
                raise ConsistencyError(f"duplicate id {lab.id!r}")
            index[lab.id] = i
            if lab.modality not in MODALITIES:
                raise ConsistencyError(f"{lab.id}: unknown modality {lab.modality!r}")
            for axis, value in lab.attributes.items():
                allowed = self.attribute_vocab.get(axis)
                if allowed is None or value not in allowed:
                    raise ConsistencyError(
                        f"{lab.id}: attribute {axis}={value!r} not in vocabulary"
                    )
        for lab in self.labels:
            other_id = lab.counterfactual_of
            if other_id is None:
                continue
            if other_id not in index:
                raise ConsistencyError(f"{lab.id}: counterfactual {other_id!r} missing")
            other = self.labels[index[other_id]]
            if other.concept != lab.concept or set(other.attributes) != set(lab.attributes):
                raise ConsistencyError(f"{lab.id}: counterfactual differs in concept/axes")
            if dict(other.attributes) == dict(lab.attributes):
                raise ConsistencyError(f"{lab.id}: counterfactual has identical attributes")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        # data equality; ``normalized``/``transform`` are provenance metadata
        if not isinstance(other, LabeledEmbeddingSet):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.matrix.shape == other.matrix.shape
            and np.array_equal(self.matrix, other.matrix)
            and self.attribute_vocab == other.attribute_vocab
        )

    __hash__ = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def ids(self) -> list[str]:
        return [lab.id for lab in self.labels]

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def row(self, sample_id: str) -> np.ndarray:
        return self.matrix[self._index[sample_id]]

    def modality_mask(self, modality: str) -> np.ndarray:
        return np.array([lab.modality == modality for lab in self.labels])

    def attribute_column(self, axis: str) -> list[str | None]:
        return [lab.attributes.get(axis) for lab in self.labels]

    def select(self, indices: Sequence[int] | np.ndarray) -> "LabeledEmbeddingSet":
        """Subset of rows, preserving labels. Dangling counterfactual links are dropped."""
        indices = np.asarray(indices)
        if indices.dtype == bool:
            indices = np.flatnonzero(indices)
        labels = [self.labels[i] for i in indices]
        keep = {lab.id for lab in labels}
        labels = [
            lab if lab.counterfactual_of in keep or lab.counterfactual_of is None
            else replace(lab, counterfactual_of=None)
            for lab in labels
        ]
        return replace(self, labels=tuple(labels), matrix=self.matrix[indices])

    def with_matrix(self, matrix: np.ndarray, *, normalized: bool | None = None,
                    transform: str | None = None) -> "LabeledEmbeddingSet":
        return replace(
            self,
            matrix=matrix,
            normalized=self.normalized if normalized is None else normalized,
            transform=transform if transform is not None else self.transform,
        )

    def normalized_copy(self) -> "LabeledEmbeddingSet":
        return replace(self, matrix=normalize_rows(self.matrix), normalized=True)


def set_paths(path: str | os.PathLike) -> tuple[Path, Path]:
    """Return ``(matrix_path, manifest_path)`` for a stem or either file."""
    p = Path(path)
    if p.suffix in (".leb", ".jsonl"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".leb"), p.with_name(p.name + ".jsonl")


def write_matrix(fh, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    rows, dim = matrix.shape
    fh.write(HEADER.pack(MAGIC, rows, dim))
    fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_matrix(fh) -> np.ndarray:
    head = fh.read(HEADER.size)
    if len(head) != HEADER.size:
        raise FormatError("truncated matrix header")
    magic, rows, dim = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    nbytes = 4 * rows * dim
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"expected {nbytes} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, dim)


def save_set(emb_set: LabeledEmbeddingSet, path: str | os.PathLike) -> None:
    matrix_path, manifest_path = set_paths(path)
    header = {
        "dim": emb_set.dim,
        "normalized": emb_set.normalized,
        "attribute_vocab": {k: list(v) for k, v in emb_set.attribute_vocab.items()},
    }
    if emb_set.transform is not None:
        header["transform"] = emb_set.transform
    try:
        with open(matrix_path, "wb") as fh:
            write_matrix(fh, emb_set.matrix)
        with open(manifest_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for lab in emb_set.labels:
                fh.write(json.dumps(lab.to_json(), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_set(path: str | os.PathLike) -> LabeledEmbeddingSet:
    matrix_path, manifest_path = set_paths(path)
    try:
        with open(matrix_path, "rb") as fh:
            matrix = read_matrix(fh)
            if fh.read(1):
                raise FormatError("trailing bytes after matrix payload")
        with open(manifest_path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise FormatError("manifest has no header line")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not JSON lines: {exc}") from exc
    if not isinstance(header, dict) or "dim" not in header or "normalized" not in header:
        raise FormatError("manifest header must carry dim and normalized")
    if len(records) == 0 or matrix.shape[0] == 0:
        raise ConsistencyError("empty embedding sets are not allowed")
    if len(records) != matrix.shape[0]:
        raise ConsistencyError(f"{len(records)} labels for {matrix.shape[0]} matrix rows")
    if int(header["dim"]) != matrix.shape[1]:
        raise ConsistencyError(f"header dim {header['dim']} != matrix dim {matrix.shape[1]}")
    if not np.all(np.isfinite(matrix)):
        raise DataError("embedding matrix contains NaN or Inf")
    transform = header.get("transform")
    normalized = bool(header["normalized"])
    if not normalized and transform is None:
        matrix = normalize_rows(matrix)
        normalized = True
    return LabeledEmbeddingSet(
        labels=tuple(SampleLabel.from_json(r) for r in records),
        matrix=matrix,
        attribute_vocab=header.get("attribute_vocab") or {},
        normalized=normalized,
        transform=transform,
    )


def _index_by_key(text_rows):
    by_key = {}
    for i, lab in text_rows:
        by_key.setdefault((lab.concept, tuple(sorted(lab.attributes.items()))), []).append(i)
    return by_key


def pair_counterfactuals(
    emb_set: LabeledEmbeddingSet,
    axes: Iterable[str],
    seed: int | np.random.Generator | None = 0,
) -> dict[str, str]:
    """Map every text row to its counterfactual partner on ``axes``.

    The partner shares concept and every attribute outside ``axes`` and takes a
    different value on *each* axis in ``axes``. When several partners qualify
    (multi-valued axes), one is drawn uniformly with ``seed``; rows are visited
    in set order so the draw is reproducible.
    """
    axes = list(axes)
    if not axes:
        raise PairingError("no attribute axes given")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    text_rows = [(i, lab) for i, lab in enumerate(emb_set.labels) if lab.modality == "text"]
    unlabeled = [lab.id for _, lab in text_rows if any(a not in lab.attributes for a in axes)]
    if unlabeled:
        raise PairingError(f"text rows lack attributes on {axes}", unlabeled)
    by_key = _index_by_key(text_rows)

    mapping: dict[str, str] = {}
    unmatched: list[str] = []
    for _, lab in text_rows:
        pools = []
        for axis in axes:
            vocab = emb_set.attribute_vocab.get(axis, ())
            pools.append([v for v in vocab if v != lab.attributes[axis]])
        found = []
        for combo in product(*pools):
            attrs = dict(lab.attributes)
            attrs.update(zip(axes, combo))
            key = (lab.concept, tuple(sorted(attrs.items())))
            found.extend(by_key.get(key, []))
        if not found:
            unmatched.append(lab.id)
            continue
        pick = found[0] if len(found) == 1 else found[int(rng.integers(len(found)))]
        mapping[lab.id] = emb_set.labels[pick].id
    if unmatched:
        raise PairingError(f"no counterfactual partner for {len(unmatched)} rows", unmatched)
    return mapping
