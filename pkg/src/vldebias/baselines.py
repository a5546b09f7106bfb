"""Comparison debiasers: mutual-information dimension clipping and prompt projection.

``mi_rank``/``clip_apply`` drop the embedding dimensions that share the most
mutual information with an attribute label. ``projection_fit``/``projection_apply``
remove the span of counterfactual prompt differences with an orthogonal
projector (no lambda calibration).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import qr
from scipy.special import xlogy
from scipy.stats import rankdata

from .embed_store import LabeledEmbeddingSet, normalize_rows, read_matrix, write_matrix
from .errors import ConfigError, DegenerateError, DimError, DomainError, FormatError, IoError

__all__ = [
    "ClipDims",
    "BiasProjection",
    "mi_rank",
    "clip_apply",
    "projection_fit",
    "projection_apply",
    "text_prompt_pairs",
    "save_clip_dims",
    "load_clip_dims",
    "save_projection",
    "load_projection",
]

MODALITY_FILTERS = ("text", "image", "both")
RANK_TOL = 1e-10
ZERO_ROW_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ClipDims:
    removed_dims: tuple[int, ...]
    mi_scores: np.ndarray  # indexed by dimension, not by rank

    def __post_init__(self):
        dims = tuple(int(i) for i in self.removed_dims)
        scores = np.asarray(self.mi_scores, dtype=np.float64)
        if len(set(dims)) != len(dims) or any(i < 0 or i >= scores.size for i in dims):
            raise ConfigError("removed_dims must be unique indices below d")
        ranked = scores[list(dims)]
        if np.any(np.diff(ranked) > 0):
            raise ConfigError("removed_dims must be sorted by descending MI")
        object.__setattr__(self, "removed_dims", dims)
        object.__setattr__(self, "mi_scores", scores)

    def __eq__(self, other):
        if not isinstance(other, ClipDims):
            return NotImplemented
        return self.removed_dims == other.removed_dims and np.array_equal(self.mi_scores, other.mi_scores)

    def to_json(self) -> dict:
        return {"removed_dims": list(self.removed_dims), "mi_scores": self.mi_scores.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ClipDims":
        return cls(tuple(obj["removed_dims"]), np.asarray(obj["mi_scores"]))


@dataclass(frozen=True)
class BiasProjection:
    P: np.ndarray
    rank: int = 0  # dimension of the removed subspace

    @property
    def dim(self) -> int:
        return self.P.shape[0]


def _quantile_bins(X: np.ndarray, bins: int) -> np.ndarray:
    """Equal-frequency bin index per entry; ties share the bin of their lowest rank."""
    n = X.shape[0]
    ranks = rankdata(X, method="min", axis=0)
    return np.minimum(((ranks - 1) * bins) // n, bins - 1).astype(np.int64)


def _plugin_mi(binned: np.ndarray, classes: np.ndarray, bins: int, n_classes: int) -> np.ndarray:
    n, d = binned.shape
    cell = (np.arange(d)[None, :] * bins + binned) * n_classes + classes[:, None]
    joint = np.bincount(cell.ravel(), minlength=d * bins * n_classes).reshape(d, bins, n_classes) / n
    px = joint.sum(axis=2, keepdims=True)
    py = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(joint > 0, joint / (px * py), 1.0)
    mi = xlogy(joint, ratio).sum(axis=(1, 2))
    return np.maximum(mi, 0.0)


def mi_rank(emb_set: LabeledEmbeddingSet, axis: str, bins: int = 8) -> ClipDims:
    """Rank dimensions by plug-in MI (nats) with ``axis`` over labeled image rows."""
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    rows = [i for i, lab in enumerate(emb_set.labels)
            if lab.modality == "image" and lab.attributes.get(axis) is not None]
    if not rows:
        raise DomainError(f"no image rows labeled on axis {axis!r}")
    values = [emb_set.labels[i].attributes[axis] for i in rows]
    names, classes = np.unique(values, return_inverse=True)
    if names.size < 2:
        raise DomainError(f"axis {axis!r} has a single class among image rows")
    binned = _quantile_bins(emb_set.matrix[rows], bins)
    scores = _plugin_mi(binned, classes, bins, names.size)
    # stable: equal scores keep ascending dimension order
    order = np.lexsort((np.arange(scores.size), -scores))
    return ClipDims(tuple(int(i) for i in order), scores)


def clip_apply(emb_set: LabeledEmbeddingSet, dims: ClipDims, m: int) -> LabeledEmbeddingSet:
    d = emb_set.dim
    if dims.mi_scores.size != d:
        raise DimError(f"ranking covers {dims.mi_scores.size} dims, set has {d}")
    if m < 0 or m >= d:
        raise ConfigError(f"m must satisfy 0 <= m < d={d}, got {m}")
    if m > len(dims.removed_dims):
        raise ConfigError(f"ranking lists only {len(dims.removed_dims)} dims")
    if m == 0:
        return emb_set  # nothing removed; rows are already unit length
    drop = set(dims.removed_dims[:m])
    keep = [j for j in range(d) if j not in drop]
    return emb_set.with_matrix(normalize_rows(emb_set.matrix[:, keep]), normalized=True,
                               transform=f"clip-{m}")


def projection_fit(prompt_pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> BiasProjection:
    """``P = I - B B^T`` with ``B`` an orthonormal basis of the pair differences."""
    if len(prompt_pairs) == 0:
        raise DegenerateError("at least one prompt pair is required")
    D = np.stack([np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
                  for a, b in prompt_pairs])
    if D.ndim != 2:
        raise DimError("prompt pair members must be vectors")
    d = D.shape[1]
    if not np.any(np.linalg.norm(D, axis=1) > 0):
        raise DegenerateError("every prompt pair difference is zero")
    Q, R, _ = qr(D.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    B = Q[:, :rank]
    P = np.eye(d) - B @ B.T
    return BiasProjection(P=0.5 * (P + P.T), rank=rank)


def projection_apply(emb_set: LabeledEmbeddingSet, projection: BiasProjection,
                     modality_filter: str = "both", *, strict: bool = False,
                     return_flagged: bool = False):
    """Project the selected rows and renormalize them.

    Rows whose projection is (numerically) zero cannot be renormalized. They are
    flagged and keep their original value, or raise DegenerateError when
    ``strict``.
    """
    if modality_filter not in MODALITY_FILTERS:
        raise ConfigError(f"modality_filter must be one of {MODALITY_FILTERS}")
    if projection.dim != emb_set.dim:
        raise DimError(f"projection dim {projection.dim} != set dim {emb_set.dim}")
    X = emb_set.matrix
    if modality_filter == "both":
        selected = np.ones(len(emb_set), dtype=bool)
    else:
        selected = emb_set.modality_mask(modality_filter)
    Y = X @ projection.P
    norms = np.linalg.norm(Y, axis=1)
    degenerate = selected & (norms <= ZERO_ROW_TOL * np.linalg.norm(X, axis=1))
    flagged = [emb_set.labels[i].id for i in np.flatnonzero(degenerate)]
    if flagged and strict:
        raise DegenerateError(f"{len(flagged)} rows project to zero: {flagged[:5]}")
    update = selected & ~degenerate
    out = X.copy()
    out[update] = Y[update] / norms[update, None]
    result = emb_set.with_matrix(out, transform="projection")
    return (result, flagged) if return_flagged else result


def text_prompt_pairs(emb_set: LabeledEmbeddingSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(row, counterfactual row)`` for every linked text row, each unordered pair once."""
    pairs, seen = [], set()
    for i, lab in enumerate(emb_set.labels):
        if lab.modality != "text" or lab.counterfactual_of is None:
            continue
        key = frozenset((lab.id, lab.counterfactual_of))
        if key in seen:
            continue
        seen.add(key)
        pairs.append((emb_set.matrix[i], emb_set.row(lab.counterfactual_of)))
    return pairs


def save_clip_dims(dims: ClipDims, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dims.to_json(), fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_clip_dims(path) -> ClipDims:
    try:
        with open(path, encoding="utf-8") as fh:
            return ClipDims.from_json(json.load(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"bad clip dims file {path}: {exc}") from exc


def save_projection(projection: BiasProjection, path) -> None:
    """JSON descriptor at ``path`` plus the matrix as a float32 LEB1 blob beside it."""
    path = Path(path)
    blob = path.with_suffix(".leb")
    try:
        with open(blob, "wb") as fh:
            write_matrix(fh, projection.P)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"kind": "projection", "dim": projection.dim, "rank": projection.rank,
                       "blob": blob.name}, fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_projection(path) -> BiasProjection:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
        with open(path.with_name(meta["blob"]), "rb") as fh:
            P = read_matrix(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"bad projection file {path}: {exc}") from exc
    if P.shape != (meta["dim"], meta["dim"]):
        raise FormatError("projection blob does not match its descriptor")
    # float32 storage breaks exact idempotency; snap back to the nearest projector
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    keep = V[:, w > 0.5]
    return BiasProjection(P=keep @ keep.T, rank=int(meta["dim"] - keep.shape[1]))
