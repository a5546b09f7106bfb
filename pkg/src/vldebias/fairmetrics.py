"""Fairness and vision-language alignment metrics.

Rankings are by inner product, descending, ties broken by ascending id. Logs
are natural; zero proportions are floored at ``EPS`` inside skew and KL terms.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .embed_store import LabeledEmbeddingSet
from .errors import ConfigError, DegenerateError, DomainError, LabelError

EPS = 1e-12


@dataclass(frozen=True)
class RetrievalRun:
    query_id: str
    retrieved: tuple[str, ...]
    scores: tuple[float, ...]
    values: tuple[str | None, ...]
    axis: str
    desired: Mapping[str, float]

    def __post_init__(self):
        if len(set(self.retrieved)) != len(self.retrieved):
            raise ValueError("duplicate retrieved ids")
        if any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")
        if abs(sum(self.desired.values()) - 1.0) > 1e-9:
            raise ValueError("desired distribution must sum to 1")


def uniform_desired(values: Sequence[str]) -> dict[str, float]:
    return {v: 1.0 / len(values) for v in values}


def rank_order(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending id."""
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return np.lexsort((id_rank, -np.asarray(scores, dtype=np.float64)))


def _prefix_counts(run: RetrievalRun, k: int) -> tuple[list[str], np.ndarray]:
    if k < 1 or k > len(run.retrieved):
        raise ConfigError(f"k={k} outside 1..{len(run.retrieved)}")
    values = list(run.desired)
    pos = {v: i for i, v in enumerate(values)}
    onehot = np.zeros((k, len(values)))
    for i, (rid, val) in enumerate(zip(run.retrieved[:k], run.values[:k])):
        if val is None or val not in pos:
            raise LabelError(f"retrieved id {rid!r} has no {run.axis} label in the desired vocabulary")
        onehot[i, pos[val]] = 1.0
    return values, np.cumsum(onehot, axis=0)


def maxskew_at_k(run: RetrievalRun, k: int) -> float:
    values, counts = _prefix_counts(run, k)
    observed = counts[-1] / k
    desired = np.array([run.desired[v] for v in values])
    return float(np.max(np.log(np.maximum(observed, EPS) / np.maximum(desired, EPS))))


def ndkl_at_k(run: RetrievalRun, k: int) -> float:
    values, counts = _prefix_counts(run, k)
    desired = np.maximum(np.array([run.desired[v] for v in values]), EPS)
    total = 0.0
    norm = 0.0
    for i in range(1, k + 1):
        p = counts[i - 1] / i
        nz = p > 0
        kl = float(np.sum(p[nz] * np.log(p[nz] / desired[nz])))
        w = 1.0 / math.log2(i + 1)
        total += w * kl
        norm += w
    return total / norm


def retrieval_runs(queries: LabeledEmbeddingSet, gallery: LabeledEmbeddingSet, axis: str,
                   k: int, desired: Mapping[str, float] | None = None) -> list[RetrievalRun]:
    """Rank ``gallery`` for every query row and keep the top ``k``."""
    if axis not in gallery.attribute_vocab:
        raise LabelError(f"gallery has no vocabulary for axis {axis!r}")
    desired = dict(desired) if desired is not None else uniform_desired(gallery.attribute_vocab[axis])
    if k > len(gallery):
        raise ConfigError(f"k={k} exceeds gallery size {len(gallery)}")
    scores = queries.matrix @ gallery.matrix.T
    gids = gallery.ids
    gvals = gallery.attribute_column(axis)
    runs = []
    for qi, qid in enumerate(queries.ids):
        order = rank_order(scores[qi], gids)[:k]
        runs.append(RetrievalRun(
            query_id=qid,
            retrieved=tuple(gids[j] for j in order),
            scores=tuple(float(scores[qi, j]) for j in order),
            values=tuple(gvals[j] for j in order),
            axis=axis,
            desired=desired,
        ))
    return runs


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def mean_maxskew(runs: Sequence[RetrievalRun], k: int, threads: int = 1) -> tuple[float, list[float]]:
    per = _parallel_map(lambda r: maxskew_at_k(r, k), runs, threads)
    return float(math.fsum(per) / len(per)), per


def mean_ndkl(runs: Sequence[RetrievalRun], k: int, threads: int = 1) -> tuple[float, list[float]]:
    per = _parallel_map(lambda r: ndkl_at_k(r, k), runs, threads)
    return float(math.fsum(per) / len(per)), per


def recall_at_k(queries: np.ndarray, gallery: np.ndarray, ground_truth: Mapping[str, set],
                k: int, query_ids: Sequence[str], gallery_ids: Sequence[str]) -> float:
    """Percentage of queries whose top ``k`` gallery items include a relevant id."""
    queries = np.atleast_2d(queries)
    scores = queries @ np.asarray(gallery).T
    hits = 0
    for qi, qid in enumerate(query_ids):
        relevant = ground_truth.get(qid)
        if not relevant:
            raise LabelError(f"query {qid!r} has no ground truth")
        top = rank_order(scores[qi], gallery_ids)[:k]
        hits += any(gallery_ids[j] in relevant for j in top)
    return 100.0 * hits / len(query_ids)


def concept_recall_at_k(queries: LabeledEmbeddingSet, gallery: LabeledEmbeddingSet, k: int) -> float:
    """Recall@k where every gallery row sharing the query's concept is relevant."""
    by_concept: dict[str, set] = {}
    for lab in gallery.labels:
        by_concept.setdefault(lab.concept, set()).add(lab.id)
    gt = {lab.id: by_concept.get(lab.concept, set()) for lab in queries.labels}
    return recall_at_k(queries.matrix, gallery.matrix, gt, k, queries.ids, gallery.ids)


def zeroshot_acc(images: np.ndarray, labels: Sequence[int], class_texts: np.ndarray,
                 ks: Sequence[int] = (1, 5)) -> tuple[float, ...]:
    """Top-k accuracies (percent) of argmax-inner-product classification."""
    class_texts = np.atleast_2d(class_texts)
    n_classes = class_texts.shape[0]
    if max(ks) > n_classes:
        raise ConfigError(f"top-{max(ks)} accuracy needs at least {max(ks)} classes, got {n_classes}")
    scores = np.atleast_2d(images) @ class_texts.T
    labels = np.asarray(labels)
    # stable sort on negated scores: ties go to the lower class index
    order = np.argsort(-scores, axis=1, kind="stable")
    out = []
    for k in ks:
        out.append(100.0 * float(np.mean(np.any(order[:, :k] == labels[:, None], axis=1))))
    return tuple(out)


def concept_zeroshot(images: LabeledEmbeddingSet, class_prompts: LabeledEmbeddingSet,
                     ks: Sequence[int] = (1, 5)) -> tuple[float, ...]:
    names = [lab.concept for lab in class_prompts.labels]
    index = {n: i for i, n in enumerate(names)}
    try:
        labels = [index[lab.concept] for lab in images.labels]
    except KeyError as exc:
        raise LabelError(f"image concept {exc} has no class prompt") from exc
    return zeroshot_acc(images.matrix, labels, class_prompts.matrix, ks)


def able(top1_acc: float, maxskew: float) -> float:
    """Harmonic mean of accuracy (fraction) and exp(-MaxSkew), as a percentage."""
    if not 0.0 < top1_acc <= 1.0:
        raise DomainError(f"accuracy must lie in (0, 1], got {top1_acc}")
    if maxskew < 0:
        raise DomainError(f"MaxSkew must be non-negative, got {maxskew}")
    return 100.0 * 2.0 / (1.0 / top1_acc + 1.0 / math.exp(-maxskew))


@dataclass(frozen=True)
class AssociationTest:
    effect_size: float
    p_value: float
    n_permutations: int
    exact: bool
    sizes: tuple[int, int, int, int]


def _unit(m) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[0] == 0:
        raise DomainError("association sets must be non-empty")
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def association_scores(W, A, B) -> np.ndarray:
    """``mean_a cos(w, a) - mean_b cos(w, b)`` for every row ``w``."""
    W, A, B = _unit(W), _unit(A), _unit(B)
    return (W @ A.T).mean(axis=1) - (W @ B.T).mean(axis=1)


def effect_size(X, Y, A, B, n_permutations: int = 10_000, seed: int = 0) -> AssociationTest:
    """Standardised differential association with a one-sided permutation p-value.

    The p-value is the fraction of equal-size repartitions of ``X u Y`` whose
    mean difference is at least the observed one. All partitions are enumerated
    when there are at most ``n_permutations`` of them; otherwise that many are
    sampled with ``seed``.
    """
    X, Y = _unit(X), _unit(Y)
    s = association_scores(np.vstack([X, Y]), A, B)
    nx, n = X.shape[0], X.shape[0] + Y.shape[0]
    std = float(np.std(s))
    if std <= 1e-15 * max(1.0, float(np.max(np.abs(s)))):
        raise DegenerateError("association scores have zero variance")
    total = float(np.sum(s))

    def stats(sum_x):
        return sum_x / nx - (total - sum_x) / (n - nx)

    observed = stats(float(np.sum(s[:nx])))
    d = observed / std

    n_partitions = math.comb(n, nx)
    exact = n_partitions <= n_permutations
    tol = 1e-12 * max(1.0, abs(observed))
    hits = 0
    if exact:
        count = n_partitions
        chunk = []
        for combo in combinations(range(n), nx):
            chunk.append(combo)
            if len(chunk) == 4096:
                hits += int(np.sum(stats(s[np.array(chunk)].sum(axis=1)) >= observed - tol))
                chunk = []
        if chunk:
            hits += int(np.sum(stats(s[np.array(chunk)].sum(axis=1)) >= observed - tol))
    else:
        count = n_permutations
        rng = np.random.default_rng(seed)
        done = 0
        while done < count:
            size = min(4096, count - done)
            idx = np.argsort(rng.random((size, n)), axis=1)[:, :nx]
            hits += int(np.sum(stats(s[idx].sum(axis=1)) >= observed - tol))
            done += size
    return AssociationTest(
        effect_size=float(d),
        p_value=hits / count,
        n_permutations=count,
        exact=exact,
        sizes=(nx, n - nx, np.atleast_2d(A).shape[0], np.atleast_2d(B).shape[0]),
    )


@dataclass
class FairnessReport:
    """Metrics for one method; ``fairness`` maps a dataset name to (MS, NDKL)."""

    method: str = "original"
    k: int = 100
    fairness: dict[str, tuple[float, float]] = field(default_factory=dict)
    top1: float | None = None
    top5: float | None = None
    recall_tr: float | None = None
    recall_ir: float | None = None
    able: float | None = None
    effect_sizes: dict[str, dict] = field(default_factory=dict)
    per_query: dict[str, list[dict]] = field(default_factory=dict)

    def in_domain_maxskew(self) -> float:
        return next(iter(self.fairness.values()))[0]

    def fill_able(self) -> None:
        if self.top1 is not None and self.fairness:
            self.able = able(self.top1 / 100.0, self.in_domain_maxskew())

    def to_json(self) -> dict:
        out = asdict(self)
        out["fairness"] = {k: {"MS": v[0], "NDKL": v[1]} for k, v in self.fairness.items()}
        return out

    def csv_columns(self) -> list[tuple[str, object]]:
        cols: list[tuple[str, object]] = [("Method", self.method)]
        for name, (ms, ndkl) in self.fairness.items():
            cols += [(f"{name} MS", ms), (f"{name} NDKL", ndkl)]
        cols += [("Top-1", self.top1), ("Top-5", self.top5), ("TR", self.recall_tr),
                 ("IR", self.recall_ir), ("ABLE", self.able)]
        return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def reports_to_csv(reports: Sequence[FairnessReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [name for name, _ in reports[0].csv_columns()]
    w.writerow(header)
    for rep in reports:
        w.writerow([_fmt(v) for _, v in rep.csv_columns()])
    return buf.getvalue()


def reports_to_json(reports: Sequence[FairnessReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"


def evaluate(queries: LabeledEmbeddingSet, gallery: LabeledEmbeddingSet,
             prompts: LabeledEmbeddingSet, axes: Sequence[str], k: int = 100,
             method: str = "original", recall_k: int = 5, threads: int = 1) -> FairnessReport:
    """Full report for concept-labelled sets.

    * fairness: neutral ``queries`` retrieving from ``gallery``, one entry per axis;
    * IR: ``queries`` to ``gallery``, TR: ``gallery`` to ``prompts``, relevance by concept;
    * zero-shot: ``gallery`` classified among ``queries`` (one prompt per concept).
    """
    rep = FairnessReport(method=method, k=k)
    for axis in axes:
        runs = retrieval_runs(queries, gallery, axis, k)
        ms, ms_per = mean_maxskew(runs, k, threads)
        nd, nd_per = mean_ndkl(runs, k, threads)
        rep.fairness[axis] = (ms, nd)
        rep.per_query[axis] = [
            {"query": r.query_id, "maxskew": a, "ndkl": b} for r, a, b in zip(runs, ms_per, nd_per)
        ]
    rep.recall_ir = concept_recall_at_k(queries, gallery, recall_k)
    rep.recall_tr = concept_recall_at_k(gallery, prompts, recall_k)
    ks = (1, 5) if len(queries) >= 5 else (1,)
    accs = concept_zeroshot(gallery, queries, ks)
    rep.top1 = accs[0]
    rep.top5 = accs[1] if len(accs) > 1 else None
    rep.fill_able()
    return rep
