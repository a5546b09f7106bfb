"""Optimisation of the bias-alignment network over paired text/image embeddings.

Pairs are formed by matching every image row to the text prompt row with the
same concept and attributes. The text queue holds the prompt embeddings of the
most recently sampled pairs and the image queue their image embeddings; both
are prefilled from the first ``ceil(M / N)`` batches before any loss is
computed, and every step pushes its batch after the parameter update.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .ba_net import PARAM_NAMES, BAParams, ba_forward, init_params
from .embed_store import LabeledEmbeddingSet, pair_counterfactuals
from .errors import ConfigError, DimError, FormatError, PairingError
from .losses import LossWeights, alternation_draws, objective
from .simcore import EmbeddingQueue, SimilarityConfig

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "Adam",
    "train",
    "apply_debias",
    "build_pairs",
    "save_state",
    "load_state",
    "write_history_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    queue_size: int = 256
    alpha: float = 0.5
    temperature: float = 0.01
    learning_rate: float = 1e-4
    steps: int = 2000
    seed: int = 0
    axes: tuple[str, ...] = ("gender",)

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if self.batch_size <= 0 or self.queue_size <= 0:
            raise ConfigError("batch_size and queue_size must be positive")
        if self.batch_size > self.queue_size:
            raise ConfigError(f"batch_size {self.batch_size} exceeds queue_size {self.queue_size}")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not self.axes:
            raise ConfigError("at least one attribute axis is required")
        LossWeights(self.alpha)
        SimilarityConfig(self.temperature)

    def to_json(self) -> dict:
        out = asdict(self)
        out["axes"] = list(self.axes)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: BAParams) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in PARAM_NAMES:
            g = params.grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            setattr(params, name, getattr(params, name) - update)


@dataclass
class TrainState:
    params: BAParams
    optimizer: Adam
    text_queue: EmbeddingQueue
    image_queue: EmbeddingQueue
    step: int = 0
    cursor: int = 0
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


@dataclass
class TrainResult:
    params: BAParams
    history: list[tuple[int, float, float, float]]
    state: TrainState


def build_pairs(dataset: LabeledEmbeddingSet) -> list[tuple[int, int]]:
    """``(text_row, image_row)`` for every image, matched on concept and attributes."""
    prompts: dict[tuple, int] = {}
    for i, lab in enumerate(dataset.labels):
        if lab.modality == "text":
            prompts.setdefault((lab.concept, tuple(sorted(lab.attributes.items()))), i)
    pairs, missing = [], []
    for j, lab in enumerate(dataset.labels):
        if lab.modality != "image":
            continue
        i = prompts.get((lab.concept, tuple(sorted(lab.attributes.items()))))
        if i is None:
            missing.append(lab.id)
        else:
            pairs.append((i, j))
    if missing:
        raise PairingError(f"{len(missing)} images have no matching text prompt", missing)
    if not pairs:
        raise PairingError("dataset contains no text-image pairs")
    return pairs


class _Sampler:
    """Seeded shuffle per epoch without replacement, addressed by a global cursor."""

    def __init__(self, n: int, seed: int):
        self.n, self.seed = n, seed
        self._perms: dict[int, np.ndarray] = {}

    def perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, epoch, 1]).permutation(self.n)}
        return self._perms[epoch]

    def take(self, cursor: int, size: int) -> list[tuple[int, int]]:
        """``(epoch, pair_index)`` for positions ``cursor .. cursor + size - 1``."""
        out = []
        for pos in range(cursor, cursor + size):
            epoch, offset = divmod(pos, self.n)
            out.append((epoch, int(self.perm(epoch)[offset])))
        return out


class _Counterfactuals:
    def __init__(self, dataset: LabeledEmbeddingSet, axes: Sequence[str], seed: int):
        self.dataset, self.axes, self.seed = dataset, list(axes), seed
        self._cache: dict[int, dict[str, str]] = {}
        self.for_epoch(0)  # surface pairing failures before training starts

    def for_epoch(self, epoch: int) -> dict[str, str]:
        if epoch not in self._cache:
            rng = np.random.default_rng([self.seed, epoch, 2])
            self._cache = {epoch: pair_counterfactuals(self.dataset, self.axes, rng)}
        return self._cache[epoch]


def _new_state(dim: int, cfg: TrainConfig) -> TrainState:
    return TrainState(
        params=init_params(dim, cfg.seed),
        optimizer=Adam(cfg.learning_rate),
        text_queue=EmbeddingQueue(cfg.queue_size, dim),
        image_queue=EmbeddingQueue(cfg.queue_size, dim),
    )


def train(dataset: LabeledEmbeddingSet, cfg: TrainConfig, state: TrainState | None = None,
          *, progress=None) -> TrainResult:
    """Train until ``cfg.steps`` optimizer steps have been taken.

    Passing a ``state`` from an earlier run (e.g. via :func:`load_state`)
    continues that run; the continuation is bit-identical to an uninterrupted
    run with the same config.
    """
    pairs = build_pairs(dataset)
    cf = _Counterfactuals(dataset, cfg.axes, cfg.seed)
    sampler = _Sampler(len(pairs), cfg.seed)
    sim_cfg = SimilarityConfig(cfg.temperature)
    weights = LossWeights(cfg.alpha)
    X = dataset.matrix
    ids = dataset.ids
    N = cfg.batch_size

    if state is None:
        state = _new_state(dataset.dim, cfg)
    elif state.params.dim != dataset.dim:
        raise DimError("resumed state does not match dataset dim")

    def push(batch):
        state.text_queue.push([(ids[pairs[k][0]], X[pairs[k][0]]) for _, k in batch])
        state.image_queue.push([(ids[pairs[k][1]], X[pairs[k][1]]) for _, k in batch])

    while not (state.text_queue.is_full and state.image_queue.is_full):
        push(sampler.take(state.cursor, N))
        state.cursor += N

    while state.step < cfg.steps:
        batch = sampler.take(state.cursor, N)
        t_rows = [pairs[k][0] for _, k in batch]
        v_rows = [pairs[k][1] for _, k in batch]
        c_rows = [dataset.index_of(cf.for_epoch(e)[ids[pairs[k][0]]]) for e, k in batch]
        betas = alternation_draws(cfg.seed, state.step, N)

        state.params.zero_grad()
        terms = objective(
            state.params, X[t_rows], X[c_rows], X[v_rows], betas,
            state.text_queue, state.image_queue, sim_cfg, weights,
        )
        state.optimizer.step(state.params)
        push(batch)
        state.cursor += N
        state.history.append((state.step, terms["l_ba"], terms["l_cd"], terms["l_total"]))
        state.step += 1
        if progress is not None:
            progress(state.step, terms)

    return TrainResult(params=state.params, history=list(state.history), state=state)


def apply_debias(emb_set: LabeledEmbeddingSet, params: BAParams) -> LabeledEmbeddingSet:
    """Replace every row by its neutral part ``x - BA(x)``; rows are not renormalized."""
    if emb_set.dim != params.dim:
        raise DimError(f"set dim {emb_set.dim} != network dim {params.dim}")
    X = emb_set.matrix
    return emb_set.with_matrix(X - ba_forward(X, params), transform="ba-debias")


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "l_ba", "l_cd", "l_total"])
        for step, l_ba, l_cd, l_total in history:
            w.writerow([step, repr(float(l_ba)), repr(float(l_cd)), repr(float(l_total))])


def save_state(state: TrainState, cfg: TrainConfig, path) -> None:
    """Full-precision snapshot (npz) of everything a continuation needs."""
    tq_ids, tq = state.text_queue.state()
    iq_ids, iq = state.image_queue.state()
    arrays = {f"param_{n}": getattr(state.params, n) for n in PARAM_NAMES}
    for n in PARAM_NAMES:
        if n in state.optimizer.m:
            arrays[f"adam_m_{n}"] = state.optimizer.m[n]
            arrays[f"adam_v_{n}"] = state.optimizer.v[n]
    arrays["text_queue"] = tq
    arrays["image_queue"] = iq
    arrays["history"] = np.array(state.history, dtype=np.float64).reshape(-1, 4)
    meta = {
        "config": cfg.to_json(),
        "step": state.step,
        "cursor": state.cursor,
        "adam_t": state.optimizer.t,
        "text_queue_ids": tq_ids,
        "image_queue_ids": iq_ids,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_state(path) -> tuple[TrainState, TrainConfig]:
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read train state {path}: {exc}") from exc
    meta = json.loads(arrays["meta"].tobytes().decode())
    cfg = TrainConfig.from_json(meta["config"])
    params = BAParams(*(arrays[f"param_{n}"] for n in PARAM_NAMES))
    opt = Adam(cfg.learning_rate)
    opt.t = int(meta["adam_t"])
    for n in PARAM_NAMES:
        if f"adam_m_{n}" in arrays:
            opt.m[n] = arrays[f"adam_m_{n}"].copy()
            opt.v[n] = arrays[f"adam_v_{n}"].copy()
    history = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in arrays["history"]]
    state = TrainState(
        params=params,
        optimizer=opt,
        text_queue=EmbeddingQueue.from_state(cfg.queue_size, meta["text_queue_ids"], arrays["text_queue"]),
        image_queue=EmbeddingQueue.from_state(cfg.queue_size, meta["image_queue_ids"], arrays["image_queue"]),
        step=int(meta["step"]),
        cursor=int(meta["cursor"]),
        history=history,
    )
    return state, cfg


def warmup_batches(cfg: TrainConfig) -> int:
    return math.ceil(cfg.queue_size / cfg.batch_size)
