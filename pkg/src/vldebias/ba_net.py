"""Shared bias-alignment network and the bias/neutral split it induces.

The network is a two-layer MLP ``W2 @ gelu(W1 @ x + b1) + b2`` applied
identically to text and image embeddings. The output layer starts at zero so a
freshly initialised network removes nothing.

Inputs may be single vectors ``(d,)`` or row batches ``(n, d)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from .embed_store import read_matrix, write_matrix
from .errors import DimError, FormatError, IoError, StateError

ARCH = "mlp2-gelu"
PARAM_NAMES = ("W1", "b1", "W2", "b2")
_CKPT_MAGIC = b"BAM1"
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(z):
    return z * ndtr(z)


def gelu_grad(z):
    return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass
class BAParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        d = self.W1.shape[1]
        if (self.W1.shape != (d, d) or self.W2.shape != (d, d)
                or self.b1.shape != (d,) or self.b2.shape != (d,)):
            raise DimError("parameter shapes inconsistent with a d->d->d network")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES):
            raise ValueError("parameters must be finite")
        self.zero_grad()

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    def zero_grad(self) -> None:
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in PARAM_NAMES}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "BAParams":
        out = BAParams(*(getattr(self, n).copy() for n in PARAM_NAMES))
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def set_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for n in PARAM_NAMES:
            arr = getattr(self, n)
            setattr(self, n, np.asarray(vec[offset:offset + arr.size], dtype=np.float64)
                    .reshape(arr.shape).copy())
            offset += arr.size

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grads[n].ravel() for n in PARAM_NAMES])

    def equals(self, other: "BAParams") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)


def init_params(dim: int, seed: int = 0) -> BAParams:
    """Orthogonal-random first layer, exactly zero output layer."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    return BAParams(W1=q, b1=np.zeros(dim), W2=np.zeros((dim, dim)), b2=np.zeros(dim))


class ForwardCache(NamedTuple):
    x: np.ndarray
    z: np.ndarray
    h: np.ndarray


def _check_dim(x: np.ndarray, params: BAParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise DimError(f"input dim {x.shape[-1]} != network dim {params.dim}")
    return x


def ba_forward(x, params: BAParams, *, return_cache: bool = False):
    x = _check_dim(x, params)
    z = x @ params.W1.T + params.b1
    h = gelu(z)
    out = h @ params.W2.T + params.b2
    if return_cache:
        return out, ForwardCache(x, z, h)
    return out


def ba_backward(cache: ForwardCache | None, upstream, params: BAParams) -> np.ndarray:
    """Accumulate parameter gradients for ``upstream`` and return the input gradient.

    ``upstream`` has the shape of the forward output. Gradients are summed over
    the batch in row order and added to ``params.grads``.
    """
    if cache is None:
        raise StateError("ba_backward needs the cache returned by ba_forward")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.z.shape:
        raise DimError(f"upstream shape {g.shape} != output shape {cache.z.shape}")
    x, z, h = cache.x, cache.z, cache.h
    x2, z2, h2, g2 = (np.atleast_2d(a) for a in (x, z, h, g))
    params.grads["W2"] += g2.T @ h2
    params.grads["b2"] += g2.sum(axis=0)
    dz = (g2 @ params.W2) * gelu_grad(z2)
    params.grads["W1"] += dz.T @ x2
    params.grads["b1"] += dz.sum(axis=0)
    dx = dz @ params.W1
    return dx.reshape(g.shape)


@dataclass(frozen=True)
class BiasDecomposition:
    bias: np.ndarray
    neutral: np.ndarray


def decompose(x, params: BAParams) -> BiasDecomposition:
    x = _check_dim(x, params)
    bias = ba_forward(x, params)
    return BiasDecomposition(bias=bias, neutral=x - bias)


def save_checkpoint(params: BAParams, path, *, seed: int = 0, step: int = 0) -> None:
    """Write ``BAM1`` + u32 header length + JSON header + four LEB1 blobs."""
    header = json.dumps(
        {"dim": params.dim, "arch": ARCH, "seed": int(seed), "step": int(step),
         "params": list(PARAM_NAMES)},
        sort_keys=True,
    ).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC + struct.pack("<I", len(header)) + header)
            for name in PARAM_NAMES:
                write_matrix(fh, getattr(params, name))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[BAParams, dict]:
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != _CKPT_MAGIC:
                raise FormatError("not a bias-alignment checkpoint")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen))
            if header.get("arch") != ARCH:
                raise FormatError(f"unsupported arch {header.get('arch')!r}")
            arrays = {name: read_matrix(fh) for name in PARAM_NAMES}
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    except (struct.error, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    params = BAParams(
        W1=arrays["W1"], b1=arrays["b1"].ravel(), W2=arrays["W2"], b2=arrays["b2"].ravel()
    )
    if params.dim != header["dim"]:
        raise FormatError("checkpoint dim does not match its header")
    return params, header
