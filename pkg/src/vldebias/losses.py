"""Training objectives for the bias-alignment network.

* bias alignment: mean KL between the text-bias and image-bias pseudo
  distributions over their frozen queues;
* counterfactual debiasing (text): cross-entropy between the frozen
  text-to-image similarity rows and those of the debiased original or
  counterfactual text, picked by a per-sample coin flip;
* counterfactual debiasing (image): the same for debiased images against the
  frozen text queue.

Every ``loss_*`` taking ``params`` accepts ``grad_scale``; when it is not None
the gradient of ``grad_scale * loss`` w.r.t. the network parameters is added to
``params.grads``. Target rows are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ba_net import BAParams, ba_backward, ba_forward
from .errors import ConfigError, DimError, QueueNotWarmError
from .simcore import EmbeddingQueue, SimilarityConfig, log_softmax, softmax


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


def alternation_draws(seed: int, step: int, n: int) -> np.ndarray:
    """Bernoulli(0.5) draws; 1 keeps the original text, 0 takes its counterfactual."""
    rng = np.random.default_rng([int(seed), int(step), 0xA17])
    return rng.integers(0, 2, size=n).astype(np.int8)


def _warm_keys(queue) -> np.ndarray:
    if isinstance(queue, EmbeddingQueue):
        if not queue.is_full:
            raise QueueNotWarmError(f"queue holds {len(queue)} of {queue.capacity} entries")
        return queue.matrix()
    return np.asarray(queue, dtype=np.float64)


def kl_rows(a_logits: np.ndarray, b_logits: np.ndarray):
    """Row-wise KL(softmax(a) || softmax(b)) and its gradients w.r.t. a and b."""
    log_p = log_softmax(a_logits)
    log_q = log_softmax(b_logits)
    p = np.exp(log_p)
    q = np.exp(log_q)
    r = log_p - log_q
    kl = np.sum(p * r, axis=-1)
    d_a = p * (r - kl[..., None])
    d_b = q - p
    return kl, d_a, d_b


def cross_entropy_rows(target: np.ndarray, logits: np.ndarray):
    """Row-wise ``-sum target * log softmax(logits)`` and its logit gradient."""
    log_q = log_softmax(logits)
    ce = -np.sum(target * log_q, axis=-1)
    return ce, np.exp(log_q) - target


def loss_ba_from_bias(text_bias, image_bias, text_keys, image_keys,
                      cfg: SimilarityConfig = SimilarityConfig()):
    """Mean KL between pseudo distributions; returns ``(loss, d_text_bias, d_image_bias)``."""
    text_bias = np.atleast_2d(np.asarray(text_bias, dtype=np.float64))
    image_bias = np.atleast_2d(np.asarray(image_bias, dtype=np.float64))
    if text_bias.shape != image_bias.shape:
        raise DimError("text and image batches must have equal size")
    text_keys = _warm_keys(text_keys)
    image_keys = _warm_keys(image_keys)
    tau = cfg.temperature
    n = text_bias.shape[0]
    kl, d_a, d_b = kl_rows(text_bias @ text_keys.T / tau, image_bias @ image_keys.T / tau)
    loss = float(np.sum(kl) / n)
    d_text = d_a @ text_keys / (tau * n)
    d_image = d_b @ image_keys / (tau * n)
    return loss, d_text, d_image


def loss_ba(params: BAParams, text_emb, image_emb, text_queue, image_queue,
            cfg: SimilarityConfig = SimilarityConfig(), *, grad_scale: float | None = None) -> float:
    text_keys = _warm_keys(text_queue)
    image_keys = _warm_keys(image_queue)
    phi, cache_t = ba_forward(text_emb, params, return_cache=True)
    psi, cache_v = ba_forward(image_emb, params, return_cache=True)
    loss, d_phi, d_psi = loss_ba_from_bias(phi, psi, text_keys, image_keys, cfg)
    if grad_scale is not None:
        ba_backward(cache_t, grad_scale * d_phi.reshape(phi.shape), params)
        ba_backward(cache_v, grad_scale * d_psi.reshape(psi.shape), params)
    return loss


def _debiased_cross_entropy(params, inputs, targets, keys, cfg, grad_scale):
    tau = cfg.temperature
    bias, cache = ba_forward(inputs, params, return_cache=True)
    neutral = inputs - bias
    ce, d_logits = cross_entropy_rows(targets, neutral @ keys.T / tau)
    n = inputs.shape[0]
    if grad_scale is not None:
        d_neutral = d_logits @ keys / (tau * n)
        # neutral = x - BA(x): upstream into the network is the negated neutral grad
        ba_backward(cache, -grad_scale * d_neutral, params)
    return float(np.sum(ce) / n)


def select_alternation(originals, counterfactuals, betas) -> np.ndarray:
    originals = np.atleast_2d(np.asarray(originals, dtype=np.float64))
    counterfactuals = np.atleast_2d(np.asarray(counterfactuals, dtype=np.float64))
    betas = np.asarray(betas).reshape(-1, 1)
    return np.where(betas == 1, originals, counterfactuals)


def loss_cd_text(params: BAParams, text_emb, counterfactual_emb, betas, image_queue,
                 cfg: SimilarityConfig = SimilarityConfig(), *,
                 grad_scale: float | None = None) -> float:
    image_keys = _warm_keys(image_queue)
    text_emb = np.atleast_2d(np.asarray(text_emb, dtype=np.float64))
    targets = softmax(text_emb @ image_keys.T / cfg.temperature)
    selected = select_alternation(text_emb, counterfactual_emb, betas)
    return _debiased_cross_entropy(params, selected, targets, image_keys, cfg, grad_scale)


def loss_cd_image(params: BAParams, image_emb, text_queue,
                  cfg: SimilarityConfig = SimilarityConfig(), *,
                  grad_scale: float | None = None) -> float:
    text_keys = _warm_keys(text_queue)
    image_emb = np.atleast_2d(np.asarray(image_emb, dtype=np.float64))
    targets = softmax(image_emb @ text_keys.T / cfg.temperature)
    return _debiased_cross_entropy(params, image_emb, targets, text_keys, cfg, grad_scale)


def loss_total(l_cd: float, l_ba: float, weights: LossWeights = LossWeights()) -> float:
    return weights.alpha * l_cd + (1.0 - weights.alpha) * l_ba


def objective(params: BAParams, text_emb, counterfactual_emb, image_emb, betas,
              text_queue, image_queue, cfg: SimilarityConfig = SimilarityConfig(),
              weights: LossWeights = LossWeights(), *, accumulate: bool = True) -> dict:
    """Evaluate every loss term on one batch, optionally accumulating d(total)/d(theta)."""
    alpha = weights.alpha
    cd_scale = 0.5 * alpha if accumulate else None
    ba_scale = (1.0 - alpha) if accumulate else None
    l_ba = loss_ba(params, text_emb, image_emb, text_queue, image_queue, cfg, grad_scale=ba_scale)
    l_cd_t = loss_cd_text(params, text_emb, counterfactual_emb, betas, image_queue, cfg,
                          grad_scale=cd_scale)
    l_cd_v = loss_cd_image(params, image_emb, text_queue, cfg, grad_scale=cd_scale)
    l_cd = 0.5 * (l_cd_t + l_cd_v)
    return {
        "l_ba": l_ba,
        "l_cd_text": l_cd_t,
        "l_cd_image": l_cd_v,
        "l_cd": l_cd,
        "l_total": loss_total(l_cd, l_ba, weights),
    }


def mean_row_entropy(probs: np.ndarray) -> float:
    probs = np.atleast_2d(probs)
    return float(np.mean(-np.sum(probs * np.log(probs), axis=-1)))
