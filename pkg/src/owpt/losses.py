"""Training losses and their analytic gradients with respect to the prompt.

The encoder is frozen, so every loss here is a scalar function of the prompt
token matrix alone.  Gradients are derived by hand through the text pipeline
(mean-pool -> linear -> tanh -> L2 normalize -> cosine logits -> softmax);
because pooling averages the prompt rows, every row receives the same
gradient and the full gradient matrix has identical rows.

Four losses are supported:

* ``CrossEntropyLoss``   mean cross-entropy over the batch;
* ``EntropyLoss``        mean prediction entropy over the batch;
* ``DetectorLoss``       mean cross-entropy on the simulated-base portion
                         plus a hinge keeping the simulated-new mean entropy
                         above the simulated-base mean entropy by a margin;
* ``SubclassifierLoss``  summed cross-entropy on accepted examples plus a
                         summed KL divergence to a fixed reference
                         distribution on the rejected ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    FrozenEncoder,
    PromptVector,
    Temperature,
    as_temperature,
    stable_log_softmax,
)

__all__ = [
    "TrainBatch",
    "CrossEntropyLoss",
    "EntropyLoss",
    "DetectorLoss",
    "SubclassifierLoss",
    "loss_and_gradient",
]


@dataclass(frozen=True, eq=False)
class TrainBatch:
    """A batch of image embeddings with everything a loss may need.

    ``z`` is (batch, embed_dim) of unit image embeddings and ``labels`` holds
    indices INTO ``support`` (not raw class ids).  ``new_mask`` marks the
    portion of the batch treated as simulated-new / rejected; ``ref_log_probs``
    holds fixed reference log-distributions over ``support`` for the KL term
    and may be None when unused.
    """

    z: np.ndarray
    labels: np.ndarray | None
    support: tuple[int, ...]
    temp: Temperature
    new_mask: np.ndarray | None = None
    ref_log_probs: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64))
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "temp", as_temperature(self.temp))
        if self.z.ndim != 2 or self.z.shape[0] == 0:
            raise ValueError("batch must contain at least one example")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.intp)
            if labels.shape != (self.z.shape[0],):
                raise ValueError("labels length must match batch size")
            if labels.size and (labels.min() < 0 or labels.max() >= len(self.support)):
                raise ValueError("labels must index into support")
            object.__setattr__(self, "labels", labels)
        if self.new_mask is not None:
            mask = np.asarray(self.new_mask, dtype=bool)
            if mask.shape != (self.z.shape[0],):
                raise ValueError("new_mask length must match batch size")
            object.__setattr__(self, "new_mask", mask)

    @property
    def size(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class CrossEntropyLoss:
    """Mean cross-entropy of the true labels under the prompt classifier."""


@dataclass(frozen=True)
class EntropyLoss:
    """Mean Shannon entropy of the prediction distributions."""


@dataclass(frozen=True)
class DetectorLoss:
    """Cross-entropy on simulated-base data plus an entropy-margin hinge.

    loss = mean_base CE + max(0, margin + mean_base H - mean_new H).
    The hinge is inactive (and contributes no gradient) once the
    simulated-new mean entropy exceeds the simulated-base one by the margin.
    """

    margin: float = 0.4

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


@dataclass(frozen=True)
class SubclassifierLoss:
    """Weighted CE sum on accepted examples + weighted KL(model, reference) sum.

    The weights let trainers normalize each term by its subset size; raw sums
    (weights of 1) make the step size grow with the subset and overheat the
    prompt, which measurably degrades the trained classifier away from its
    training classes.
    """

    ce_weight: float = 1.0
    kl_weight: float = 1.0


LossSpec = CrossEntropyLoss | EntropyLoss | DetectorLoss | SubclassifierLoss


def _forward(enc: FrozenEncoder, prompt: PromptVector, batch: TrainBatch):
    """Shared forward pass: pooled tokens through the text pipeline to log-probs."""
    tokens = np.stack([enc.token_of(c) for c in batch.support])
    pooled = (tokens + prompt.tokens.sum(axis=0)) / (prompt.length + 1)
    activ = np.tanh(pooled @ enc.text_map.T)  # (n, d) pre-normalization
    norms = np.linalg.norm(activ, axis=1)
    if np.any(norms <= 0.0):
        raise ValueError("zero-norm embedding")
    weights = activ / norms[:, None]  # (n, d) unit class embeddings
    logits = batch.z @ weights.T / batch.temp.value  # (B, n)
    log_probs = stable_log_softmax(logits, axis=1)
    probs = np.exp(log_probs)
    return activ, norms, weights, probs, log_probs


def _backward(
    enc: FrozenEncoder,
    prompt: PromptVector,
    batch: TrainBatch,
    activ: np.ndarray,
    norms: np.ndarray,
    weights: np.ndarray,
    logit_grad: np.ndarray,
) -> np.ndarray:
    """Propagate d(loss)/d(logits) back to the prompt token matrix."""
    upstream = logit_grad.T @ batch.z / batch.temp.value  # (n, d) = d loss / d weights
    # through L2 normalization: remove the radial component, divide by the norm
    radial = np.sum(upstream * weights, axis=1, keepdims=True)
    v = (upstream - radial * weights) / norms[:, None]
    # through tanh, then the linear text map, into pooled token space
    pooled_grad = (v * (1.0 - activ**2)) @ enc.text_map  # (n, token_dim)
    row = pooled_grad.sum(axis=0) / (prompt.length + 1)
    return np.broadcast_to(row, prompt.tokens.shape).copy()


def _entropy_terms(probs: np.ndarray, log_probs: np.ndarray):
    """Per-example entropies and d(entropy)/d(logits)."""
    plogp = probs * log_probs
    entropies = -plogp.sum(axis=1)
    grad = -(plogp + probs * entropies[:, None])
    return entropies, grad


def _split_masks(batch: TrainBatch):
    if batch.new_mask is None:
        raise ValueError("this loss needs a new_mask splitting the batch")
    new = batch.new_mask
    base = ~new
    return base, new


def loss_and_gradient(
    enc: FrozenEncoder,
    prompt: PromptVector,
    batch: TrainBatch,
    spec: LossSpec,
) -> tuple[float, np.ndarray]:
    """Evaluate ``spec`` on ``batch`` and return (loss, d loss / d prompt tokens).

    Raises FloatingPointError("numerical overflow") if the loss fails to be
    finite; softmaxes are always computed with max-subtraction.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_gradient(enc, prompt, batch, spec)


def _loss_and_gradient(enc, prompt, batch, spec):
    activ, norms, weights, probs, log_probs = _forward(enc, prompt, batch)
    n_batch = batch.size

    if isinstance(spec, CrossEntropyLoss):
        if batch.labels is None:
            raise ValueError("cross-entropy needs labels")
        picked = log_probs[np.arange(n_batch), batch.labels]
        loss = -picked.mean()
        logit_grad = probs.copy()
        logit_grad[np.arange(n_batch), batch.labels] -= 1.0
        logit_grad /= n_batch

    elif isinstance(spec, EntropyLoss):
        entropies, ent_grad = _entropy_terms(probs, log_probs)
        loss = entropies.mean()
        logit_grad = ent_grad / n_batch

    elif isinstance(spec, DetectorLoss):
        base, new = _split_masks(batch)
        n_base, n_new = int(base.sum()), int(new.sum())
        if n_base == 0 or n_new == 0:
            raise ValueError("detector batches need both simulated portions")
        if batch.labels is None:
            raise ValueError("detector loss needs labels")
        rows = np.arange(n_batch)
        ce = -log_probs[rows, batch.labels]
        entropies, ent_grad = _entropy_terms(probs, log_probs)
        mean_ce = ce[base].mean()
        ent_base = entropies[base].mean()
        ent_new = entropies[new].mean()
        hinge = spec.margin + ent_base - ent_new
        loss = mean_ce + max(0.0, hinge)

        logit_grad = np.zeros_like(probs)
        ce_grad = probs - np.eye(len(batch.support))[batch.labels]
        logit_grad[base] = ce_grad[base] / n_base
        if hinge > 0.0:
            logit_grad[base] += ent_grad[base] / n_base
            logit_grad[new] -= ent_grad[new] / n_new

    elif isinstance(spec, SubclassifierLoss):
        base, new = _split_masks(batch)
        rows = np.arange(n_batch)
        loss = 0.0
        logit_grad = np.zeros_like(probs)
        if base.any():
            if batch.labels is None:
                raise ValueError("subclassifier loss needs labels")
            loss += spec.ce_weight * -log_probs[rows, batch.labels][base].sum()
            ce_grad = probs - np.eye(len(batch.support))[batch.labels]
            logit_grad[base] = spec.ce_weight * ce_grad[base]
        if new.any():
            if batch.ref_log_probs is None:
                raise ValueError("KL term needs reference log-probabilities")
            diff = log_probs - batch.ref_log_probs  # log p - log q
            kl = (probs * diff).sum(axis=1)
            loss += spec.kl_weight * kl[new].sum()
            if not np.isfinite(loss):
                raise FloatingPointError("numerical overflow")
            logit_grad[new] = spec.kl_weight * (probs * (diff - kl[:, None]))[new]

    else:
        raise TypeError(f"unsupported loss spec: {spec!r}")

    loss = float(loss)
    if not np.isfinite(loss):
        raise FloatingPointError("numerical overflow")
    return loss, _backward(enc, prompt, batch, activ, norms, weights, logit_grad)
