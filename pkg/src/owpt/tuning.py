"""Single-prompt tuning: learn a prompt by SGD on few-shot cross-entropy.

Plain SGD (no momentum, no weight decay) over seeded mini-batch permutations
with a per-epoch cosine learning-rate decay.  Training is deterministic given
the config seed, and the returned classifier is immutable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import LabeledExample
from .losses import CrossEntropyLoss, TrainBatch, loss_and_gradient
from .model import (
    FrozenEncoder,
    ProbabilityDistribution,
    PromptVector,
    Temperature,
    as_temperature,
    class_embedding_matrix,
    image_embedding,
    stable_softmax,
)

__all__ = [
    "TrainConfig",
    "TrainedClassifier",
    "cosine_lr",
    "tune_prompt",
    "pt_predict",
    "save_classifier",
    "load_classifier",
]

PROMPT_INIT_SCALE = 0.02
CHECKPOINT_FORMAT = "owpt-classifier-v1"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every prompt trainer.

    Detector training conventionally runs 50 epochs and classifier training
    100; ``margin`` only matters for the detector loss.  ``lr`` may be zero
    (a no-op trainer), which keeps the initialization reachable in tests.
    """

    epochs: int = 100
    lr: float = 0.002
    batch_size: int = 32
    lr_schedule: str = "cosine"
    seed: int = 0
    margin: float = 0.4
    prompt_len: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.lr_schedule != "cosine":
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @staticmethod
    def for_detector(seed: int, **overrides) -> "TrainConfig":
        return replace(TrainConfig(epochs=50, seed=seed), **overrides)

    @staticmethod
    def for_classifier(seed: int, **overrides) -> "TrainConfig":
        return replace(TrainConfig(epochs=100, seed=seed), **overrides)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay: base_lr at epoch 0, falling toward 0 by the final epoch."""
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


@dataclass(frozen=True, eq=False)
class TrainedClassifier:
    """A tuned prompt bound to the encoder and support it was trained on."""

    prompt: PromptVector
    support: tuple[int, ...]
    loss_history: tuple[float, ...]
    enc: FrozenEncoder
    temp: Temperature = Temperature()

    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "loss_history", tuple(self.loss_history))
        object.__setattr__(self, "temp", as_temperature(self.temp))

    def class_weights(self, support) -> np.ndarray:
        support = tuple(support)
        cached = self._cache.get(support)
        if cached is None:
            cached = class_embedding_matrix(self.enc, self.prompt, support)
            cached.setflags(write=False)
            self._cache[support] = cached
        return cached


def embed_examples(enc: FrozenEncoder, examples) -> np.ndarray:
    """Stacked unit image embeddings of a list of labeled examples."""
    return np.stack([image_embedding(enc, ex.feature) for ex in examples])


def sgd_prompt(
    enc: FrozenEncoder,
    init_tokens: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    make_batches,
    loss_spec,
) -> tuple[PromptVector, tuple[float, ...]]:
    """Generic prompt SGD loop shared by all trainers.

    ``make_batches(rng)`` yields TrainBatch objects for one epoch; the epoch
    loss recorded is the example-weighted mean of the batch losses.
    """
    tokens = init_tokens.copy()
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        total, count = 0.0, 0
        for batch in make_batches(rng):
            try:
                loss, grad = loss_and_gradient(enc, PromptVector(tokens), batch, loss_spec)
            except FloatingPointError:
                raise RuntimeError(f"diverged at epoch {epoch}") from None
            tokens = tokens - lr * grad
            if not np.all(np.isfinite(tokens)):
                raise RuntimeError(f"diverged at epoch {epoch}")
            total += loss * batch.size
            count += batch.size
        history.append(total / count)
    return PromptVector(tokens), tuple(history)


def minibatch_indices(rng: np.random.Generator, n: int, batch_size: int):
    """Seeded permutation chunked into batches; the last short batch is kept."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def tune_prompt(
    enc: FrozenEncoder,
    train: tuple[LabeledExample, ...],
    support,
    cfg: TrainConfig,
    temp: Temperature | float = Temperature(),
) -> TrainedClassifier:
    """Learn a prompt by minimizing mean cross-entropy on the training set."""
    support = tuple(support)
    temp = as_temperature(temp)
    if not train:
        raise ValueError("training set is empty")
    index_of = {c: i for i, c in enumerate(support)}
    if any(ex.label not in index_of for ex in train):
        raise ValueError("training labels must be contained in the support")

    z = embed_examples(enc, train)
    labels = np.array([index_of[ex.label] for ex in train])

    rng = np.random.default_rng(cfg.seed)
    init = rng.normal(0.0, PROMPT_INIT_SCALE, size=(cfg.prompt_len, enc.token_dim))

    def make_batches(rng):
        return [
            TrainBatch(z[idx], labels[idx], support, temp)
            for idx in minibatch_indices(rng, len(train), cfg.batch_size)
        ]

    prompt, history = sgd_prompt(enc, init, cfg, rng, make_batches, CrossEntropyLoss())
    return TrainedClassifier(prompt, support, history, enc, temp)


def pt_predict(clf: TrainedClassifier, support, z: np.ndarray) -> ProbabilityDistribution:
    """Distribution over ``support`` (which may exceed the training support)."""
    support = tuple(support)
    if not support:
        raise ValueError("support must be nonempty")
    weights = clf.class_weights(support)
    probs = stable_softmax(weights @ np.asarray(z, dtype=np.float64) / clf.temp.value)
    return ProbabilityDistribution(support, probs)


def classifier_payload(clf: TrainedClassifier, cfg: TrainConfig | None = None) -> dict:
    """JSON-ready dump of a trained classifier (exact float round-trip)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "support": list(clf.support),
        "prompt": clf.prompt.tokens.tolist(),
        "loss_history": list(clf.loss_history),
        "temperature": clf.temp.value,
    }
    if cfg is not None:
        payload["config"] = asdict(cfg)
    return payload


def classifier_from_payload(payload: dict, enc: FrozenEncoder) -> TrainedClassifier:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a classifier checkpoint")
    return TrainedClassifier(
        PromptVector(np.array(payload["prompt"], dtype=np.float64)),
        tuple(payload["support"]),
        tuple(payload["loss_history"]),
        enc,
        Temperature(payload["temperature"]),
    )


def save_classifier(clf: TrainedClassifier, path, cfg: TrainConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(classifier_payload(clf, cfg), fh, indent=1)
        fh.write("\n")


def load_classifier(path, enc: FrozenEncoder) -> TrainedClassifier:
    with open(path, encoding="utf-8") as fh:
        return classifier_from_payload(json.load(fh), enc)
