"""Frozen synthetic vision-language model and prompt-conditioned classification.

The model is a pair of frozen encoders over a toy geometry:

* text side: mean-pool(prompt tokens ++ class token) -> linear map -> tanh
  -> L2 normalization, giving one unit "class weight" vector per class;
* image side: linear map -> L2 normalization, giving a unit image embedding.

Classification is a temperature softmax over cosine similarities between the
image embedding and the class weight vectors.  Only the prompt is ever
trainable; everything else is fixed at construction and reproducible from a
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Temperature",
    "PromptVector",
    "ClassSpace",
    "ProbabilityDistribution",
    "FrozenEncoder",
    "stable_softmax",
    "stable_log_softmax",
    "text_embedding",
    "class_embedding_matrix",
    "image_embedding",
    "classify",
]

DEFAULT_TEMPERATURE = 0.05
DEFAULT_PROMPT_LEN = 16


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Temperature:
    """Softmax temperature for similarity logits; must be positive."""

    value: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not (self.value > 0 and np.isfinite(self.value)):
            raise ValueError(f"temperature must be positive, got {self.value}")


def as_temperature(temp: "Temperature | float") -> Temperature:
    if isinstance(temp, Temperature):
        return temp
    return Temperature(float(temp))


@dataclass(frozen=True, eq=False)
class PromptVector:
    """The learnable prompt: a matrix of token vectors, one row per token."""

    tokens: np.ndarray  # (m, token_dim)

    def __post_init__(self):
        tokens = _readonly(self.tokens)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError("prompt must be a nonempty 2-d token matrix")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("prompt tokens must be finite")
        object.__setattr__(self, "tokens", tokens)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]

    @staticmethod
    def seeded(length: int, token_dim: int, seed: int, scale: float = 0.02) -> "PromptVector":
        rng = np.random.default_rng(seed)
        return PromptVector(rng.normal(0.0, scale, size=(length, token_dim)))


@dataclass(frozen=True)
class ClassSpace:
    """Full label set with its disjoint base/new partition."""

    all_classes: tuple[int, ...]
    base: tuple[int, ...]
    new: tuple[int, ...]

    def __post_init__(self):
        base, new = set(self.base), set(self.new)
        if not base or not new:
            raise ValueError("base and new class sets must both be nonempty")
        if base & new:
            raise ValueError("base and new class sets overlap")
        if base | new != set(self.all_classes):
            raise ValueError("base/new partition does not cover the class space")

    def is_base(self, class_id: int) -> bool:
        return class_id in self._base_set

    @property
    def _base_set(self) -> frozenset:
        # cached lazily; frozen dataclass, so stash via object.__setattr__
        cached = self.__dict__.get("_base_set_cache")
        if cached is None:
            cached = frozenset(self.base)
            object.__setattr__(self, "_base_set_cache", cached)
        return cached


@dataclass(frozen=True, eq=False)
class ProbabilityDistribution:
    """A distribution over an ordered list of class ids."""

    support: tuple[int, ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(int(c) for c in self.support))
        probs = _readonly(self.probs)
        object.__setattr__(self, "probs", probs)
        if len(self.support) != len(set(self.support)):
            raise ValueError("support entries must be unique")
        if probs.shape != (len(self.support),):
            raise ValueError("probs length must match support length")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")

    def prob_of(self, class_id: int) -> float:
        try:
            return float(self.probs[self.support.index(class_id)])
        except ValueError:
            raise KeyError(f"unknown class: {class_id}") from None

    def argmax(self) -> int:
        return self.support[int(np.argmax(self.probs))]

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-np.sum(p * np.log(p)))


@dataclass(frozen=True, eq=False)
class FrozenEncoder:
    """Immutable text/image encoder pair plus per-class tokens.

    ``text_map`` is (embed_dim, token_dim), ``image_map`` is
    (embed_dim, feature_dim), ``class_tokens`` is (n_classes, token_dim).
    The same seed and dimensions always reproduce bit-identical weights.
    """

    token_dim: int
    embed_dim: int
    feature_dim: int
    text_map: np.ndarray
    image_map: np.ndarray
    class_tokens: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "text_map", _readonly(self.text_map))
        object.__setattr__(self, "image_map", _readonly(self.image_map))
        object.__setattr__(self, "class_tokens", _readonly(self.class_tokens))
        if self.text_map.shape != (self.embed_dim, self.token_dim):
            raise ValueError("text_map shape mismatch")
        if self.image_map.shape != (self.embed_dim, self.feature_dim):
            raise ValueError("image_map shape mismatch")
        if self.class_tokens.ndim != 2 or self.class_tokens.shape[1] != self.token_dim:
            raise ValueError("class_tokens shape mismatch")
        for name in ("text_map", "image_map", "class_tokens"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n_classes(self) -> int:
        return self.class_tokens.shape[0]

    def token_of(self, class_id: int) -> np.ndarray:
        if not (0 <= class_id < self.n_classes):
            raise KeyError(f"unknown class: {class_id}")
        return self.class_tokens[class_id]

    @staticmethod
    def random(
        n_classes: int,
        token_dim: int,
        embed_dim: int,
        feature_dim: int,
        seed: int,
    ) -> "FrozenEncoder":
        """Fully random encoder: all weights and tokens are N(0, 1/token_dim)."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(token_dim)
        return FrozenEncoder(
            token_dim=token_dim,
            embed_dim=embed_dim,
            feature_dim=feature_dim,
            text_map=rng.normal(0.0, scale, size=(embed_dim, token_dim)),
            image_map=rng.normal(0.0, scale, size=(embed_dim, feature_dim)),
            class_tokens=rng.normal(0.0, scale, size=(n_classes, token_dim)),
            seed=seed,
        )

    @staticmethod
    def aligned(
        prototypes: np.ndarray,
        token_dim: int,
        embed_dim: int,
        seed: int,
        text_gain: float = 1.2,
        token_noise: float = 0.6,
        prompt_len: int = DEFAULT_PROMPT_LEN,
    ) -> "FrozenEncoder":
        """Encoder behaving like an imperfectly pretrained vision-language model.

        Class tokens are projections of the class feature prototypes into
        token space, and the image map is the composition of that projection
        with the text map.  An image of class c and the text weight of class
        c then share the same pre-activation direction, so a fixed prompt
        already classifies well; a random encoder instead scores at chance.

        ``token_noise`` blends each class token with a random combination of
        the other classes' tokens, the way a real text encoder confuses
        related class names.  A learned prompt can partially undo that
        blending for the classes it is trained on (through the tanh
        curvature), which gives prompt tuning headroom over the fixed-prompt
        baseline while distorting the classes it never saw.  ``text_gain``
        sets the typical magnitude of pre-tanh activations for a prompt of
        ``prompt_len`` tokens, keeping tanh in its curved regime without
        saturating it.
        """
        prototypes = np.asarray(prototypes, dtype=np.float64)
        if prototypes.ndim != 2:
            raise ValueError("prototypes must be a 2-d (n_classes, feature_dim) array")
        n_classes, feature_dim = prototypes.shape
        rng = np.random.default_rng(seed)
        # token projection keeps class tokens near unit norm
        projection = rng.normal(0.0, 1.0 / np.sqrt(token_dim), size=(token_dim, feature_dim))
        gain = text_gain * (prompt_len + 1)
        text_map = rng.normal(0.0, gain / np.sqrt(token_dim), size=(embed_dim, token_dim))
        projected = prototypes @ projection.T
        mixing = rng.normal(0.0, 1.0 / np.sqrt(n_classes - 1), size=(n_classes, n_classes))
        np.fill_diagonal(mixing, 0.0)
        class_tokens = projected + token_noise * (mixing @ projected)
        image_map = text_map @ projection
        return FrozenEncoder(
            token_dim=token_dim,
            embed_dim=embed_dim,
            feature_dim=feature_dim,
            text_map=text_map,
            image_map=image_map,
            class_tokens=class_tokens,
            seed=seed,
        )


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction; safe at small temperatures."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def stable_log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _pooled_tokens(enc: FrozenEncoder, prompt: PromptVector, support) -> np.ndarray:
    """Mean-pool of prompt rows plus class token, one row per support class."""
    if prompt.token_dim != enc.token_dim:
        raise ValueError("prompt token dimension does not match encoder")
    tokens = np.stack([enc.token_of(c) for c in support])
    prompt_sum = prompt.tokens.sum(axis=0)
    return (tokens + prompt_sum) / (prompt.length + 1)


def class_embedding_matrix(enc: FrozenEncoder, prompt: PromptVector, support) -> np.ndarray:
    """Unit text embeddings for every class in ``support``, stacked (n, embed_dim)."""
    support = tuple(support)
    if not support:
        raise ValueError("support must be nonempty")
    pooled = _pooled_tokens(enc, prompt, support)
    activ = np.tanh(pooled @ enc.text_map.T)
    norms = np.linalg.norm(activ, axis=1)
    if np.any(norms <= 0.0):
        raise ValueError("zero-norm embedding")
    return activ / norms[:, None]


def text_embedding(enc: FrozenEncoder, prompt: PromptVector, class_id: int) -> np.ndarray:
    """Unit text embedding of one class under the given prompt."""
    return class_embedding_matrix(enc, prompt, (class_id,))[0]


def image_embedding(enc: FrozenEncoder, feature: np.ndarray) -> np.ndarray:
    """Unit image embedding of a raw feature vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (enc.feature_dim,):
        raise ValueError(
            f"feature dimension {feature.shape} does not match encoder ({enc.feature_dim},)"
        )
    raw = enc.image_map @ feature
    norm = np.linalg.norm(raw)
    if not norm > 0.0:
        raise ValueError("zero-norm embedding")
    return raw / norm


def classify(
    enc: FrozenEncoder,
    prompt: PromptVector,
    support,
    temp: Temperature | float,
    z: np.ndarray,
) -> ProbabilityDistribution:
    """Temperature softmax over cosine similarities between ``z`` and class weights."""
    support = tuple(support)
    tau = as_temperature(temp).value
    weights = class_embedding_matrix(enc, prompt, support)
    probs = stable_softmax(weights @ np.asarray(z, dtype=np.float64) / tau)
    return ProbabilityDistribution(support, probs)
