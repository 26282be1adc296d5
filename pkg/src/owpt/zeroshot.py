"""Zero-shot classification with fixed prompts and its space-level scores.

The zero-shot model never trains anything: it holds one or more fixed
prompts, averages their per-class text embeddings (then renormalizes), and
classifies with the usual temperature softmax.  On top of that it exposes the
two base-vs-new quantities used for routing and analysis: the
maximum-softmax-probability score of each subspace and the probability mass
of each subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ClassSpace,
    FrozenEncoder,
    ProbabilityDistribution,
    PromptVector,
    Temperature,
    as_temperature,
    class_embedding_matrix,
    stable_softmax,
)

__all__ = ["ZeroShotModel", "zs_predict", "msp_space_scores", "mass_space_probability"]

DEFAULT_ENSEMBLE_SIZE = 4
DEFAULT_PROMPT_SCALE = 0.02


@dataclass(frozen=True, eq=False)
class ZeroShotModel:
    """Frozen encoder plus one or more fixed prompts (an ensemble of one is fine)."""

    enc: FrozenEncoder
    fixed_prompts: tuple[PromptVector, ...]
    temp: Temperature = Temperature()

    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "fixed_prompts", tuple(self.fixed_prompts))
        object.__setattr__(self, "temp", as_temperature(self.temp))
        if not self.fixed_prompts:
            raise ValueError("need at least one fixed prompt")

    @staticmethod
    def seeded(
        enc: FrozenEncoder,
        seed: int,
        n_prompts: int = DEFAULT_ENSEMBLE_SIZE,
        prompt_len: int = 16,
        scale: float = DEFAULT_PROMPT_SCALE,
        temp: Temperature | float = Temperature(),
    ) -> "ZeroShotModel":
        """Ensemble of seeded random prompts standing in for hand-written templates."""
        prompts = tuple(
            PromptVector.seeded(prompt_len, enc.token_dim, seed + i, scale)
            for i in range(n_prompts)
        )
        return ZeroShotModel(enc, prompts, as_temperature(temp))

    def class_weights(self, support) -> np.ndarray:
        """Averaged-then-renormalized unit embeddings for ``support`` (cached)."""
        support = tuple(support)
        cached = self._cache.get(support)
        if cached is not None:
            return cached
        stacked = np.stack(
            [class_embedding_matrix(self.enc, p, support) for p in self.fixed_prompts]
        )
        mean = stacked.mean(axis=0)
        norms = np.linalg.norm(mean, axis=1)
        if np.any(norms <= 0.0):
            raise ValueError("zero-norm embedding")
        weights = mean / norms[:, None]
        weights.setflags(write=False)
        self._cache[support] = weights
        return weights


def zs_predict(model: ZeroShotModel, support, z: np.ndarray) -> ProbabilityDistribution:
    """Ensemble zero-shot distribution over ``support`` for one image embedding."""
    support = tuple(support)
    if not support:
        raise ValueError("support must be nonempty")
    weights = model.class_weights(support)
    probs = stable_softmax(weights @ np.asarray(z, dtype=np.float64) / model.temp.value)
    return ProbabilityDistribution(support, probs)


def msp_space_scores(model: ZeroShotModel, class_space: ClassSpace, z: np.ndarray):
    """Max softmax probability of each subspace under the full-space distribution.

    Returns (base_score, new_score); the decision rule elsewhere treats a tie
    as "base".
    """
    dist = zs_predict(model, class_space.all_classes, z)
    by_id = dict(zip(dist.support, dist.probs))
    s_base = max(by_id[c] for c in class_space.base)
    s_new = max(by_id[c] for c in class_space.new)
    return float(s_base), float(s_new)


def mass_space_probability(model: ZeroShotModel, class_space: ClassSpace, z: np.ndarray):
    """Probability mass of the base and new subspaces, normalized to sum to 1."""
    dist = zs_predict(model, class_space.all_classes, z)
    base_set = set(class_space.base)
    mask = np.array([c in base_set for c in dist.support])
    p_base = float(dist.probs[mask].sum())
    p_new = float(dist.probs[~mask].sum())
    total = p_base + p_new
    return p_base / total, p_new / total
