"""Routing between a tuned classifier and the zero-shot baseline.

The hard router sends an input to the tuned classifier when the zero-shot
maximum-softmax-probability score of the base subspace is at least that of
the new subspace, otherwise to the zero-shot classifier.  Alongside it lives
the soft product-form distribution (subspace mass times renormalized
conditional), whose cross-entropy decomposes exactly into a routing term plus
a conditional classification term; that identity powers the empirical bound
checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledExample, OpenWorldDataset
from .model import ClassSpace, ProbabilityDistribution, image_embedding
from .tuning import TrainedClassifier, pt_predict
from .zeroshot import ZeroShotModel, mass_space_probability, msp_space_scores, zs_predict

__all__ = [
    "DeptModel",
    "CrossEntropyTerms",
    "TheoremReport",
    "dept_predict",
    "soft_dept_distribution",
    "cross_entropy_terms",
    "check_theorem",
    "report_record",
]

BOUND_SLACK = 1e-9  # float headroom; the measured bounds are algebraic equalities


@dataclass(frozen=True, eq=False)
class DeptModel:
    zs: ZeroShotModel
    pt: TrainedClassifier
    class_space: ClassSpace

    def __post_init__(self):
        if tuple(self.pt.support) != tuple(self.class_space.base):
            raise ValueError("tuned classifier support must equal the base classes")


@dataclass(frozen=True)
class CrossEntropyTerms:
    """Per-example cross-entropy pieces; +inf (never a crash) marks zero mass."""

    h_ood_zs: float
    h_cls_zs: float
    h_cls_pt: float
    h_zs: float
    h_dept: float

    @property
    def any_infinite(self) -> bool:
        return not all(
            math.isfinite(v)
            for v in (self.h_ood_zs, self.h_cls_zs, self.h_cls_pt, self.h_zs, self.h_dept)
        )


@dataclass(frozen=True)
class TheoremReport:
    """Measured constants and both error bounds of the routing decomposition.

    ``delta`` is the mean conditional cross-entropy of the zero-shot
    classifier over the whole test set, ``gain`` the base-only improvement of
    the tuned classifier over it, ``epsilon`` the mean routing cross-entropy,
    and ``alpha`` the base fraction of the test set.
    """

    delta: float
    gain: float
    epsilon: float
    alpha: float
    lhs_zs: float
    lhs_dept: float
    rhs_zs: float
    rhs_dept: float
    bound_zs_holds: bool
    bound_dept_holds: bool
    valid: bool
    n_infinite: int


def dept_predict(model: DeptModel, z: np.ndarray) -> tuple[int, str]:
    """Route one embedding; returns (predicted class, branch in {"pt", "zs"})."""
    s_base, s_new = msp_space_scores(model.zs, model.class_space, z)
    support = model.class_space.all_classes
    if s_base >= s_new:
        return pt_predict(model.pt, support, z).argmax(), "pt"
    return zs_predict(model.zs, support, z).argmax(), "zs"


def soft_dept_distribution(model: DeptModel, z: np.ndarray) -> ProbabilityDistribution:
    """Product-form distribution: subspace mass times in-subspace conditional."""
    space = model.class_space
    p_base, p_new = mass_space_probability(model.zs, space, z)
    cond_base = pt_predict(model.pt, space.base, z)
    cond_new = zs_predict(model.zs, space.new, z)
    by_id = {c: p * p_base for c, p in zip(cond_base.support, cond_base.probs)}
    by_id.update({c: p * p_new for c, p in zip(cond_new.support, cond_new.probs)})
    probs = np.array([by_id[c] for c in space.all_classes])
    return ProbabilityDistribution(space.all_classes, probs)


def _neg_log(p: float) -> float:
    return math.inf if p <= 0.0 else -math.log(p)


def cross_entropy_terms(model: DeptModel, example: LabeledExample) -> CrossEntropyTerms:
    """All five cross-entropy quantities for one labeled test example.

    Every term is derived from shared intermediates so the chain-rule
    identities (full = conditional + routing) hold to floating-point
    accuracy, not merely approximately.
    """
    space = model.class_space
    z = image_embedding(model.zs.enc, example.feature)

    full = zs_predict(model.zs, space.all_classes, z)
    subspace = space.base if example.space_tag == "base" else space.new
    in_cell = set(subspace)
    mask = np.array([c in in_cell for c in full.support])
    mass = float(full.probs[mask].sum())
    p_label = full.prob_of(example.label)

    cond_zs = p_label / mass if mass > 0.0 else 0.0
    cond_pt = pt_predict(model.pt, subspace, z).prob_of(example.label)

    h_ood = _neg_log(mass)
    h_cls_zs = _neg_log(cond_zs)
    h_cls_pt = _neg_log(cond_pt)
    h_zs = _neg_log(p_label)
    h_dept = _neg_log((cond_pt if example.space_tag == "base" else cond_zs) * mass)
    return CrossEntropyTerms(h_ood, h_cls_zs, h_cls_pt, h_zs, h_dept)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def check_theorem(
    model: DeptModel,
    test_set,
    alpha: float | None = None,
) -> TheoremReport:
    """Measure the bound constants on a test set and verify both inequalities.

    With the constants set to the measured expectations the two bounds are
    algebraic identities, so the flags can only fail on genuinely broken
    accounting (or infinities, which mark the report invalid).
    """
    if isinstance(test_set, OpenWorldDataset):
        test_set = test_set.test
    examples = list(test_set)
    base_terms, new_terms = [], []
    for ex in examples:
        t = cross_entropy_terms(model, ex)
        (base_terms if ex.space_tag == "base" else new_terms).append(t)
    if not base_terms or not new_terms:
        raise ValueError("test set must contain both base and new examples")

    all_terms = base_terms + new_terms
    n_infinite = sum(t.any_infinite for t in all_terms)
    if alpha is None:
        alpha = len(base_terms) / len(all_terms)

    delta = _mean(t.h_cls_zs for t in all_terms)
    epsilon = _mean(t.h_ood_zs for t in all_terms)
    gain = _mean(t.h_cls_zs for t in base_terms) - _mean(t.h_cls_pt for t in base_terms)
    lhs_zs = _mean(t.h_zs for t in all_terms)
    lhs_dept = _mean(t.h_dept for t in all_terms)
    rhs_zs = epsilon + delta
    rhs_dept = epsilon + delta - alpha * gain

    valid = n_infinite == 0
    return TheoremReport(
        delta=delta,
        gain=gain,
        epsilon=epsilon,
        alpha=alpha,
        lhs_zs=lhs_zs,
        lhs_dept=lhs_dept,
        rhs_zs=rhs_zs,
        rhs_dept=rhs_dept,
        bound_zs_holds=valid and lhs_zs <= rhs_zs + BOUND_SLACK,
        bound_dept_holds=valid and lhs_dept <= rhs_dept + BOUND_SLACK,
        valid=valid,
        n_infinite=n_infinite,
    )


def report_record(report: TheoremReport, **extra) -> str:
    """Flat key=value text record; extra keys (seed, run id) come first."""
    items = list(extra.items()) + [
        ("delta", report.delta),
        ("gain", report.gain),
        ("epsilon", report.epsilon),
        ("alpha", report.alpha),
        ("lhs_zs", report.lhs_zs),
        ("rhs_zs", report.rhs_zs),
        ("lhs_dept", report.lhs_dept),
        ("rhs_dept", report.rhs_dept),
        ("bound_zs_holds", report.bound_zs_holds),
        ("bound_dept_holds", report.bound_dept_holds),
        ("valid", report.valid),
        ("n_infinite", report.n_infinite),
    ]

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return "\n".join(f"{k}={fmt(v)}" for k, v in items) + "\n"
