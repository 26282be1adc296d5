"""Detector-ensemble prompt tuning with leave-out partitions and Otsu thresholds.

The pipeline trains K new-class detectors, each on a different partition of
the base classes into simulated-base and simulated-new subsets, using a
cross-entropy plus entropy-margin objective.  Each detector's acceptance
threshold is estimated on its own training scores with an exact sample-level
Otsu search, and the per-detector thresholds are averaged into a single
routing threshold.  A sub-classifier is then trained per detector on the
examples that detector accepts (cross-entropy) while the rejected ones are
pulled toward the zero-shot distribution (KL).  Inference routes each input
to the zero-shot model or to the sub-classifier of the highest-scoring
detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .data import OpenWorldDataset, split_simulated
from .losses import DetectorLoss, SubclassifierLoss, TrainBatch
from .model import (
    ClassSpace,
    FrozenEncoder,
    PromptVector,
    Temperature,
    as_temperature,
    stable_log_softmax,
)
from .tuning import (
    TrainConfig,
    TrainedClassifier,
    embed_examples,
    minibatch_indices,
    pt_predict,
    sgd_prompt,
)
from .zeroshot import ZeroShotModel, zs_predict

__all__ = [
    "DetectorPartition",
    "DetectorEnsemble",
    "DecoopModel",
    "DecoopRoute",
    "partition_classes",
    "train_detector",
    "detector_score",
    "otsu_threshold",
    "train_subclassifier",
    "train_decoop",
    "route_from_scores",
    "decoop_predict",
    "decoop_new_score",
    "save_decoop",
    "load_decoop",
]

DEFAULT_N_DETECTORS = 3
BUNDLE_FORMAT = "owpt-decoop-v1"


@dataclass(frozen=True)
class DetectorPartition:
    """One leave-out split of the base classes; ``index`` is 1-based."""

    index: int
    sim_base: tuple[int, ...]
    sim_new: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sim_base", tuple(self.sim_base))
        object.__setattr__(self, "sim_new", tuple(self.sim_new))
        if not self.sim_new or not self.sim_base:
            raise ValueError("both simulated subsets must be nonempty")
        if set(self.sim_base) & set(self.sim_new):
            raise ValueError("simulated subsets must be disjoint")


@dataclass(frozen=True, eq=False)
class DetectorEnsemble:
    """K trained detectors with their partitions and the averaged threshold."""

    base_classes: tuple[int, ...]
    detectors: tuple[tuple[DetectorPartition, TrainedClassifier], ...]
    per_detector_thresholds: tuple[float, ...]
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        simulated_new = set()
        for part, _ in self.detectors:
            if set(part.sim_base) | set(part.sim_new) != set(self.base_classes):
                raise ValueError("partition does not cover the base classes")
            simulated_new.update(part.sim_new)
        if simulated_new != set(self.base_classes):
            raise ValueError("every base class must be simulated-new at least once")
        if len(self.per_detector_thresholds) != len(self.detectors):
            raise ValueError("one threshold per detector required")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0, 1)")

    @property
    def size(self) -> int:
        return len(self.detectors)


class DecoopRoute(NamedTuple):
    branch: str  # "zs" | "sub"
    detector_index: int | None  # 1-based, None for the zero-shot branch


@dataclass(frozen=True, eq=False)
class DecoopModel:
    ensemble: DetectorEnsemble
    sub_classifiers: tuple[TrainedClassifier, ...]
    zs: ZeroShotModel
    class_space: ClassSpace

    def __post_init__(self):
        if len(self.sub_classifiers) != self.ensemble.size:
            raise ValueError("need one sub-classifier per detector")


def partition_classes(base_classes, n_partitions: int, seed: int) -> list[DetectorPartition]:
    """Shuffle the base classes and leave one near-equal fold out per partition."""
    base_classes = list(base_classes)
    if n_partitions < 2:
        raise ValueError("need at least 2 partitions")
    if len(base_classes) < n_partitions:
        raise ValueError("need at least as many base classes as partitions")
    order = np.array(base_classes)
    np.random.default_rng(seed).shuffle(order)
    folds = np.array_split(order, n_partitions)
    partitions = []
    for i, fold in enumerate(folds, start=1):
        fold_set = set(int(c) for c in fold)
        rest = tuple(sorted(set(base_classes) - fold_set))
        partitions.append(DetectorPartition(i, rest, tuple(sorted(fold_set))))
    return partitions


def _stratified_batches(rng, z, labels, new_mask, support, temp, batch_size):
    """Batches that always contain both simulated portions.

    Each portion is independently shuffled and split into the same number of
    chunks, then chunks are paired; the chunk count is capped by the smaller
    portion so no batch loses a side.
    """
    base_idx = np.flatnonzero(~new_mask)
    new_idx = np.flatnonzero(new_mask)
    n_batches = int(np.ceil(len(labels) / batch_size))
    n_batches = max(1, min(n_batches, len(base_idx), len(new_idx)))
    base_chunks = np.array_split(rng.permutation(base_idx), n_batches)
    new_chunks = np.array_split(rng.permutation(new_idx), n_batches)
    batches = []
    for b_chunk, n_chunk in zip(base_chunks, new_chunks):
        idx = np.concatenate([b_chunk, n_chunk])
        mask = np.zeros(len(idx), dtype=bool)
        mask[len(b_chunk) :] = True
        batches.append(TrainBatch(z[idx], labels[idx], support, temp, new_mask=mask))
    return batches


def train_detector(
    enc: FrozenEncoder,
    dataset: OpenWorldDataset,
    partition: DetectorPartition,
    cfg: TrainConfig,
    temp: Temperature | float = Temperature(),
) -> TrainedClassifier:
    """Train one detector prompt on the entropy-margin objective.

    All probabilities are softmaxes over the full base-class vocabulary; the
    cross-entropy term sees the simulated-base portion, the entropy hinge
    compares mean entropies of the two portions within each batch.
    """
    temp = as_temperature(temp)
    support = tuple(dataset.class_space.base)
    d_base, d_new = split_simulated(dataset, partition)
    if not d_base or not d_new:
        raise ValueError("both simulated portions need training data")

    examples = list(d_base) + list(d_new)
    z = embed_examples(enc, examples)
    index_of = {c: i for i, c in enumerate(support)}
    labels = np.array([index_of[ex.label] for ex in examples])
    new_mask = np.zeros(len(examples), dtype=bool)
    new_mask[len(d_base) :] = True

    rng = np.random.default_rng(cfg.seed)
    init = rng.normal(0.0, 0.02, size=(cfg.prompt_len, enc.token_dim))

    def make_batches(rng):
        return _stratified_batches(rng, z, labels, new_mask, support, temp, cfg.batch_size)

    prompt, history = sgd_prompt(
        enc, init, cfg, rng, make_batches, DetectorLoss(margin=cfg.margin)
    )
    return TrainedClassifier(prompt, support, history, enc, temp)


def detector_score(
    detector: TrainedClassifier,
    partition: DetectorPartition,
    vocabulary,
    z: np.ndarray,
) -> float:
    """Max softmax probability over the simulated-base classes.

    The softmax runs over ``vocabulary`` (the base classes during training
    and threshold estimation, the simulated-base plus real-new classes at
    test time); higher means more base-like.
    """
    vocabulary = tuple(vocabulary)
    if not set(partition.sim_base) <= set(vocabulary):
        raise ValueError("vocabulary must contain the simulated-base classes")
    weights = detector.class_weights(vocabulary)
    logits = weights @ np.asarray(z, dtype=np.float64) / detector.temp.value
    probs = np.exp(stable_log_softmax(logits))
    keep = [i for i, c in enumerate(vocabulary) if c in set(partition.sim_base)]
    return float(probs[keep].max())


def otsu_threshold(scores) -> float:
    """Exact sample-level Otsu: the midpoint between consecutive distinct
    scores that maximizes between-class variance; ties pick the smallest."""
    scores = np.asarray(list(scores), dtype=np.float64)
    distinct = np.unique(scores)
    if distinct.size < 2:
        raise ValueError("degenerate score distribution")
    candidates = (distinct[:-1] + distinct[1:]) / 2.0
    best_t, best_v = None, -1.0
    n = scores.size
    for t in candidates:
        low = scores[scores < t]
        high = scores[scores >= t]
        w0, w1 = low.size / n, high.size / n
        v = w0 * w1 * (low.mean() - high.mean()) ** 2
        if v > best_v:
            best_t, best_v = float(t), v
    return best_t


def train_subclassifier(
    enc: FrozenEncoder,
    dataset: OpenWorldDataset,
    detector: TrainedClassifier,
    partition: DetectorPartition,
    threshold: float,
    zs: ZeroShotModel,
    cfg: TrainConfig,
    temp: Temperature | float = Temperature(),
) -> TrainedClassifier:
    """Train the sub-classifier paired with one detector.

    The detector (with the ensemble-averaged threshold) accepts part of the
    training data; accepted examples contribute cross-entropy, rejected ones
    a KL pull toward the zero-shot distribution, both over the base-class
    vocabulary and each term normalized by its subset size.
    """
    temp = as_temperature(temp)
    support = tuple(dataset.class_space.base)
    examples = list(dataset.train)
    z = embed_examples(enc, examples)

    scores = np.array(
        [detector_score(detector, partition, support, z_e) for z_e in z]
    )
    rejected = scores < threshold
    if rejected.all():
        raise RuntimeError("detector rejects all training data")
    n_rejected = int(rejected.sum())
    loss_spec = SubclassifierLoss(
        ce_weight=1.0 / (len(examples) - n_rejected),
        kl_weight=1.0 / n_rejected if n_rejected else 1.0,
    )

    index_of = {c: i for i, c in enumerate(support)}
    labels = np.array([index_of[ex.label] for ex in examples])
    zs_weights = zs.class_weights(support)
    ref_log_probs = stable_log_softmax(z @ zs_weights.T / zs.temp.value, axis=1)

    rng = np.random.default_rng(cfg.seed)
    init = rng.normal(0.0, 0.02, size=(cfg.prompt_len, enc.token_dim))

    def make_batches(rng):
        return [
            TrainBatch(
                z[idx],
                labels[idx],
                support,
                temp,
                new_mask=rejected[idx],
                ref_log_probs=ref_log_probs[idx],
            )
            for idx in minibatch_indices(rng, len(examples), cfg.batch_size)
        ]

    prompt, history = sgd_prompt(enc, init, cfg, rng, make_batches, loss_spec)
    return TrainedClassifier(prompt, support, history, enc, temp)


def train_decoop(
    enc: FrozenEncoder,
    dataset: OpenWorldDataset,
    zs: ZeroShotModel,
    detector_cfg: TrainConfig,
    classifier_cfg: TrainConfig,
    n_detectors: int = DEFAULT_N_DETECTORS,
    partition_seed: int | None = None,
) -> DecoopModel:
    """Full training pipeline: partitions, detectors, thresholds, sub-classifiers.

    Detector i and sub-classifier i train with seeds ``cfg.seed + i`` so the
    ensemble members are independent but reproducible.
    """
    space = dataset.class_space
    base = tuple(space.base)
    if partition_seed is None:
        partition_seed = detector_cfg.seed
    partitions = partition_classes(base, n_detectors, partition_seed)

    detectors = []
    thresholds = []
    train_z = embed_examples(enc, dataset.train)
    for part in partitions:
        det = train_detector(
            enc, dataset, part, replace(detector_cfg, seed=detector_cfg.seed + part.index), zs.temp
        )
        scores = [detector_score(det, part, base, z_e) for z_e in train_z]
        detectors.append((part, det))
        thresholds.append(otsu_threshold(scores))

    ensemble = DetectorEnsemble(
        base, tuple(detectors), tuple(thresholds), float(np.mean(thresholds))
    )

    subs = tuple(
        train_subclassifier(
            enc,
            dataset,
            det,
            part,
            ensemble.threshold,
            zs,
            replace(classifier_cfg, seed=classifier_cfg.seed + part.index),
            zs.temp,
        )
        for part, det in ensemble.detectors
    )
    return DecoopModel(ensemble, subs, zs, space)


def _test_vocabulary(model: DecoopModel, partition: DetectorPartition) -> tuple[int, ...]:
    return partition.sim_base + tuple(model.class_space.new)


def _ensemble_scores(model: DecoopModel, z: np.ndarray) -> np.ndarray:
    return np.array(
        [
            detector_score(det, part, _test_vocabulary(model, part), z)
            for part, det in model.ensemble.detectors
        ]
    )


def route_from_scores(scores, threshold: float) -> DecoopRoute:
    """Pure routing rule: zero-shot below the threshold, otherwise the
    sub-classifier of the highest score (ties pick the lowest index)."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.max() < threshold:
        return DecoopRoute("zs", None)
    return DecoopRoute("sub", int(np.argmax(scores)) + 1)  # argmax takes the first maximum


def decoop_predict(model: DecoopModel, z: np.ndarray) -> tuple[int, DecoopRoute]:
    """Route one embedding through the ensemble and predict over the full space."""
    route = route_from_scores(_ensemble_scores(model, z), model.ensemble.threshold)
    support = model.class_space.all_classes
    if route.branch == "zs":
        return zs_predict(model.zs, support, z).argmax(), route
    clf = model.sub_classifiers[route.detector_index - 1]
    return pt_predict(clf, support, z).argmax(), route


def decoop_new_score(model: DecoopModel, z: np.ndarray) -> float:
    """Base-likeness score for detection metrics: the max detector score."""
    return float(_ensemble_scores(model, z).max())


def decoop_payload(
    model: DecoopModel,
    detector_cfg: TrainConfig | None = None,
    classifier_cfg: TrainConfig | None = None,
) -> dict:
    from dataclasses import asdict

    payload = {
        "format": BUNDLE_FORMAT,
        "class_space": {
            "all": list(model.class_space.all_classes),
            "base": list(model.class_space.base),
            "new": list(model.class_space.new),
        },
        "partitions": [
            {"index": p.index, "sim_base": list(p.sim_base), "sim_new": list(p.sim_new)}
            for p, _ in model.ensemble.detectors
        ],
        "detector_prompts": [det.prompt.tokens.tolist() for _, det in model.ensemble.detectors],
        "detector_loss_history": [list(det.loss_history) for _, det in model.ensemble.detectors],
        "subclassifier_prompts": [clf.prompt.tokens.tolist() for clf in model.sub_classifiers],
        "subclassifier_loss_history": [list(clf.loss_history) for clf in model.sub_classifiers],
        "per_detector_thresholds": list(model.ensemble.per_detector_thresholds),
        "threshold": model.ensemble.threshold,
        "temperature": model.zs.temp.value,
        "configs": {},
    }
    if detector_cfg is not None:
        payload["configs"]["detector"] = asdict(detector_cfg)
    if classifier_cfg is not None:
        payload["configs"]["classifier"] = asdict(classifier_cfg)
    return payload


def save_decoop(model: DecoopModel, path, detector_cfg=None, classifier_cfg=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(decoop_payload(model, detector_cfg, classifier_cfg), fh, indent=1)
        fh.write("\n")


def load_decoop(path, zs: ZeroShotModel) -> DecoopModel:
    """Rebuild a trained model around an existing encoder + zero-shot baseline."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != BUNDLE_FORMAT:
        raise ValueError("not a model bundle")
    space = ClassSpace(
        tuple(payload["class_space"]["all"]),
        tuple(payload["class_space"]["base"]),
        tuple(payload["class_space"]["new"]),
    )
    temp = Temperature(payload["temperature"])
    support = tuple(space.base)

    def rebuild(tokens, history):
        return TrainedClassifier(
            PromptVector(np.array(tokens, dtype=np.float64)), support, tuple(history), zs.enc, temp
        )

    detectors = tuple(
        (
            DetectorPartition(p["index"], tuple(p["sim_base"]), tuple(p["sim_new"])),
            rebuild(tokens, hist),
        )
        for p, tokens, hist in zip(
            payload["partitions"],
            payload["detector_prompts"],
            payload["detector_loss_history"],
        )
    )
    ensemble = DetectorEnsemble(
        support,
        detectors,
        tuple(payload["per_detector_thresholds"]),
        payload["threshold"],
    )
    subs = tuple(
        rebuild(tokens, hist)
        for tokens, hist in zip(
            payload["subclassifier_prompts"], payload["subclassifier_loss_history"]
        )
    )
    return DecoopModel(ensemble, subs, zs, space)
