"""Open-world prompt tuning laboratory over a frozen synthetic encoder."""

from .config import ExperimentConfig, ModelConfig, TrainControls, parse_config
from .data import DatasetSpec, LabeledExample, OpenWorldDataset, generate, split_simulated
from .decoop import (
    DecoopModel,
    DetectorEnsemble,
    DetectorPartition,
    decoop_new_score,
    decoop_predict,
    otsu_threshold,
    partition_classes,
    train_decoop,
    train_detector,
    train_subclassifier,
)
from .dept import (
    DeptModel,
    TheoremReport,
    check_theorem,
    cross_entropy_terms,
    dept_predict,
    soft_dept_distribution,
)
from .losses import (
    CrossEntropyLoss,
    DetectorLoss,
    EntropyLoss,
    SubclassifierLoss,
    TrainBatch,
    loss_and_gradient,
)
from .metrics import EvalReport, RocCurve, auroc, evaluate, harmonic_h, roc_points
from .model import (
    ClassSpace,
    FrozenEncoder,
    ProbabilityDistribution,
    PromptVector,
    Temperature,
    classify,
    image_embedding,
    text_embedding,
)
from .tuning import TrainConfig, TrainedClassifier, cosine_lr, pt_predict, tune_prompt
from .zeroshot import ZeroShotModel, mass_space_probability, msp_space_scores, zs_predict

__version__ = "0.1.0"
