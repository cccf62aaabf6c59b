"""stitchlearn: noisy multi-label long-tailed training at desk scale.

A compact token-bag MLP trained with two co-guided branches under different
sampling priors, stitch augmentation with label union, a distribution-
balanced focal loss family, and mAP evaluation over head/medium/tail splits,
plus the seeded synthetic benchmark generator the experiments run on.
"""

from .colearn import (
    BranchSpec,
    MixupConfig,
    ModelDims,
    PseudoLabelConfig,
    TrainConfig,
    TrainResult,
    TwoBranchModel,
    cross_guide,
    infer,
    pseudo_label,
    train,
)
from .evalx import (
    ApResult,
    NoiseLevelRecord,
    NoiseLevelTracker,
    SubsetSplit,
    average_precision,
    map_from_scores,
    map_report,
    split_by_counts,
)
from .losses import (
    DbHyperParams,
    FocalHyperParams,
    LossOutput,
    bce,
    db_class_bias,
    db_loss,
    db_rebalance_weight,
    focal,
    overall_loss,
)
from .numcore import LrSchedule, MlpParams, OptimState, lr_at, sgd_step
from .sampling import BatchIndices, Sampler
from .stitchup import StitchMode, StitchedSample, label_union, maybe_stitch, select_candidates
from .synthgen import (
    DatasetBundle,
    GeneratorConfig,
    TokenBagSample,
    TransitionMatrix,
    build_cooccurrence,
    build_transition,
    corrupt,
    generate_clean,
    load_dataset,
    make_noisy_bundle,
    save_dataset,
)

__version__ = "0.1.0"
