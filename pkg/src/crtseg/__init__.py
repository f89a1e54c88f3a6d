"""crtseg: self-supervised few-shot 2D segmentation with cross-reference gating.

Pipeline: superpixel pseudo-labels turn unlabeled slices into support/query
episodes, a shared conv encoder embeds both images, a bidirectional
cross-attention block gates feature channels, and a prototype head scores
query positions by scaled cosine similarity. Training adds a prototype
alignment regularizer; evaluation reports Dice.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    Image2D,
    MaskMap,
    SliceDataset,
    SyntheticSpec,
    TransformParams,
    TransformRanges,
    apply_affine,
    apply_gamma,
    load_slice_dataset,
    make_synthetic_dataset,
    normalize_intensity,
)
from .episodes import (  # noqa: F401
    Episode,
    SuperpixelConfig,
    build_episode,
    build_eval_episode,
)
from .errors import (  # noqa: F401
    ConfigError,
    EmptyClassMask,
    LoadError,
    NoEligibleSegment,
    TrainingDiverged,
    ValidationError,
)
from .losses import DiceReport, LossReport, dice, seg_loss, total_loss  # noqa: F401
from .superpixels import SuperpixelMap, felzenszwalb_segment, sample_pseudolabel  # noqa: F401
from .training import (  # noqa: F401
    TrainConfig,
    build_model,
    evaluate,
    finite_difference_check,
    forward_episode,
    learning_rate,
    run_ablation,
    train,
)
