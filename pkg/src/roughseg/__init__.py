"""Uncertainty-aware surface-defect segmentation from inconsistent labels.

The pipeline: simulate or load noisily-labeled defect images, train a
U-Net-style backbone whose normalization slots carry block-structured
stochastic masking, correct labels on the fly from prediction variance,
infer rough (lower/upper) segmentation bounds by Monte-Carlo sampling,
and grade connected defects against physical factory standards.
"""

from .block_dropout import (
    BlockDropout2d,
    BlockDropoutConfig,
    BlockMask,
    MaskResampleRequired,
    apply_block_mask,
    block_dropout,
    gamma,
    sample_block_mask,
)
from .grading import (
    ComponentReport,
    Standard,
    discrimination_confidence,
    g_curve,
    grade,
    superlevel_components,
    uniform_lambda_grid,
)
from .inference import InferenceConfig, infer_rough, mc_probability, timing_report
from .losses import LossConfig, l2_penalty, rough_tversky
from .metrics import iou, oracle_eval, precision_lower, recall_upper
from .rough import (
    RegionPartition,
    RoughLabel,
    lower_of,
    partition,
    rough_from_samples,
    upper_of,
)
from .synthetic import SynthConfig, SyntheticSample, generate_dataset, simulate_annotator
from .training import TrainConfig, TrainingDiverged, correct_label, fit, mc_stats, normalize_var
from .unet import (
    CheckpointError,
    ModelSpec,
    SegmentationModel,
    build,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    validate_placement,
)

__version__ = "0.1.0"
