"""Two-stage human-object interaction detection head on top of precomputed
detections, with a small numpy autodiff engine, training, mAP evaluation and
attention diagnostics."""

from .autograd import NumericalError, ShapeError, Tensor
from .boxes import Box, iou, pairwise_terms, spatial_features, unary_terms
from .detections import (
    CategoryTable,
    Detection,
    GroundTruthPair,
    HoiPrediction,
    SchemaError,
    TokenSet,
    ValidityTable,
    enumerate_pairs,
    filter_and_sample,
    nms,
)
from .evaluation import EvalReport, average_precision, evaluate, match
from .head import AttentionEdit, HeadConfig, InteractionHead, load_checkpoint, save_checkpoint
from .inference import PreprocessConfig, predict_image, preprocess, score_pairs
from .losses import compose_scores, focal_loss, recover_logit
from .synthetic import Dataset, SyntheticSpec, gen_synthetic
from .training import TrainConfig, train

__version__ = "0.1.0"
