"""Sequence-aware needle segmentation for 2D ultrasound video.

An encoder extracts per-frame features, a learnable Kalman-filter-style
recurrent block blends them with propagated motion context at the
bottleneck, and a skip-connected decoder produces per-pixel needle masks.
Baseline bottleneck blocks (identity, attention gates, stacked input,
LSTM, ConvLSTM) share the same encoder/decoder so comparisons isolate the
temporal block.
"""

from .blocks import BLOCK_KINDS, BlockConfig, stack_frames
from .data import (
    AugmentationSpec,
    DatasetManifest,
    VideoSequence,
    augment_sequence,
    load_manifest,
    load_video,
    save_video,
)
from .decoder import Decoder, binarize
from .encoders import ENCODER_VARIANTS, EncoderConfig, build_encoder
from .harness import (
    FoldSpec,
    TrainConfig,
    cross_val_split,
    evaluate_fold,
    run_experiment,
    sequence_loss,
    train_fold,
)
from .kfblock import KFBlock, KFState, KFStepTrace
from .metrics import (
    FoldReport,
    FrameMetrics,
    aggregate,
    dice,
    extract_endpoints,
    needle_errors,
    precision_recall,
)
from .model import (
    ModelConfig,
    SequenceModel,
    build_model,
    comparison_grid,
    config_label,
    load_checkpoint,
    make_model_config,
    parse_config_label,
    save_checkpoint,
)
from .synth import SynthConfig, generate_dataset, generate_trajectory, render_video

__version__ = "0.1.0"
