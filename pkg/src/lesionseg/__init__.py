"""Skin-lesion segmentation with dilated convolutions, built from scratch.

A small training/inference/evaluation pipeline: a cascade-atrous backbone
with a pyramid-pooling head, hand-written backward passes, a packed binary
dataset format, NetPBM image I/O, and per-image Jaccard scoring.
"""
from .data import Sample, SynthOpts, normalize, pack_records, read_netpbm, \
    read_records, resize, synth_generate, write_netpbm
from .errors import (
    CheckpointError,
    CodecError,
    DegenerateBatchError,
    EmptyInputError,
    GeometryError,
    IncompatibleModelError,
    InvalidLabelError,
    InvalidMaskError,
    LesionSegError,
    RecordError,
    ShapeError,
    TrainingDivergedError,
)
from .evaluate import ConfusionCounts, EvalReport, aggregate, confusion, \
    contact_sheet, jaccard, write_report
from .model import (
    ModelConfig,
    SegModel,
    TrainConfig,
    aspp_forward,
    backbone_forward,
    build_model,
    checkpoint_load,
    checkpoint_save,
    model_forward,
    param_layout,
    predict,
    train_step,
)
from .ops import (
    ConvParams,
    LossConfig,
    NormParams,
    batchnorm_backward,
    batchnorm_forward,
    bilinear_upsample,
    bilinear_upsample_backward,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool,
    global_avg_pool_backward,
    lr_at_step,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    softmax_channels,
    weighted_ce_loss,
)
from .tensor import RngState, he_init, rng_next, rng_next_bulk, rng_perm, \
    rng_uniform, rng_uniform_bulk, tensor_new

__version__ = "0.1.0"
