"""Fine-tuning by training only the singular values and biases of pretrained
weight matrices, with adaptive freezing of the most-trained vectors."""

from .avf import AVFConfig, VectorRecord, VectorRegistry, avf_step, is_avf_step, training_strength
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ContractError,
    DimensionError,
    NumericalError,
    ValidationError,
    VectorFitError,
)
from .linalg import SVDFactors, effective_rank, reconstruct, svd_thin, truncation_error
from .models import ModelSpec, attach_lora, build_model, count_total, count_trainable, spectralize
from .spectral import LoRALinear, SpectralLinear, decompose_layer, delta_star, merge
from .trainer import RunHistory, TrainConfig, Trainer, evaluate, train

__version__ = "0.1.0"
