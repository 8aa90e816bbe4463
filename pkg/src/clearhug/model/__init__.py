from .attention import InertRowError, MultiHeadAttention, masked_attention, sparse_attention
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, grad_check, relative_error
from .network import (
    Batch,
    ClearModel,
    EmptySelection,
    ForwardTrace,
    ModelConfig,
    NonFiniteError,
    batch_loss,
    compute_gradients,
    decay_split,
    prepare_batch,
    reconstruction_loss,
    tensor_class,
)

__all__ = [
    "Batch", "CheckpointError", "ClearModel", "EmptySelection", "ForwardTrace", "GradCheckResult",
    "InertRowError", "ModelConfig", "MultiHeadAttention", "NonFiniteError", "batch_loss",
    "compute_gradients", "decay_split", "grad_check", "load_checkpoint", "masked_attention",
    "prepare_batch", "reconstruction_loss", "relative_error", "save_checkpoint", "sparse_attention",
    "tensor_class",
]
