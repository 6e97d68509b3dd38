"""Multi-task data pipeline and evaluation toolkit for grounded GI VQA."""

from .errors import PipelineError
from .imaging import BinaryMask, Polygon, iou
from .loc_codec import LocTokenSeq, mask_to_tokens, parse_token_text, tokens_to_mask
from .model_adapter import TASK_EXPLAIN, TASK_SEGMENT, TASK_TOKENS, TASK_VQA, ToyAdapter
from .train_harness import TrainConfig, reference_train_config

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "LocTokenSeq",
    "PipelineError",
    "Polygon",
    "TASK_EXPLAIN",
    "TASK_SEGMENT",
    "TASK_TOKENS",
    "TASK_VQA",
    "ToyAdapter",
    "TrainConfig",
    "iou",
    "mask_to_tokens",
    "reference_train_config",
    "parse_token_text",
    "tokens_to_mask",
    "__version__",
]
