from .config import TrainConfig, load_config
from .evaluation import EvalResult, evaluate, evaluate_model
from .metrics import IOU_THRESHOLDS, iou, recall_at_iou
from .training import TrainingError, TrainResult, train

__all__ = [
    "IOU_THRESHOLDS",
    "EvalResult",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "evaluate",
    "evaluate_model",
    "iou",
    "load_config",
    "recall_at_iou",
    "train",
]
