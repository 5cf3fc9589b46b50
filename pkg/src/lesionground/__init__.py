"""Report-guided 3D lesion grounding on synthetic CT volumes."""
from .errors import (
    GroundingError,
    NumericError,
    ParameterError,
    ReportError,
    ShapeError,
    StageError,
)
from .estimator import LesionGrounder, check_cases, check_config
from .metrics import dice, evaluate_case, hd95, lesion_recall, lls, match_lesions
from .params import ParamStore, load_checkpoint, save_checkpoint
from .phantom import generate, read_case, suite, write_suite
from .pipeline import (
    GroundingResult,
    PipelineConfig,
    evaluate,
    forward,
    ground,
    init_params,
    prepare_case,
    prepare_phantom,
    split_cases,
    train,
    with_ablation,
)
from .report import parse_report, serialize_report
from .volume import Mask3, Volume3, read_mask, read_volume, write_mask, write_volume

__version__ = "0.1.0"

__all__ = [
    "GroundingError",
    "NumericError",
    "ParameterError",
    "ReportError",
    "ShapeError",
    "StageError",
    "LesionGrounder",
    "check_cases",
    "check_config",
    "dice",
    "evaluate_case",
    "hd95",
    "lesion_recall",
    "lls",
    "match_lesions",
    "ParamStore",
    "load_checkpoint",
    "save_checkpoint",
    "generate",
    "read_case",
    "suite",
    "write_suite",
    "GroundingResult",
    "PipelineConfig",
    "evaluate",
    "forward",
    "ground",
    "init_params",
    "prepare_case",
    "prepare_phantom",
    "split_cases",
    "train",
    "with_ablation",
    "parse_report",
    "serialize_report",
    "Mask3",
    "Volume3",
    "read_mask",
    "read_volume",
    "write_mask",
    "write_volume",
]
