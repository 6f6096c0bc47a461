from . import checkpoint, ops
from .gradcheck import GradCheckReport, OracleInvalidError, finite_diff_check
from .ops import DegenerateRowError, layer_norm, matmul, softmax_rows
from .tensor import DimensionError, RankError, Tape, Tensor, active_tape, backward

__all__ = [
    "Tensor", "Tape", "backward", "active_tape", "ops", "checkpoint",
    "matmul", "softmax_rows", "layer_norm", "finite_diff_check",
    "GradCheckReport", "DimensionError", "RankError", "DegenerateRowError",
    "OracleInvalidError",
]
