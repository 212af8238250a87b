"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .ops import BatchNormState, branch_trace, frozen_statistics
from .tensor import Tensor, as_tensor, grad_enabled, no_grad

__all__ = ["Tensor", "as_tensor", "ops", "grad_check", "grad_check_report", "GradCheckReport", "no_grad",
           "grad_enabled", "BatchNormState", "frozen_statistics", "branch_trace"]
