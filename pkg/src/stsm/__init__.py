"""Spatio-temporal shift module (STSM) with a small residual video network,
reverse-mode gradients, exact cost accounting and a synthetic motion task."""

from .errors import ConfigError, ContractError, FormatError, RangeError, ShapeError, STSMError
from .shift import (
    ShiftGroup,
    ShiftSpec,
    SparseKernel,
    apply_stsm,
    build_shift_spec,
    build_sparse_kernel,
    oracle_sparse_conv,
    shift_adjoint,
    shift_along_axes,
)
from .tensor import ChannelRange, elementwise, load_tensor, new_tensor, reduce, save_tensor

__version__ = "0.1.0"
