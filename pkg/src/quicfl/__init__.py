"""Unbiased low-bit vector quantization with shared randomness for distributed mean estimation."""

from .errors import (
    ChecksumError,
    DomainError,
    InfeasibleError,
    QuicFLError,
    RangeError,
    StructuralError,
    TableFormatError,
    VersionError,
    WireFormatError,
)
from .tables import (
    QuantConfig,
    QuantTable,
    compute_quantiles,
    compute_threshold,
    read_table,
    validate_table,
    write_table,
)
from .solver import SolverOptions, SolverResult, r_step, s_step, solve_table
from .transform import RotationSpec, rht_forward, rht_inverse
from .harness import ExperimentConfig, DmeReport, estimate_quantizer_mse, run_dme

__version__ = "0.1.0"
