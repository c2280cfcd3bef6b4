"""Row-wise mixed-scheme (SPoT / fixed-point) and mixed-precision weight quantization
with ADMM training, bit-exact shift-add inference and an FPGA throughput model."""
from .assignment import assign, quantize_model, target_counts
from .core import NetworkIR, count_ops, load_tensor, mlp, reshape_to_gemm, save_tensor
from .errors import MSPError
from .qmodel import MSP_RATIO, ActQuant, QuantizedModel, SchemeConfig, SchemeRatio
from .quantizers import AlphaPolicy, QuantScheme, build_levels, project_nearest

__version__ = "0.1.0"

__all__ = [
    "ActQuant",
    "AlphaPolicy",
    "MSPError",
    "MSP_RATIO",
    "NetworkIR",
    "QuantScheme",
    "QuantizedModel",
    "SchemeConfig",
    "SchemeRatio",
    "assign",
    "build_levels",
    "count_ops",
    "load_tensor",
    "mlp",
    "project_nearest",
    "quantize_model",
    "reshape_to_gemm",
    "save_tensor",
    "target_counts",
]
