"""Per-channel activation quantization with folded scales and symmetrization."""

from ._core import (
    BlockModel,
    CalibStats,
    FormatError,
    OutlierTuneError,
    TransformedBlock,
    __version__,
    cli,
    expected_op_count,
    fake_quantize,
    fold_weights,
    gen_activations,
    gen_inputs,
    quant_mse,
    quantize,
    run_experiment,
    transform,
)

__all__ = [
    "BlockModel",
    "CalibStats",
    "FormatError",
    "OutlierTuneError",
    "TransformedBlock",
    "__version__",
    "cli",
    "expected_op_count",
    "fake_quantize",
    "fold_weights",
    "gen_activations",
    "gen_inputs",
    "quant_mse",
    "quantize",
    "run_experiment",
    "transform",
]
