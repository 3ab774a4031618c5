"""Gradient quantizers: stochastic rounding, PTQ, PSQ and block Householder."""

from fqtlab.quant.ops import (
    QuantizedGrad,
    dequantize,
    exact_conditional_variance,
    expected_dequantized,
    quantize_stochastic,
    unit_values,
    variance_bound,
)
from fqtlab.quant.rounding import (
    QuantBits,
    as_bits,
    deterministic_round,
    round_fraction,
    stochastic_round,
    stochastic_round_variance,
)
from fqtlab.quant.transforms import (
    BlockHouseholderTransform,
    HouseholderGroup,
    PerSampleTransform,
    PerTensorTransform,
    ScaleTransform,
    dumps_transform,
    fit_block_householder,
    fit_per_sample,
    fit_per_tensor,
    fit_transform,
    householder_matrix,
    householder_reflect,
    loads_transform,
    optimal_householder_scales,
    select_groups,
    transform_from_record,
)

VARIANTS = ("ptq", "psq", "bhq")

__all__ = [
    "VARIANTS",
    "BlockHouseholderTransform",
    "HouseholderGroup",
    "PerSampleTransform",
    "PerTensorTransform",
    "QuantBits",
    "QuantizedGrad",
    "ScaleTransform",
    "as_bits",
    "dequantize",
    "deterministic_round",
    "dumps_transform",
    "exact_conditional_variance",
    "expected_dequantized",
    "fit_block_householder",
    "fit_per_sample",
    "fit_per_tensor",
    "fit_transform",
    "householder_matrix",
    "householder_reflect",
    "loads_transform",
    "optimal_householder_scales",
    "quantize_stochastic",
    "round_fraction",
    "select_groups",
    "stochastic_round",
    "stochastic_round_variance",
    "transform_from_record",
    "unit_values",
    "variance_bound",
]
