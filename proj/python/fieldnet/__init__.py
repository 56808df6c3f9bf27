"""Polynomial ReLU replacements and exact prime-field inference."""

from ._core import (
    DivergenceError,
    FieldIncompatibleError,
    ModulusTooSmall,
    QuantizedModel,
    check_interval_length,
    check_kernel_special_case,
    check_unit_interval,
    compare,
    decode,
    encode,
    is_prime,
    next_prime,
    relu,
    relu_minimax_deg2,
    remez,
    scaled_relu,
    train,
)

__all__ = [
    "DivergenceError",
    "FieldIncompatibleError",
    "ModulusTooSmall",
    "QuantizedModel",
    "check_interval_length",
    "check_kernel_special_case",
    "check_unit_interval",
    "compare",
    "decode",
    "encode",
    "is_prime",
    "next_prime",
    "relu",
    "relu_minimax_deg2",
    "remez",
    "scaled_relu",
    "train",
]
