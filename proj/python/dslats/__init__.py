"""Distributed localization and clock synchronization simulator."""

from ._core import (
    ConfigError,
    Error,
    binomial_update_chain,
    dici_or_invert,
    effective_config,
    jacobian_H_pair,
    lband_approx_inverse,
    localization_error,
    predict_measurement,
    procrustes_align,
    run,
)

__all__ = [
    "ConfigError",
    "Error",
    "binomial_update_chain",
    "dici_or_invert",
    "effective_config",
    "jacobian_H_pair",
    "lband_approx_inverse",
    "localization_error",
    "predict_measurement",
    "procrustes_align",
    "run",
]
