"""Python access to the medslip core."""

from ._medslip import (
    CompatibilityError,
    ConfigError,
    DivergenceError,
    Error,
    InputError,
    IoError,
    NumericError,
    ShapeError,
    auc,
    exist_loss,
    generate_study,
    grad_check,
    grad_check_selectors,
    icl_loss,
    parse_report,
    protocl_loss,
    render_report,
    run_cli,
)

__all__ = [
    "CompatibilityError",
    "ConfigError",
    "DivergenceError",
    "Error",
    "InputError",
    "IoError",
    "NumericError",
    "ShapeError",
    "auc",
    "exist_loss",
    "generate_study",
    "grad_check",
    "grad_check_selectors",
    "icl_loss",
    "parse_report",
    "protocl_loss",
    "render_report",
    "run_cli",
]
