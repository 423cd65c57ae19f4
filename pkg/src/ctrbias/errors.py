"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and input problems
(ConfigError and subclasses) exit with 2, runtime numerical failures
(NumericalError and subclasses) exit with 3.
"""


class CtrBiasError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CtrBiasError):
    """Invalid configuration, schema declaration, data file, or CLI usage."""


class SchemaError(ConfigError):
    """Feature space mismatch: unknown field, category overflow, digest mismatch."""


class CsvParseError(ConfigError):
    """Malformed CSV row; carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class LabelError(ConfigError):
    """Label cell is not binary and no binarization threshold was configured."""


class ModelFormatError(ConfigError):
    """Corrupt, truncated, or incompatible model file."""


class NumericalError(CtrBiasError):
    """Runtime numerical failure."""


class DivergenceError(NumericalError):
    """Training loss became NaN/Inf; carries diagnostics."""

    def __init__(self, epoch, batch, max_abs_logit):
        super().__init__(
            f"non-finite training loss at epoch {epoch}, batch {batch}; "
            f"max |logit| = {max_abs_logit:.3e}"
        )
        self.epoch = epoch
        self.batch = batch
        self.max_abs_logit = max_abs_logit


class UndefinedCorrelationError(NumericalError):
    """Correlation undefined because an input vector has zero variance."""


class MetricError(NumericalError):
    """Metric undefined on the given instance (e.g. no eligible users)."""


class CalibrationError(NumericalError):
    """Synthetic click-rate calibration cannot reach the target ratio."""

    def __init__(self, group_label, target):
        super().__init__(
            f"cannot calibrate group {group_label!r} to positive ratio {target}"
        )
        self.group_label = group_label
        self.target = target
