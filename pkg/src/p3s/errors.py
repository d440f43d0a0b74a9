"""Exception types shared across the toolkit.

The CLI and HTTP service map these onto machine-readable error codes, so
each failure mode the pipeline can hit gets its own class.
"""


class P3SError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class InputError(P3SError):
    code = "bad_input"


class DimensionError(P3SError):
    code = "dimension_mismatch"


class AnnotationError(P3SError):
    code = "point_out_of_bounds"


class DegenerateEncodingError(P3SError):
    code = "degenerate_encoding"


class DegenerateMapError(P3SError):
    """Similarity map has no foreground/background separation."""

    code = "degenerate_map"


class EmptyMaskError(P3SError):
    code = "empty_mask"


class ParameterError(P3SError):
    code = "bad_parameter"


class StateError(P3SError):
    code = "bad_state"


class ConfigError(P3SError):
    """Invalid config file; message names the offending field."""

    code = "bad_config"


class ProtocolError(P3SError):
    code = "protocol_error"


class CompatibilityError(P3SError):
    code = "incompatible"


class StageError(P3SError):
    """Wraps a failure inside a multi-stage pipeline with its stage tag."""

    code = "stage_failure"

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
