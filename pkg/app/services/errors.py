# ==============================================================================
# Exception hierarchy shared by all services.
# Everything raised on purpose derives from RegionRegError so the entry point
# can tell runtime failures (exit 2) apart from usage errors (exit 1).
# ==============================================================================


class RegionRegError(Exception):
    """Base class for every error raised by the registration services."""


class ConfigError(RegionRegError):
    """Invalid or unknown configuration value."""


# --- diffcore ---

class ShapeMismatchError(RegionRegError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class NonFiniteError(RegionRegError):
    """A forward op produced NaN or Inf."""


class GraphError(RegionRegError):
    """Misuse of a recorded graph (non-scalar backward, double backward)."""


# --- geometry ---

class TransformError(RegionRegError):
    pass


class CloudError(RegionRegError):
    pass


class CloudFormatError(CloudError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


# --- model ---

class PartitionError(RegionRegError):
    pass


class FusionError(RegionRegError):
    pass


class CheckpointError(RegionRegError):
    pass


class TrainingError(RegionRegError):
    pass


# --- data / evaluation ---

class ShapeSpecError(RegionRegError):
    pass


class OccupancyError(RegionRegError):
    pass


class NoiseError(RegionRegError):
    pass


class EvalError(RegionRegError):
    pass
