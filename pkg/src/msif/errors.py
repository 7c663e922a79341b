"""Exception hierarchy shared across the package."""


class MsifError(Exception):
    """Base class for all errors raised by msif."""


class DifferentiationError(MsifError):
    """A loss or derivative evaluated to a non-finite value."""

    def __init__(self, message, segment=None):
        super().__init__(message if segment is None else f"{message} (segment {segment!r})")
        self.segment = segment


class SegmentError(MsifError):
    """Unknown, duplicated or overlapping parameter segment."""


class DataFormatError(MsifError):
    """Malformed IDX payload or inconsistent dataset description."""


class TrainingDivergedError(MsifError):
    def __init__(self, stage, step, objective):
        super().__init__(f"{stage} training diverged at step {step} (objective={objective!r})")
        self.stage = stage
        self.step = step
        self.objective = objective


class CheckpointFormatError(MsifError):
    """Wrong magic, unsupported version, corrupt table or checksum mismatch."""


class SolverError(MsifError):
    pass


class InfluenceError(MsifError):
    """Influence requested for an incompatible checkpoint or configuration."""


class ConfigError(MsifError):
    pass


class ScenarioError(MsifError):
    pass
