"""Exception hierarchy shared by all stages."""


class PdklError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PdklError):
    """Invalid configuration; ``violations`` lists every failed check."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class OutOfDomainError(PdklError):
    pass


class UnsupportedError(PdklError):
    pass


class AlignmentError(PdklError):
    pass


class DivergenceError(PdklError):
    pass


class NumericalError(PdklError):
    pass


class UnderdeterminedError(PdklError):
    pass


class RankDeficiencyError(PdklError):
    def __init__(self, message, deficiency):
        self.deficiency = deficiency
        super().__init__(message)


class CoverageError(PdklError):
    pass


class ReportError(PdklError):
    pass


class UndefinedErrorSignal(ReportError):
    """Relative error requested against an identically zero reference."""


class MissingArtifactError(PdklError):
    pass
