"""Exception hierarchy shared by the processors, models and the CLI."""


class MofBindError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MofBindError, ValueError):
    pass


class StructureParseError(MofBindError, ValueError):
    pass


class CifParseError(StructureParseError):
    pass


class XyzParseError(StructureParseError):
    pass


class CarveError(MofBindError, ValueError):
    pass


class BasisError(MofBindError, ValueError):
    pass


class IntegralError(MofBindError, RuntimeError):
    pass


class SystemSpecError(MofBindError, ValueError):
    pass


class ScfError(MofBindError, RuntimeError):
    pass


class ConvergenceError(ScfError):
    pass


class SolverError(MofBindError, RuntimeError):
    pass


class EmbeddingError(MofBindError, RuntimeError):
    pass


class LedgerError(MofBindError, KeyError):
    def __str__(self):
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class MissingEnergyError(LedgerError):
    pass


class CacheMismatchError(LedgerError):
    pass


class ReportError(MofBindError, ValueError):
    pass


class PipelineError(MofBindError, RuntimeError):
    pass
