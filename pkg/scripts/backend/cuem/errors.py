"""Exception hierarchy shared by every stage, the service and the CLI."""


class CuemError(Exception):
    """Base class for all engine errors."""


class ValidationError(CuemError, ValueError):
    """A value record was constructed with fields violating its invariants."""


class EmptyQuery(ValidationError):
    pass


class MalformedHistory(ValidationError):
    pass


class PreconditionError(CuemError, ValueError):
    """An operation was called outside its precondition."""


class ConfigError(CuemError):
    pass


class TemplateError(CuemError):
    pass


class BackendUnavailable(CuemError):
    def __init__(self, kind, detail=""):
        self.kind = kind
        super().__init__(f"{kind} unavailable: {detail}" if detail else f"{kind} unavailable")


class UnknownImage(CuemError):
    pass


class NoImage(CuemError):
    pass


class EnrichmentEmpty(CuemError):
    pass


class MissingSentinel(CuemError):
    pass


class UnknownApi(CuemError):
    pass


class ConnectorFailure(CuemError):
    pass


class EmptyReference(CuemError, ValueError):
    pass


class TuningAborted(CuemError):
    """Raised when a backend fails mid-run; `report` holds the scores gathered so far."""

    def __init__(self, report, cause):
        self.report = report
        super().__init__(f"tuning aborted after {len(report.scores)} scores: {cause}")
