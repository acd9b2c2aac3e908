"""Exception hierarchy shared across the harness.

Each class carries the CLI exit code it maps to so the operator surface can
translate failures without a lookup table.
"""


class HarnessError(Exception):
    exit_code = 1


class ConfigError(HarnessError):
    exit_code = 2


class DataContractError(HarnessError):
    exit_code = 4


class CorpusError(DataContractError):
    pass


class SplitError(DataContractError):
    pass


class LeakageError(DataContractError):
    """A target title surfaced on the simulator side."""

    def __init__(self, message, hits=()):
        super().__init__(message)
        self.hits = list(hits)


class ParseError(DataContractError):
    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw


class PreferenceParseError(ParseError):
    pass


class JudgeParseError(ParseError):
    pass


class UpstreamError(HarnessError):
    exit_code = 3


class BackendUnavailable(UpstreamError):
    pass


class ScriptExhausted(HarnessError):
    exit_code = 4


class AdapterUnavailable(UpstreamError):
    pass


class AdapterContractViolation(DataContractError):
    pass


class MetricsError(DataContractError):
    pass
