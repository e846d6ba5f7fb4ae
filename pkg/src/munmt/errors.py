"""Error hierarchy shared by the library and the CLI exit-code mapping."""


class MunmtError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(MunmtError):
    """Invalid or inconsistent configuration. CLI exit code 2."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(MunmtError):
    """Malformed or missing data (corpora, vocab, manifest). CLI exit code 3."""


class NumericError(MunmtError):
    """Non-finite loss or other numeric failure during training. CLI exit code 4."""


class CheckpointError(DataError):
    """Corrupted or incompatible checkpoint."""
