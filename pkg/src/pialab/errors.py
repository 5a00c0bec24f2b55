"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI:
  1 -> UsageError / ConfigurationError
  2 -> DataError (ingestion, parsing, record-format problems)
  3 -> NumericError / TrainingError
"""


class PialabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PialabError):
    """Invalid shapes, layer stacks, or option combinations."""


class UsageError(PialabError):
    """API misuse: empty inputs, uninitialized state, bad call order."""


class DataError(PialabError):
    """Dataset ingestion or parsing failure."""


class FormatError(DataError):
    """Corrupt or truncated record/artifact file."""


class SamplingError(DataError):
    """Pool too small to realize a requested draw."""


class TrainingError(PialabError):
    """Non-finite loss or a shadow that cannot reach the accuracy gate."""


class NumericError(PialabError):
    """Non-finite values encountered outside a training loop."""
