"""Exception hierarchy shared across the toolkit."""


class CanguardError(Exception):
    """Base class for all toolkit errors."""


class CandumpParseError(CanguardError):
    """A candump log line could not be parsed.

    Carries the 1-based line number and 1-based column of the offending
    character so loaders can report positions.
    """

    kind = "malformed"

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col
        self.message = message


class MalformedTimestampError(CandumpParseError):
    kind = "timestamp"


class OddHexDigitsError(CandumpParseError):
    kind = "odd_hex"


class DataTooLongError(CandumpParseError):
    kind = "data_too_long"


class IdOutOfRangeError(CandumpParseError):
    kind = "id_range"


#: kind string -> exception class, mirrored by both codec lanes
PARSE_ERROR_KINDS = {
    cls.kind: cls
    for cls in (
        CandumpParseError,
        MalformedTimestampError,
        OddHexDigitsError,
        DataTooLongError,
        IdOutOfRangeError,
    )
}


class ObdError(CanguardError):
    """Malformed or mismatched OBD-II PDU."""


class DataFileError(CanguardError):
    """Unreadable, inconsistent, or overly corrupt trace file."""


class SchemaMismatchError(CanguardError):
    """Feature schema does not match the one a model was fitted on."""


class TrainingError(CanguardError):
    """Invalid training inputs (too few samples, unlabeled windows, ...)."""


class DivergenceError(TrainingError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(
            f"non-finite loss at epoch {epoch} (learning_rate={learning_rate}); "
            "lower the learning rate"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


class DegenerateDataError(TrainingError):
    """Input matrix is rank-deficient beyond what the operation supports."""


class BusError(CanguardError):
    """Virtual bus misuse (duplicate node id, stopped bus, bad clock)."""
