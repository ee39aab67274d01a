class ClpmError(Exception):
    """
    Base class for every error the clpm library raises on purpose.  The management command turns these into a
    CommandError so the process exits with status 1 and the message is shown to the user.
    """


class DataError(ClpmError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super(ParseError, self).__init__(message)


class ConfigError(ClpmError):
    pass


class ModelError(ClpmError):
    pass


class NonFiniteLossError(ClpmError):
    def __init__(self, epoch, term, value=None):
        self.epoch = epoch
        self.term = term
        self.value = value
        super(NonFiniteLossError, self).__init__(
            f"non-finite loss at epoch {epoch} in the {term} term (value={value})")


class EvaluationError(ClpmError):
    pass
