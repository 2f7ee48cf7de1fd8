"""Exception hierarchy shared by every stage of the pipeline."""


class CDError(Exception):
    """Base class for all library errors."""


class InvalidInput(CDError, ValueError):
    pass


class DegenerateInput(CDError, ValueError):
    """Raised when a quantity is mathematically undefined (zero norm, constant array)."""


class ShapeError(CDError, ValueError):
    pass


class ParseError(CDError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(CDError, ValueError):
    pass


class FormatError(CDError, ValueError):
    pass


class MissingEmbedding(CDError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyClass(CDError, ValueError):
    pass


class TemplateError(CDError, ValueError):
    pass


class GenerationError(CDError, RuntimeError):
    def __init__(self, message, retries=0):
        self.retries = retries
        super().__init__(f"{message} (after {retries} retries)")


class StubMissingError(CDError, FileNotFoundError):
    pass


class EmptyPool(CDError, ValueError):
    pass


class BudgetError(CDError, ValueError):
    pass


class TrainingError(CDError, RuntimeError):
    pass


class EmptyReport(CDError):
    """No bad cases to attack. A valid outcome, not a failure."""
