"""Exception types shared across the package."""


class EptError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(EptError):
    """A file does not conform to its declared binary or text layout."""

    def __init__(self, message, *, offset=None, line=None):
        parts = [message]
        if offset is not None:
            parts.append(f"(byte offset {offset})")
        if line is not None:
            parts.append(f"(line {line})")
        super().__init__(" ".join(parts))
        self.offset = offset
        self.line = line


class SizeMismatchError(FormatError):
    """A file's payload is shorter than its header declares."""


class ValidationError(EptError):
    """Data violates a structural or numeric invariant."""


class InsufficientDataError(EptError):
    """Too few samples to fit the requested model."""


class DegeneracyError(EptError):
    """Model fitting collapsed, e.g. mixture components emptied repeatedly."""


class StageError(EptError):
    """A pipeline stage failed; carries the stage name and the offending file."""

    def __init__(self, stage, message, path=None):
        loc = f" [{path}]" if path else ""
        super().__init__(f"stage '{stage}': {message}{loc}")
        self.stage = stage
        self.path = path
