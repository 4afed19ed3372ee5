"""Exception hierarchy. The CLI maps these onto exit codes."""


class ZSQuantError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(ZSQuantError, ValueError):
    def __init__(self, message, layer_index=None, expected=None, actual=None):
        self.layer_index = layer_index
        self.expected = expected
        self.actual = actual
        parts = [message]
        if layer_index is not None:
            parts.insert(0, f"layer {layer_index}:")
        if expected is not None or actual is not None:
            parts.append(f"(expected {expected}, got {actual})")
        super().__init__(" ".join(parts))


class FormatError(ZSQuantError, ValueError):
    """A file on disk does not follow the expected layout."""

    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class ManifestError(FormatError):
    pass


class BlobLengthError(FormatError):
    pass


class ShapeChainError(ShapeError):
    """Two adjacent (or skip-linked) layers disagree on a shape."""


class InfeasibleError(ZSQuantError, ValueError):
    def __init__(self, message, min_size_bits=None):
        self.min_size_bits = min_size_bits
        super().__init__(message)


class NothingToDistillError(ZSQuantError, ValueError):
    pass
