"""Exception hierarchy shared by all pipeline stages."""


class KnotPairError(ValueError):
    """Base class for validation failures raised by this package."""


class FormatError(KnotPairError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(KnotPairError):
    """Malformed text input. ``line`` is 1-based."""

    def __init__(self, message: str, line: int, source: str | None = None):
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.source = source


class AssemblyError(KnotPairError):
    def __init__(self, message: str, key: tuple):
        super().__init__(f"{message} for key {key}")
        self.key = key


class DataError(KnotPairError):
    pass


class ConfigError(KnotPairError):
    pass
