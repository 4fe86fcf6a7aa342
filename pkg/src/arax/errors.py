"""Exception hierarchy for the arax runtime."""


class AraxError(Exception):
    """Base class for all runtime errors."""


class ArenaError(AraxError):
    """Shared arena creation, attach, or layout problem."""


class ArenaAttachError(ArenaError):
    """Segment exists but its header does not match (magic/version)."""


class OutOfArenaMemory(ArenaError):
    """The arena allocator cannot satisfy a request."""


class AllocatorError(ArenaError):
    """Bad free: double free or an offset that was never allocated."""


class DirectoryFull(AraxError):
    """No free queue-directory slot."""


class HandleTableFull(AraxError):
    """No free buffer-table slot."""


class QueueBusy(AraxError):
    """Release attempted while tasks are still in flight."""


class BufferBusy(AraxError):
    """Free attempted while an in-flight task references the buffer."""


class DeviceOOM(AraxError):
    """Device memory capacity would be exceeded."""


class KernelUnsupported(AraxError):
    """Kernel not available in the target device's kernel set."""


class DuplicateKernel(AraxError):
    """(name, device type) already present in the dispatch table."""


class StubgenError(AraxError):
    """Stub-generator failure (parse, merge, or generation)."""


class HeaderParseError(StubgenError):
    """Syntax error in an API header; carries line/column."""

    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col
