"""Exception types shared across the harness."""


class HarnessError(Exception):
    """Base class for all domain errors raised by this package."""


# --- binding validation ---

class BindingError(HarnessError):
    pass


class DuplicateKey(BindingError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"shortcut key bound twice: {key!r}")


class DuplicateName(BindingError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"pinned binding name used twice: {name!r}")


class InvalidColor(BindingError):
    def __init__(self, value: str):
        self.value = value
        super().__init__(f"not a 6-hex-digit color: {value!r}")


class InvalidKey(BindingError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"shortcut must be one printable key: {key!r}")


class InvalidName(BindingError):
    def __init__(self, name: str):
        self.name = name
        super().__init__("binding name must be non-empty")


# --- session / run lifecycle ---

class ChecklistIncomplete(HarnessError):
    def __init__(self, unchecked: list[str]):
        self.unchecked = unchecked
        super().__init__(f"unchecked checklist items: {unchecked}")


class StreamUnavailable(HarnessError):
    def __init__(self, stream_id: str):
        self.stream_id = stream_id
        super().__init__(f"stream not ingesting: {stream_id!r}")


class PayloadMismatch(HarnessError):
    pass


class RunNotActive(HarnessError):
    pass


class UnknownId(HarnessError):
    pass


class IllegalKindChange(HarnessError):
    pass


class UnknownEventSource(HarnessError):
    pass


class SpanOutOfRange(HarnessError):
    pass


class OverlappingSpans(HarnessError):
    pass


class OffsetOutOfRange(HarnessError):
    pass


# --- media pipeline ---

class DuplicateStreamId(HarnessError):
    pass


class SourceUnreachable(HarnessError):
    pass


class NoFrameAvailable(HarnessError):
    pass


class AlreadyRecording(HarnessError):
    pass


class NotRecording(HarnessError):
    pass


class ArchiveMissing(HarnessError):
    pass


# --- sync protocol ---

class MalformedFrame(HarnessError):
    pass


class UnknownMsgType(HarnessError):
    pass


class NoSamples(HarnessError):
    pass


class RunIdMismatch(HarnessError):
    pass


# --- analyzer / export ---

class BadHeader(HarnessError):
    pass


class BadRow(HarnessError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"bad CSV row at line {line_no}: {reason}")


class EmptyRunList(HarnessError):
    pass


# --- simulator / cli ---

class SessionNotConfigured(HarnessError):
    pass


class UnknownRun(HarnessError):
    pass


class BadConfig(HarnessError):
    pass
