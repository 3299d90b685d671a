"""Exception hierarchy shared by every module of the package."""


class UPMError(Exception):
    """Base class for all errors raised by this package."""


# Address space
class UnalignedAddress(UPMError, ValueError):
    pass


class OverlappingMapping(UPMError, ValueError):
    pass


class UnmappedRange(UPMError, LookupError):
    pass


class NotPresent(UPMError, LookupError):
    pass


class UnknownProcess(UPMError, LookupError):
    pass


# Dedup engine
class TableBudgetExceeded(UPMError):
    """Advising the range would push the tables past the configured budget."""


class MergeAborted(UPMError):
    """The pre-merge descriptor check saw a page change after comparison."""


class InvariantViolation(UPMError, AssertionError):
    """Internal bookkeeping no longer agrees with a full scan of the state."""


# Metrics
class NoSamples(UPMError, ValueError):
    pass


# Snapshot format
class SnapshotFormatError(UPMError, ValueError):
    """Malformed snapshot file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagic(SnapshotFormatError):
    pass


class TruncatedFile(SnapshotFormatError):
    pass


class DuplicateVaddr(SnapshotFormatError):
    pass


class UnsortedVaddr(SnapshotFormatError):
    pass


class BadPageSize(SnapshotFormatError):
    pass


class BadPageKind(SnapshotFormatError):
    pass


class PageSizeMismatch(UPMError, ValueError):
    pass


class BadSegmentSize(UPMError, ValueError):
    pass


# Workload simulator
class InvalidConfig(UPMError, ValueError):
    pass


class BudgetExceeded(InvalidConfig):
    """Scenario would advise more memory than the engine budget allows."""
