"""Shared exception taxonomy.

Fabric-level errors are infrastructure faults; everything deriving from
TransactionAbort is a normal protocol outcome that the engine turns into a
retry or a reported abort reason.
"""


class FabricError(Exception):
    pass


class AddressOutOfBounds(FabricError):
    pass


class Misaligned(FabricError):
    pass


class ServerUnavailable(FabricError):
    pass


class UnknownServer(FabricError):
    pass


class HandlerError(FabricError):
    """Application error raised inside a two-sided handler, re-raised at the caller."""


class TransactionAbort(Exception):
    reason = "abort"


class Conflict(TransactionAbort):
    """Write-set validation failed (CAS lost against a concurrent committer)."""
    reason = "conflict"


class VersionChanged(Conflict):
    """Header CAS witnessed a different header; carries the witnessed word."""

    def __init__(self, witnessed: int):
        super().__init__(f"header changed: {witnessed:#018x}")
        self.witnessed = witnessed


class BufferStall(TransactionAbort):
    """Old-version buffer slot not yet moved; mover lagging past the bounded wait."""
    reason = "buffer_stall"


class VersionGarbageCollected(TransactionAbort):
    """No retained version is visible under the requested snapshot."""
    reason = "garbage_collected"


class VersionNotFound(TransactionAbort):
    """Record was never visible under the snapshot (inserted later, or deleted)."""
    reason = "not_found"


class Infrastructure(TransactionAbort):
    """ServerUnavailable surfaced mid-transaction."""
    reason = "infrastructure"


class KeyNotFound(Exception):
    pass


class DuplicateKey(Exception):
    pass


class OutOfMemory(Exception):
    pass


class UnknownObject(Exception):
    pass


class OracleExhausted(Exception):
    """A thread's 32-bit commit counter overflowed."""


class StalePending(Exception):
    """vector_next_commit called again before the previous cts was published."""


class ConfigFrozen(Exception):
    """Oracle mode change attempted after transactions started."""


class ReplayError(Exception):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at {position})")
        self.position = position


class IncompleteHistory(Exception):
    """Event capture dropped events; the checker refuses to run."""


class SimulatedCrash(Exception):
    """Raised by an injected crash hook; not a transaction outcome."""
