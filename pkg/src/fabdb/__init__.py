"""fabdb: a desk-scale snapshot-isolation engine over a simulated memory fabric.

Stateless compute threads execute transactions against passive memory servers
through one-sided verbs; commit visibility is a timestamp vector with one slot
per execution thread. See README.md for the tour.
"""

from .errors import (
    AddressOutOfBounds,
    BufferStall,
    Conflict,
    DuplicateKey,
    HandlerError,
    Infrastructure,
    KeyNotFound,
    OracleExhausted,
    OutOfMemory,
    ServerUnavailable,
    StalePending,
    TransactionAbort,
    UnknownObject,
    VersionChanged,
    VersionGarbageCollected,
    VersionNotFound,
)
from .fabric import Fabric, LatencyProfile, MemoryServer, RemoteAddr, VerbCompletion
from .memstore import RecordLayout, RecordStore, VersionHeader, header_decode, header_encode
from .oracle import CommitTimestamp, NaiveOracle, OracleOptions, VectorOracle, is_visible
from .txn import Cluster, ClusterConfig

__version__ = "0.1.0"

__all__ = [
    "AddressOutOfBounds", "BufferStall", "Cluster", "ClusterConfig", "CommitTimestamp",
    "Conflict", "DuplicateKey", "Fabric", "HandlerError", "Infrastructure", "KeyNotFound",
    "LatencyProfile", "MemoryServer", "NaiveOracle", "OracleExhausted", "OracleOptions",
    "OutOfMemory", "RecordLayout", "RecordStore", "RemoteAddr", "ServerUnavailable",
    "StalePending", "TransactionAbort", "UnknownObject", "VectorOracle", "VerbCompletion",
    "VersionChanged", "VersionGarbageCollected", "VersionHeader", "VersionNotFound",
    "header_decode", "header_encode", "is_visible",
]
