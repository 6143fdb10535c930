"""Exception hierarchy for the mcr runtime.

Every error raised by the runtime derives from McrError so callers can
catch runtime faults without swallowing programming errors.
"""


class McrError(Exception):
    """Base class for all runtime errors."""


# --- configuration ---------------------------------------------------------

class ConfigSyntaxError(McrError):
    """Malformed configuration document."""


class DanglingReference(McrError):
    """A rail or driver-config name is referenced but never defined."""


class NoRingRail(McrError):
    """A net option contains no gate-free ring rail."""


class KeyNotFound(McrError):
    """KVS get of a key that was never written."""


# --- multirail / signaling -------------------------------------------------

class NoRouteToProcess(McrError):
    """No existing endpoint passes election and no rail can create one."""


class ConnectTimeout(McrError):
    """Peer did not answer a connection request within the virtual budget."""


class RailClosed(McrError):
    """Operation attempted on a closed rail."""


class RailBusy(McrError):
    """Rail close refused because data frames are still in flight."""


class UnknownRail(McrError):
    """Rail name not present in the active configuration."""


class PeerFailed(McrError):
    """Destination process has been marked killed."""


class TtlExceeded(McrError):
    """Control message exhausted its hop budget."""


class NoProgress(McrError):
    """No neighbor strictly reduces the routing distance (fatal)."""


# --- scheduler -------------------------------------------------------------

class UnknownLane(McrError):
    """Task spawned on a lane id that does not exist."""


class DeadlockError(McrError):
    """Every task is blocked and no event is pending."""

    def __init__(self, message, blocked=None):
        super().__init__(message)
        self.blocked = blocked or []


# --- transparent checkpoint ------------------------------------------------

class CrcMismatch(McrError):
    """Stored checksum does not match file contents."""


class ConfigMismatch(McrError):
    """Restart attempted with a configuration differing from the checkpoint."""


class MissingImage(McrError):
    """Manifest references a process image that cannot be read."""


class DomainError(McrError):
    """Budget arithmetic called with non-positive inputs."""


# --- multilevel checkpoint -------------------------------------------------

class ConfigError(McrError):
    """Invalid erasure-coding group configuration."""


class DuplicateId(McrError):
    """Protected-region id already registered by this task."""


class InsufficientShards(McrError):
    """Fewer than k distinct shards available for decode."""


class Unrecoverable(McrError):
    """No surviving source can reconstruct the requested data."""


class StorageFull(McrError):
    """Simulated storage quota exceeded."""


class HelperBacklog(McrError):
    """Replication queue bound exceeded."""


# --- benchmarks ------------------------------------------------------------

class InvalidStep(McrError):
    """Fault plan step outside the run's iteration range."""


class MismatchedRuns(McrError):
    """Overhead breakdown requested over runs with differing seed/config."""
