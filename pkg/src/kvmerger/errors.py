"""Exception hierarchy shared across the package.

The split mirrors the CLI exit-code contract: usage problems (1),
data/format problems (2), invariant violations (3).
"""


class KVMergerError(Exception):
    """Base class for all package errors."""


class TraceFormatError(KVMergerError):
    """File is not a KVTR trace (bad magic, unsupported version)."""


class TraceCorruptionError(KVMergerError):
    """Header and payload disagree (truncated or padded tensor data)."""


class TraceDataError(KVMergerError):
    """Well-formed file carrying invalid data (non-finite values, odd dim)."""


class ConfigError(KVMergerError, ValueError):
    """Inconsistent merge configuration."""


class UndefinedSimilarityError(KVMergerError, ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class InvariantViolation(KVMergerError):
    """A runtime self-check failed; maps to CLI exit code 3."""
