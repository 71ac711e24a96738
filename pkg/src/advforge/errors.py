"""Exception hierarchy shared across the toolkit."""


class AdvforgeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AdvforgeError):
    """Invalid or inconsistent run configuration."""


class ContractError(AdvforgeError):
    """A caller violated an operation precondition (shapes, ranges, indices)."""


class RegistryError(AdvforgeError):
    """Unknown model id or malformed registry entry."""


class IntegrityError(AdvforgeError):
    """Stored artifact does not match its recorded content hash."""


class CurationError(AdvforgeError):
    """Dataset problem discovered while building partitions or pools."""


class NonFiniteError(AdvforgeError):
    """An optimization produced NaN/Inf values and was aborted."""
