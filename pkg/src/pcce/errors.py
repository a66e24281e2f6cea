"""Exception hierarchy shared by all pcce modules."""


class PcceError(Exception):
    """Base class for all pcce errors."""


class FormatError(PcceError):
    """A file does not conform to its declared on-disk format."""


class UnsupportedContentError(PcceError):
    """A file is structurally valid but carries content we do not handle."""


class ValidationError(PcceError):
    """Content violates a data contract (range, integrality, uniqueness)."""


class ContractError(PcceError):
    """An operation was called with arguments violating its preconditions."""


class CapacityError(PcceError):
    """A result would exceed a configured size limit."""


class ExternalToolError(PcceError):
    """An external command failed or is unavailable."""
