"""Exception hierarchy shared by every hnpm module."""


class HNPMError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(HNPMError, ValueError):
    pass


class DomainError(HNPMError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class DegenerateInputError(DomainError):
    """Division by a zero norm (all-zero row or vector)."""


class DegenerateRepresentationError(DegenerateInputError):
    pass


class DegenerateBatchError(DomainError):
    """Every mined negative of some anchor coincides with the anchor."""


class ContractError(HNPMError, ValueError):
    pass


class ConfigError(HNPMError, ValueError):
    pass


class FormatError(HNPMError, ValueError):
    pass


class IntegrityError(HNPMError):
    """Checkpoint bytes fail the checksum or are truncated."""


class VersionError(HNPMError):
    pass
