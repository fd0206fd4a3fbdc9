"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Shapes, axes, or extents are inconsistent with an operation."""


class DomainError(ValueError):
    """Input values lie outside an operation's mathematical domain."""


class ContractError(ValueError):
    """An API precondition was violated (e.g. non-scalar backward root)."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class IntegrityError(RuntimeError):
    """A serialized artifact is corrupt, truncated, or has a bad checksum."""


class UnsupportedVersionError(IntegrityError):
    """A serialized artifact has a version this build cannot read."""
