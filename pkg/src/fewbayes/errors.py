"""Exception types shared across the toolkit."""


class FewbayesError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(FewbayesError, ValueError):
    """Operands do not satisfy an operation's shape rule."""


class DomainError(FewbayesError, ValueError):
    """Numeric input outside an operation's domain, or a NaN result."""


class ContractError(FewbayesError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(FewbayesError, ValueError):
    """A serialized artifact (dataset file, checkpoint) is malformed."""


class ConfigError(FewbayesError, ValueError):
    """Invalid, inconsistent, or unknown configuration."""
