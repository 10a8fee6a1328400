"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2 (argparse's own
convention), :class:`DomainError`/:class:`ArgumentError`/:class:`UnsupportedModelError`
and malformed input files exit 3, :class:`DegenerateDataError` exits 4.
"""


class CoalstatError(Exception):
    """Base class for all errors raised deliberately by this package."""


class DomainError(CoalstatError, ValueError):
    """A model parameter lies outside its mathematical domain."""


class ArgumentError(CoalstatError, ValueError):
    """An operation argument (sample size, index, count...) is out of range."""


class UnsupportedModelError(CoalstatError, TypeError):
    """The operation is not defined for this class of model."""


class DegenerateDataError(CoalstatError, ValueError):
    """Data carry no usable signal (zero tree length, empty loci, all-impossible models)."""


class SpecError(CoalstatError, ValueError):
    """A model or grid spec string cannot be parsed."""


class InvariantError(CoalstatError, RuntimeError):
    """An internal state invariant was violated; indicates a simulator bug."""
