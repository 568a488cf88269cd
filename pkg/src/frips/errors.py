"""Exception types raised by the sampler stack."""


class CutLocusError(ValueError):
    """A logarithm was requested for a point on (or numerically at) the cut locus."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class CapabilityError(TypeError):
    """The target, manifold or backbone lacks a capability the call needs."""


class DegenerateEnsembleError(RuntimeError):
    """Every importance weight vanished, so no ensemble can be formed."""


class ClassificationError(ValueError):
    """No mixture component has finite density at the classified point."""


class ConfigError(ValueError):
    """Invalid experiment configuration.

    ``line`` is the 1-based line in the configuration file the problem refers
    to, when it can be located.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {msg}"
        return msg
