"""Exception types shared across the package."""


class ConfigError(Exception):
    """A network, layer or run is wired inconsistently with its configuration."""


class SizeError(ValueError):
    """An input image has the wrong spatial size for the consuming network.

    Carries ``expected`` (one or more accepted sizes) and ``actual`` so that
    dispatch code can react instead of parsing messages.
    """

    def __init__(self, expected, actual, what="input"):
        self.expected = expected
        self.actual = tuple(actual)
        super().__init__(f"{what} size {self.actual} not accepted, expected {expected}")


class VerificationError(Exception):
    """A numerical verification (gradient check) could not be completed."""
