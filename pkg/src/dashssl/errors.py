"""Exception types shared across the package."""


class DashError(Exception):
    """Base class for package-specific failures."""


class ConfigError(DashError):
    """A configuration file, override, or run setup is invalid."""


class CapExceededError(ConfigError):
    """A geometrically growing batch size exceeded the hard cap."""

    def __init__(self, step: int, n_requested: int, cap: int):
        self.step = step
        self.n_requested = n_requested
        self.cap = cap
        super().__init__(
            f"batch size {n_requested} at step t={step} exceeds the cap {cap}"
        )


class DivergenceError(DashError):
    """The optimizer produced a non-finite loss or parameter value."""

    def __init__(self, step: int, detail: str = "non-finite value"):
        self.step = step
        super().__init__(f"divergence at step {step}: {detail}")


class InfeasibleConstantsError(DashError):
    """The theoretical constants cannot be instantiated for the given inputs."""
