"""Exception types shared across the pipeline."""


class ValidationError(ValueError):
    """Input violates a documented contract (shape, range, label set, ...)."""


class LoadError(IOError):
    """A dataset or checkpoint artifact is missing or malformed."""


class NoEligibleSegment(RuntimeError):
    """No superpixel satisfies the pseudo-label area constraints.

    Callers are expected to resample a different slice; training counts the
    episode as skipped.
    """


class EmptyClassMask(RuntimeError):
    """A class has no positive pixel at the resolution where it is needed."""


class ConfigError(ValueError):
    """Configuration file violates the published schema.

    Carries the full list of violations, not just the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the iteration and episode seed."""

    def __init__(self, iteration, episode_seed, message="non-finite loss"):
        self.iteration = iteration
        self.episode_seed = episode_seed
        super().__init__(
            f"{message} at iteration {iteration} (episode seed {episode_seed})"
        )
