"""Exception types shared across the package."""


class MVHumanError(Exception):
    """Base class for all package-specific errors."""


class ParameterShapeError(MVHumanError):
    """Body parameter dimensions do not match the body definition."""


class ConfigError(MVHumanError):
    """A configuration value is inconsistent or unsupported."""


class ShapeMismatchError(MVHumanError):
    """Tensor shapes passed to an operation do not line up."""


class EmptyRenderError(MVHumanError):
    """The subject projects entirely outside the image frame."""


class EmptyObservationError(MVHumanError):
    """A generated image contains no foreground to extract."""


class ConditionError(MVHumanError):
    """A required conditioning input (e.g. reference cache) is missing."""


class CheckpointError(MVHumanError):
    """A checkpoint file or its manifest is missing, corrupt, or mismatched."""


class RefinementError(MVHumanError):
    """Body-parameter optimization hit a non-finite loss.

    Carries the index of the view whose loss term became non-finite.
    """

    def __init__(self, message: str, view_index: int | None = None):
        super().__init__(message)
        self.view_index = view_index


class ViewSetMismatchError(MVHumanError):
    """Two view sets being compared do not cover the same views."""
