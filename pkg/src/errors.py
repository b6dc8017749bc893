"""Exception types raised across the package. All derive from ValueError so callers can catch broadly."""


class PoseError(ValueError):
    '''Camera pose or intrinsics violate their invariants'''


class RangeError(ValueError):
    '''An index or parameter lies outside its admissible range'''


class BoundsError(ValueError):
    '''A point lies outside the scene bounding volume'''


class ModeError(ValueError):
    '''An operation was called on a plane stack or sample of the wrong mode'''


class ConfigurationError(ValueError):
    '''A run configuration or loss weighting is inconsistent with the data or mode'''


class DatasetError(ValueError):
    '''A scene dataset or detection export is missing files or violates its invariants'''


class CheckpointError(ValueError):
    '''A checkpoint container is truncated, corrupt, or from another version'''


class NonFiniteLossError(ArithmeticError):
    '''A loss term evaluated to NaN or infinity'''

    def __init__(self, term: str, value: float):
        super().__init__(f"Loss term '{term}' is not finite ({value})")
        self.term = term
        self.value = value


class PaletteError(ValueError):
    '''An instance palette is empty, ambiguous, or lacks a requested instance'''
