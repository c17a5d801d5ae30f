"""Exception types shared across the toolkit."""


class PlanksynthError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PlanksynthError):
    """Invalid configuration (bad ranges, empty pools, tile <= overlap, ...)."""


class DegenerateTransformError(PlanksynthError):
    """An affine transform shrank a mask to zero area; the caller may re-draw."""


class MalformedMaskError(PlanksynthError):
    """RLE runs are negative or do not sum to the mask frame size."""


class BrokenTaxonomyError(PlanksynthError):
    """A taxon's ancestor chain does not reach the requested rank."""


class ManifestError(PlanksynthError):
    """A manifest or detection file violates the schema; names the record."""


class MalformedPartitionError(PlanksynthError):
    """Visible/masked token index lists overlap or do not cover the grid."""
