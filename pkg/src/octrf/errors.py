"""Exception types shared across the library.

Every error raised by octrf derives from :class:`OctrfError` so the CLI can
map any failure to a single-line diagnostic and a nonzero exit code.
"""


class OctrfError(Exception):
    """Base class for all octrf errors."""


class ConfigError(OctrfError):
    """Invalid configuration value (bad depth, basis count, thresholds...)."""


class HandleError(OctrfError):
    """A node id does not resolve to a live node."""


class PreconditionError(OctrfError):
    """An operation's structural precondition does not hold."""


class DepthCapError(PreconditionError):
    """Split refused because the leaf already sits at max_depth.

    Distinct from a generic precondition failure so calibration can skip
    depth-capped leaves instead of aborting.
    """


class OutOfBoundsError(OctrfError):
    """A query point lies outside the tree's root cube."""


class InputError(OctrfError):
    """Malformed caller input (non-unit direction, length mismatch...)."""


class StaleBufferError(OctrfError):
    """A per-leaf buffer no longer matches the tree topology."""


class StaleGradientError(OctrfError):
    """Gradients or optimizer state computed against a mutated topology."""


class TreeFileError(OctrfError):
    """Base class for tree-file load failures."""


class BadMagicError(TreeFileError):
    """File does not start with the expected magic bytes."""


class BadVersionError(TreeFileError):
    """File carries an unsupported format version."""


class ChecksumError(TreeFileError):
    """File content does not match its trailing checksum."""


class StructureError(TreeFileError):
    """Decoded nodes violate structural invariants."""


class DatasetError(OctrfError):
    """Dataset directory or its contents cannot be loaded."""


class MissingAssetError(DatasetError):
    """A dataset file referenced by the metadata does not exist."""


class MetadataError(DatasetError):
    """Dataset metadata is unparseable or missing required fields."""


class ImageShapeError(DatasetError):
    """An image's dimensions disagree with the rest of the dataset."""
