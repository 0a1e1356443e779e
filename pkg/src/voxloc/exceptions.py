"""Exception hierarchy shared across the package."""


class VoxLocError(Exception):
    """Base class for all voxloc errors."""


# geometry
class NonPositiveDepth(VoxLocError):
    """Point has non-positive depth in the camera frame."""


# descriptors
class BorderViolation(VoxLocError):
    """Patch window would exit the image."""


class ZeroVector(VoxLocError):
    """Cosine similarity is undefined for (near-)zero vectors."""


class ChannelMismatch(VoxLocError):
    """Descriptor channel counts disagree."""


# triangulation
class DegenerateGeometry(VoxLocError):
    """Triangulation geometry is degenerate (no baseline or ambiguous direction)."""


class NonConvergence(VoxLocError):
    """Iterative refinement did not converge within the iteration budget."""


class NegativeDepth(VoxLocError):
    """Inverse depth was driven to zero or below during refinement."""


# voxel
class OutOfBounds(VoxLocError):
    """Sample point lies outside the voxel cube beyond the allowed slack."""


# renderer
class NoIntersection(VoxLocError):
    """Ray does not hit the voxel cube."""


class OutOfFrustum(VoxLocError):
    """Voxel center does not project inside the image with the required margin."""


# trainer
class Divergence(VoxLocError):
    """Training loss became non-finite."""


# relocalizer
class DegenerateConfiguration(VoxLocError):
    """Minimal PnP set is degenerate (collinear points)."""


class InsufficientCorrespondences(VoxLocError):
    """Fewer correspondences than the minimal sample size."""


class NoModelFound(VoxLocError):
    """RANSAC failed to find a model with enough inliers."""


class LocalizationFailed(VoxLocError):
    """First localization iteration produced no pose."""


# mapstore
class MapFormatError(VoxLocError):
    """Base class for map (de)serialization failures."""


class BadMagic(MapFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(MapFormatError):
    """File version is not supported."""


class CorruptPayload(MapFormatError):
    """File is truncated or contains non-finite values."""


class IoFailure(VoxLocError):
    """Underlying I/O operation failed."""
