"""Exception hierarchy.

Every failure the toolkit reports on purpose derives from :class:`CordMorphError`,
so callers (and the workflow's per-row error capture) can separate expected,
typed failures from genuine bugs.
"""


class CordMorphError(Exception):
    pass


# --- NIfTI parsing / writing -------------------------------------------------

class NiftiError(CordMorphError, ValueError):
    pass


class NotNifti1(NiftiError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class MultiFrame(NiftiError):
    pass


class InvalidHeader(NiftiError):
    pass


class ValueOverflow(NiftiError):
    pass


class PrecisionLoss(NiftiError):
    pass


# --- volumes and orientation -------------------------------------------------

class InvalidVolume(CordMorphError, ValueError):
    pass


class SingularAffine(InvalidVolume):
    pass


class AmbiguousAxis(InvalidVolume):
    pass


class DegenerateTarget(InvalidVolume):
    pass


# --- geometry ----------------------------------------------------------------

class NotRPI(CordMorphError, ValueError):
    pass


class NotBinary(CordMorphError, ValueError):
    pass


class NoQualifyingSlices(CordMorphError, ValueError):
    pass


# --- segmentation metrics ----------------------------------------------------

class GridMismatch(CordMorphError, ValueError):
    pass


class EmptyReference(CordMorphError, ValueError):
    pass


class EmptyMask(CordMorphError, ValueError):
    pass


# --- drift analytics ---------------------------------------------------------

class InsufficientContrasts(CordMorphError, ValueError):
    pass


class InsufficientSubjects(CordMorphError, ValueError):
    pass


class DivisionByZeroValue(CordMorphError, ZeroDivisionError):
    pass


class NoOverlap(CordMorphError, ValueError):
    pass


class UnknownVersion(CordMorphError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidPolicy(CordMorphError, ValueError):
    pass


class DuplicateRecord(CordMorphError, ValueError):
    pass


class InvalidRecord(CordMorphError, ValueError):
    pass


# --- phantoms and workflow ---------------------------------------------------

class ShapeExceedsGrid(CordMorphError, ValueError):
    pass


class TooFewSubjects(CordMorphError, ValueError):
    pass


class ManifestError(CordMorphError, ValueError):
    pass


class ConfigError(CordMorphError, ValueError):
    pass
