"""Exception types raised across the package.

Each validation failure reports the first violated invariant only. File
input problems reuse the built-in OSError; everything below is about
content, not I/O plumbing.
"""

from __future__ import annotations


class PrimfitError(Exception):
    """Base class for all package-specific errors."""


# --- scene validation ---

class InvalidScale(PrimfitError):
    """Primitive scale is not a positive finite number."""


class BadTemplateRef(PrimfitError):
    """Primitive references a template index outside the scene's table."""


class NonPermutationZ(PrimfitError):
    """Scene depth values are not a permutation of 0..N-1."""


class BadChannelRange(PrimfitError):
    """Template texel values fall outside [0, 1]."""


# --- array plumbing ---

class LengthMismatch(PrimfitError):
    """Two sequences that must align have different lengths."""


class ShapeMismatch(PrimfitError):
    """An array has the wrong shape for the operation."""


class LayoutMismatch(PrimfitError):
    """A packed parameter vector does not match the given layout."""


# --- differentiation ---

class StaleSavedState(PrimfitError):
    """Saved forward products were built from a different scene."""


# --- fitting ---

class MissingAlphaTarget(PrimfitError):
    """Spatially constrained loss requires a target alpha plane."""


class InfeasibleDensity(PrimfitError):
    """Requested primitive count cannot satisfy the per-pixel density cap."""


# --- scene files and images ---

class DecodeError(PrimfitError):
    """File bytes could not be decoded as the claimed image format."""


class UnsupportedFormat(PrimfitError):
    """File extension or pixel layout is not supported."""


class VersionMismatch(PrimfitError):
    """Scene file was written by an incompatible format version."""


class CorruptScene(PrimfitError):
    """Scene file failed structural or checksum validation."""


class DegenerateBBox(PrimfitError):
    """Primitive bounding box contains no canvas pixels."""
