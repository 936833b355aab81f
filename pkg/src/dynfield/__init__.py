"""Condition-driven dynamic radiance fields with reference-image warping.

Submodules are imported lazily so that process-level knobs (thread caps via
the DFRF_THREADS environment variable) can take effect before numpy loads.
"""

__version__ = "0.1.0"

_DIFFMATH_EXPORTS = {
    "DTensor",
    "NumericalError",
    "ShapeError",
    "Tape",
    "get_profile",
    "set_profile",
}

__all__ = sorted(_DIFFMATH_EXPORTS)


def __getattr__(name):
    if name in _DIFFMATH_EXPORTS:
        from dynfield import diffmath

        return getattr(diffmath, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | _DIFFMATH_EXPORTS)
