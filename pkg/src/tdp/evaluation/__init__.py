"""Codec ladders, quality metrics and BD-rate analysis.

Names from :mod:`tdp.evaluation.rd` are re-exported lazily so the stub codec
subprocess does not pay for importing scipy.
"""

_RD_NAMES = ("BdbrResult", "HeatMap", "MonotoneViolationWarning", "RdCurve", "RdPoint", "bad_case_rate", "bdbr",
             "complexity_heatmap", "normalized_complexity")

__all__ = list(_RD_NAMES)


def __getattr__(name):
    if name in _RD_NAMES:
        from . import rd
        return getattr(rd, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
