"""1-D prediction intervals, possibly disconnected or unbounded."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InputError


@dataclass
class PredictionInterval:
    """Union of disjoint closed intervals for one coordinate.

    Pieces are (lo, hi) pairs in meters, sorted and non-overlapping;
    lo = -inf or hi = +inf mark unbounded pieces.  delta is the nominal
    miscoverage level the set was built for.
    """

    pieces: list
    delta: float

    def __post_init__(self):
        self.pieces = [(float(lo), float(hi)) for lo, hi in self.pieces]
        for lo, hi in self.pieces:
            if lo > hi:
                raise InputError(f"interval piece [{lo}, {hi}] is inverted")
        for (_, hi_prev), (lo_next, _) in zip(self.pieces, self.pieces[1:]):
            if lo_next <= hi_prev:
                raise InputError("interval pieces must be sorted and disjoint")

    @property
    def is_empty(self):
        return not self.pieces

    @property
    def is_unbounded(self):
        return any(math.isinf(lo) or math.isinf(hi) for lo, hi in self.pieces)

    @property
    def total_width(self):
        return sum(hi - lo for lo, hi in self.pieces)

    def contains(self, x):
        """Closed-endpoint membership."""
        return any(lo <= x <= hi for lo, hi in self.pieces)

    def clip(self, lo, hi):
        """Intersect with [lo, hi]; drops pieces that fall outside."""
        clipped = []
        for a, b in self.pieces:
            a2, b2 = max(a, lo), min(b, hi)
            if a2 <= b2:
                clipped.append((a2, b2))
        return PredictionInterval(clipped, self.delta)
