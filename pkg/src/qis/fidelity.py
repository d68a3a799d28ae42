"""Three-value fidelity analysis and click-weight selection.

For an image taking values p0 (background), p1 (wanted foreground) and p2
(the region a click should add or remove), the two-phase fitting energy
E(c1, c2, G) = sum (I - c1 X_G - c2 X_Gc)^2 restricted to the three candidate
minimizers G in {Omega1, Omega2, Omega1 u Omega2} has the closed forms

    E(G = Omega1)          = (p0 - p2)^2 a2 a0 / (a2 + a0)
    E(G = Omega2)          = (p0 - p1)^2 a1 a0 / (a1 + a0)
    E(G = Omega1 u Omega2) = (p1 - p2)^2 a1 a2 / (a1 + a2)

and adding r on Omega2 simply replaces p2 by p2 + r.  The admissible r
intervals below are exactly the ones that make the desired candidate the
argmin of the shifted energies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .clickmap import POSITIVE, ClickMap
from .errors import DegenerateContrast, EmptyRegion
from .grid import BinaryMask, ScalarField

OMEGA1 = "omega1"
OMEGA2 = "omega2"
UNION = "union"


@dataclass(frozen=True)
class RegionStats:
    """Mean intensities and pixel areas of the three analysis regions."""

    p0: float
    p1: float
    p2: float
    a0: float
    a1: float
    a2: float

    def __post_init__(self):
        if min(self.a0, self.a1, self.a2) <= 0:
            raise EmptyRegion("all three region areas must be positive")

    def shifted(self, r: float) -> "RegionStats":
        """Stats after adding r on Omega2's support."""
        return RegionStats(self.p0, self.p1, self.p2 + r, self.a0, self.a1, self.a2)


@dataclass(frozen=True)
class CanonicalEnergies:
    e_omega1: float
    e_omega2: float
    e_union: float


@dataclass(frozen=True)
class RRange:
    """Admissible click-weight interval; empty when lo > hi."""

    lo: float
    hi: float

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def empty(self) -> bool:
        return self.lo > self.hi


def pixelwise_energy(img: ScalarField, fg: BinaryMask):
    """Optimal constants and fitting energy for foreground fg by direct summation."""
    sel = fg.values.astype(bool)
    n_in = int(sel.sum())
    n_out = sel.size - n_in
    if n_in == 0 or n_out == 0:
        raise EmptyRegion("foreground and complement must both be nonempty")
    v = img.values
    c1 = float(v[sel].mean())
    c2 = float(v[~sel].mean())
    e = float(((v[sel] - c1) ** 2).sum() + ((v[~sel] - c2) ** 2).sum())
    return c1, c2, e


def canonical_energies(stats: RegionStats) -> CanonicalEnergies:
    s = stats
    e1 = (s.p0 - s.p2) ** 2 * s.a2 * s.a0 / (s.a2 + s.a0)
    e2 = (s.p0 - s.p1) ** 2 * s.a1 * s.a0 / (s.a1 + s.a0)
    e12 = (s.p1 - s.p2) ** 2 * s.a1 * s.a2 / (s.a1 + s.a2)
    return CanonicalEnergies(e1, e2, e12)


def predict_minimizer(stats: RegionStats) -> str:
    """Argmin of the three canonical energies, ties broken Union > Omega1 > Omega2."""
    e = canonical_energies(stats)
    best, label = e.e_union, UNION
    if e.e_omega1 < best:
        best, label = e.e_omega1, OMEGA1
    if e.e_omega2 < best:
        best, label = e.e_omega2, OMEGA2
    return label


def r_positive(stats: RegionStats) -> RRange:
    """Click weights r making Omega1 u Omega2 the shifted-energy argmin."""
    s = _require_contrast(stats)
    A = math.sqrt(s.a1 * (s.a2 + s.a0) / (s.a0 * (s.a1 + s.a2)))
    B = math.sqrt(s.a2 * (s.a1 + s.a0) / (s.a0 * (s.a1 + s.a2)))
    d12 = s.p1 - s.p2
    q_x = (d12 * B - (s.p0 - s.p1)) / B
    r_y = (d12 * A + (s.p0 - s.p2)) / (A + 1.0)
    if s.p0 > s.p1:
        return RRange(q_x, r_y)
    return RRange(r_y, q_x)


def r_negative(stats: RegionStats) -> RRange:
    """Click weights r making Omega1 the shifted-energy argmin."""
    s = _require_contrast(stats)
    C = math.sqrt(s.a0 * (s.a2 + s.a1) / (s.a1 * (s.a0 + s.a2)))
    E = math.sqrt(s.a2 * (s.a0 + s.a1) / (s.a1 * (s.a0 + s.a2)))
    d02 = s.p0 - s.p2
    l_y = (d02 * C + (s.p1 - s.p2)) / (C + 1.0)
    p_y = (d02 * E + (s.p0 - s.p1)) / E
    if s.p0 > s.p1:
        return RRange(l_y, p_y)
    return RRange(p_y, l_y)


def _require_contrast(stats: RegionStats) -> RegionStats:
    if stats.p0 == stats.p1:
        raise DegenerateContrast("p0 == p1: wanted region indistinguishable from background")
    return stats


def choose_r(stats: RegionStats, polarity: str):
    """Midpoint of the admissible interval, or the mean-matching fallback.

    When the interval is empty (real-image statistics can violate the
    three-value assumptions) the shift moves Omega2's mean onto the attracting
    region's mean and a warning string is returned alongside.
    """
    rng = r_positive(stats) if polarity == POSITIVE else r_negative(stats)
    if not rng.empty:
        return rng.mid, None
    if polarity == POSITIVE:
        return stats.p1 - stats.p2, "r_range_empty"
    return stats.p0 - stats.p2, "r_range_empty"


def estimate_region_stats(I_prev: ScalarField, fg: BinaryMask, clickmap: ClickMap) -> RegionStats:
    """Region statistics for a real image, from the current mask and click map.

    Positive click: Omega2 = clickmap minus current foreground (what the click
    adds), Omega1 = current foreground.  Negative click: Omega2 = clickmap
    intersected with the foreground (what it removes), Omega1 = the rest of
    the foreground.  Omega0 is always the current background remainder.
    """
    f = fg.values.astype(bool)
    m = clickmap.mask.values.astype(bool)
    if clickmap.polarity == POSITIVE:
        om2 = m & ~f
        om1 = f
        om0 = ~(f | m)
    else:
        om2 = m & f
        om1 = f & ~om2
        om0 = ~f
    v = I_prev.values
    areas = [int(om.sum()) for om in (om0, om1, om2)]
    if min(areas) == 0:
        raise EmptyRegion(
            f"ineffective {clickmap.polarity} click: region areas {areas} contain an empty set")
    p0 = float(v[om0].mean())
    p1 = float(v[om1].mean())
    p2 = float(v[om2].mean())
    return RegionStats(p0, p1, p2, *areas)


def mixed_subset_energy(stats: RegionStats, B0: float, B1: float, B2: float) -> float:
    """Fitting energy when G keeps only part of each region (test oracle).

    B_i is the excluded area of region i, D_i = a_i - B_i the included one;
    the value expands into an included-side and an excluded-side term, each a
    ratio of pairwise contrast products over the side's total area.
    """
    s = stats
    if not (0 <= B0 <= s.a0 and 0 <= B1 <= s.a1 and 0 <= B2 <= s.a2):
        raise ValueError("each B_i must lie in [0, a_i]")
    d12 = abs(s.p1 - s.p2)
    d01 = abs(s.p0 - s.p1)
    d02 = abs(s.p0 - s.p2)
    D0, D1, D2 = s.a0 - B0, s.a1 - B1, s.a2 - B2

    def side(w0, w1, w2):
        tot = w0 + w1 + w2
        if tot <= 0:
            return 0.0
        return (d12 ** 2 * w1 * w2 + d01 ** 2 * w0 * w1 + d02 ** 2 * w0 * w2) / tot

    return side(D0, D1, D2) + side(B0, B1, B2)
