import math

import numpy as np
import pytest

from qis import fidelity as F
from qis.clickmap import Click, ClickMap
from qis.errors import DegenerateContrast, EmptyRegion
from qis.grid import BinaryMask, ScalarField


def synth_three_value(p, a, width=25):
    """Row-major packing of a0+a1+a2 pixels into a rectangle, plus the two masks."""
    total = sum(a)
    height = total // width
    assert height * width == total
    flat = np.concatenate([np.full(a[0], float(p[0])),
                           np.full(a[1], float(p[1])),
                           np.full(a[2], float(p[2]))])
    regions = np.concatenate([np.zeros(a[0]), np.ones(a[1]), np.full(a[2], 2)])
    img = ScalarField(flat.reshape(height, width))
    regions = regions.reshape(height, width)
    masks = {
        F.OMEGA1: BinaryMask((regions == 1).astype(np.uint8)),
        F.OMEGA2: BinaryMask((regions == 2).astype(np.uint8)),
        F.UNION: BinaryMask((regions >= 1).astype(np.uint8)),
    }
    return img, masks


def random_stats(rng):
    p = rng.uniform(0, 255, 3)
    while abs(p[0] - p[1]) < 1e-6:
        p = rng.uniform(0, 255, 3)
    a = rng.uniform(50, 5000, 3)
    return F.RegionStats(*p, *a)


def test_pixelwise_constant_image():
    img = ScalarField(np.full((6, 6), 7.0))
    fg = np.zeros((6, 6), np.uint8)
    fg[2:4, 2:4] = 1
    c1, c2, e = F.pixelwise_energy(img, BinaryMask(fg))
    assert (c1, c2, e) == (7.0, 7.0, 0.0)


def test_pixelwise_two_level_exact_fit():
    fg = np.zeros((6, 6), np.uint8)
    fg[:3] = 1
    img = ScalarField(np.where(fg, 200.0, 50.0))
    c1, c2, e = F.pixelwise_energy(img, BinaryMask(fg))
    assert (c1, c2) == (200.0, 50.0) and e < 1e-18


def test_pixelwise_union_closed_form():
    img, masks = synth_three_value((0, 1, 2), (100, 50, 25))
    _, _, e = F.pixelwise_energy(img, masks[F.UNION])
    assert e == pytest.approx(50.0 / 3.0, rel=1e-12)


def test_canonical_energies_frozen_values():
    e = F.canonical_energies(F.RegionStats(0, 1, 2, 100, 50, 25))
    assert e.e_omega1 == pytest.approx(80.0, rel=1e-12)
    assert e.e_omega2 == pytest.approx(100.0 / 3.0, rel=1e-12)
    assert e.e_union == pytest.approx(50.0 / 3.0, rel=1e-12)


def test_canonical_vs_pixelwise_random():
    rng = np.random.RandomState(0)
    for _ in range(20):
        p = rng.uniform(0, 255, 3)
        a = tuple(int(x) * 25 for x in rng.randint(2, 40, 3))
        img, masks = synth_three_value(p, a)
        stats = F.RegionStats(*p, *a)
        e = F.canonical_energies(stats)
        for name, closed in ((F.OMEGA1, e.e_omega1), (F.OMEGA2, e.e_omega2),
                             (F.UNION, e.e_union)):
            _, _, brute = F.pixelwise_energy(img, masks[name])
            assert brute == pytest.approx(closed, rel=1e-9, abs=1e-9)


def test_predict_minimizer_example_and_ties():
    assert F.predict_minimizer(F.RegionStats(0, 1, 2, 100, 50, 25)) == F.UNION
    # p0 == p2 makes E(Omega1) vanish
    assert F.predict_minimizer(F.RegionStats(5, 100, 5, 10, 10, 10)) == F.OMEGA1
    # exact three-way tie resolves by the fixed priority
    assert F.predict_minimizer(F.RegionStats(0, 1, 1, 10, 10, 10)) in (F.UNION,)


def test_predict_matches_bruteforce_argmin():
    rng = np.random.RandomState(1)
    for _ in range(300):
        stats = random_stats(rng)
        e = F.canonical_energies(stats)
        table = {F.OMEGA1: e.e_omega1, F.OMEGA2: e.e_omega2, F.UNION: e.e_union}
        best = min(table.values())
        ties = [k for k, v in table.items() if v == best]
        if len(ties) == 1:
            assert F.predict_minimizer(stats) == ties[0]


def test_r_positive_frozen_example():
    stats = F.RegionStats(0, 100, 200, 100, 50, 25)
    rng_r = F.r_positive(stats)
    # A = sqrt(5/6), B = sqrt(1/2); endpoints frozen from the closed forms
    assert rng_r.lo == pytest.approx(-100.0 * (math.sqrt(5.0 / 6.0) + 2.0)
                                     / (math.sqrt(5.0 / 6.0) + 1.0), rel=1e-12)
    assert rng_r.hi == pytest.approx(100.0 * (math.sqrt(2.0) - 1.0), rel=1e-12)
    assert rng_r.lo == pytest.approx(-152.277, abs=1e-3)
    assert rng_r.hi == pytest.approx(41.421, abs=1e-3)
    assert rng_r.mid == pytest.approx(-55.428, abs=1e-3)
    shifted = stats.shifted(rng_r.mid)
    assert F.predict_minimizer(shifted) == F.UNION


def test_r_positive_a_equals_one_finite():
    stats = F.RegionStats(10, 200, 90, 300, 300, 120)   # a1 == a0 -> A == 1
    rng_r = F.r_positive(stats)
    assert math.isfinite(rng_r.lo) and math.isfinite(rng_r.hi)


def test_r_negative_c_equals_one_endpoint():
    # C == 1 when a0 == a1; the first endpoint collapses to (p1 + p0 - 2 p2) / 2
    p0, p1, p2 = 200.0, 90.0, 140.0
    stats = F.RegionStats(p0, p1, p2, 500, 500, 200)
    rng_r = F.r_negative(stats)
    expected = (p1 + p0 - 2 * p2) / 2
    assert rng_r.lo == pytest.approx(expected, rel=1e-12)


def test_r_negative_branch_selection():
    stats = F.RegionStats(200, 100, 0, 100, 80, 60)
    rng_r = F.r_negative(stats)
    assert rng_r.lo <= rng_r.hi  # p0 > p1 ordering branch


def test_r_theorem_soundness():
    rng = np.random.RandomState(2)
    for maker, want in ((F.r_positive, F.UNION), (F.r_negative, F.OMEGA1)):
        done = 0
        tries = 0
        while done < 500 and tries < 200000:
            tries += 1
            stats = random_stats(rng)
            r_range = maker(stats)
            if r_range.empty:
                continue
            done += 1
            for frac in (0.5, 0.25, 0.75):
                r = r_range.lo + frac * (r_range.hi - r_range.lo)
                assert F.predict_minimizer(stats.shifted(r)) == want
        assert done == 500


def test_branch_symmetry_under_negation():
    rng = np.random.RandomState(3)
    for _ in range(100):
        s = random_stats(rng)
        neg = F.RegionStats(-s.p0, -s.p1, -s.p2, s.a0, s.a1, s.a2)
        for maker in (F.r_positive, F.r_negative):
            a = maker(s)
            b = maker(neg)
            assert b.lo == pytest.approx(-a.hi, rel=1e-9, abs=1e-9)
            assert b.hi == pytest.approx(-a.lo, rel=1e-9, abs=1e-9)


def test_degenerate_contrast_raises():
    with pytest.raises(DegenerateContrast):
        F.r_positive(F.RegionStats(5, 5, 9, 10, 10, 10))


def test_ranges_nonempty_for_valid_stats():
    # the ordering relations in the interval derivations make every valid
    # stats tuple produce a nonempty range; the fallback is purely defensive
    rng = np.random.RandomState(4)
    for _ in range(2000):
        stats = random_stats(rng)
        assert not F.r_positive(stats).empty
        assert not F.r_negative(stats).empty


def test_choose_r_midpoint_and_fallback(monkeypatch):
    stats = F.RegionStats(0, 100, 200, 100, 50, 25)
    r, warn = F.choose_r(stats, "pos")
    assert warn is None and r == pytest.approx(F.r_positive(stats).mid)
    monkeypatch.setattr(F, "r_positive", lambda s: F.RRange(1.0, -1.0))
    monkeypatch.setattr(F, "r_negative", lambda s: F.RRange(1.0, -1.0))
    r, warn = F.choose_r(stats, "pos")
    assert warn == "r_range_empty" and r == pytest.approx(stats.p1 - stats.p2)
    r, warn = F.choose_r(stats, "neg")
    assert warn == "r_range_empty" and r == pytest.approx(stats.p0 - stats.p2)


def test_estimate_region_stats_exact_recovery():
    img, masks = synth_three_value((10, 120, 230), (200, 150, 150), width=25)
    cm = ClickMap(masks[F.OMEGA2], (Click(0, 0, "pos"),), "pos")
    stats = F.estimate_region_stats(img, masks[F.OMEGA1], cm)
    assert (stats.p0, stats.p1, stats.p2) == (10.0, 120.0, 230.0)
    assert (stats.a0, stats.a1, stats.a2) == (200, 150, 150)
    assert stats.a0 + stats.a1 + stats.a2 == img.values.size


def test_estimate_region_stats_negative_set_algebra():
    img, masks = synth_three_value((10, 120, 230), (200, 150, 150), width=25)
    cm = ClickMap(masks[F.OMEGA2], (Click(0, 0, "neg"),), "neg")
    stats = F.estimate_region_stats(img, masks[F.UNION], cm)
    assert stats.a2 == 150 and stats.a1 == 150 and stats.a0 == 200


def test_estimate_region_stats_ineffective():
    img, masks = synth_three_value((10, 120, 230), (200, 150, 150), width=25)
    cm = ClickMap(masks[F.OMEGA2], (Click(0, 0, "neg"),), "neg")
    with pytest.raises(EmptyRegion):
        F.estimate_region_stats(img, masks[F.OMEGA1], cm)   # disjoint from fg


def test_mixed_subset_corners():
    rng = np.random.RandomState(5)
    for _ in range(20):
        s = random_stats(rng)
        e = F.canonical_energies(s)
        assert F.mixed_subset_energy(s, s.a0, 0, s.a2) == pytest.approx(e.e_omega1, rel=1e-9)
        assert F.mixed_subset_energy(s, s.a0, 0, 0) == pytest.approx(e.e_union, rel=1e-9)
        assert F.mixed_subset_energy(s, s.a0, s.a1, 0) == pytest.approx(e.e_omega2, rel=1e-9)


def test_mixed_subset_interior_above_min_and_concave():
    rng = np.random.RandomState(6)
    for _ in range(20):
        s = random_stats(rng)
        e = F.canonical_energies(s)
        floor = min(e.e_omega1, e.e_omega2, e.e_union)
        b0 = 0.4 * s.a0
        b2 = 0.6 * s.a2
        b1s = np.linspace(0, s.a1, 33)
        vals = np.array([F.mixed_subset_energy(s, b0, b1, b2) for b1 in b1s])
        assert vals.min() >= floor - 1e-9 * (1 + abs(floor))
        # dF/dB1 monotone decreasing <=> differences non-increasing
        diffs = np.diff(vals)
        assert np.all(np.diff(diffs) <= 1e-7 * (1 + np.abs(diffs[:-1]).max()))
