import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropseg.metrics import (
    ConfusionCounts,
    aggregate,
    biou,
    boundary_region,
    confusion,
    default_biou_radius,
    miou,
)
from cropseg.pseudolabel import BinaryMask
from cropseg.raster import Raster2D


def brute_confusion(p, g):
    tp = fp = fn = tn = ig = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if g[i, j] == 255:
                ig += 1
            elif p[i, j] == 1 and g[i, j] == 1:
                tp += 1
            elif p[i, j] == 1:
                fp += 1
            elif g[i, j] == 1:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn, ig


def brute_boundary(a, radius):
    h, w = a.shape

    def at(i, j):
        return a[i, j] if 0 <= i < h and 0 <= j < w else 0

    bnd = [
        [
            any(at(i + di, j + dj) != a[i, j] for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)))
            for j in range(w)
        ]
        for i in range(h)
    ]
    out = np.zeros((h, w), bool)
    for i in range(h):
        for j in range(w):
            out[i, j] = any(
                bnd[i + di][j + dj]
                for di in range(-radius, radius + 1)
                for dj in range(-radius, radius + 1)
                if 0 <= i + di < h and 0 <= j + dj < w
            )
    return out


def brute_biou(p, g, radius):
    pb = p.astype(bool) & brute_boundary(p, radius)
    gb = g.astype(bool) & brute_boundary(g, radius)
    union = np.sum(pb | gb)
    return 100.0 * np.sum(pb & gb) / union if union else 100.0


class TestConfusion:
    def test_identity_has_no_errors(self):
        a = np.eye(4, dtype=np.uint8)
        c = confusion(BinaryMask(Raster2D(a)), Raster2D(a))
        assert c.fp == 0 and c.fn == 0

    def test_all_ignored(self):
        g = np.full((3, 3), 255, np.uint8)
        c = confusion(BinaryMask(Raster2D(np.zeros((3, 3), np.uint8))), Raster2D(g))
        assert (c.tp, c.fp, c.fn, c.tn) == (0, 0, 0, 0)
        assert c.ignored == 9

    def test_counts_partition_the_image(self):
        rng = np.random.default_rng(0)
        p = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        g = rng.choice([0, 1, 255], (16, 16)).astype(np.uint8)
        c = confusion(BinaryMask(Raster2D(p)), Raster2D(g))
        assert c.tp + c.fp + c.fn + c.tn + c.ignored == 256

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_pixel_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(1, 17, 2)
        p = rng.integers(0, 2, (h, w)).astype(np.uint8)
        g = rng.choice([0, 1, 255], (h, w), p=[0.4, 0.4, 0.2]).astype(np.uint8)
        c = confusion(BinaryMask(Raster2D(p)), Raster2D(g))
        assert (c.tp, c.fp, c.fn, c.tn, c.ignored) == brute_confusion(p, g)

    def test_rejects_bad_gt_values(self):
        with pytest.raises(ValueError):
            confusion(
                BinaryMask(Raster2D(np.zeros((2, 2), np.uint8))),
                Raster2D(np.full((2, 2), 7, np.uint8)),
            )


class TestMiou:
    def test_perfect_match(self):
        assert miou(ConfusionCounts(5, 0, 0, 5)) == 100.0

    def test_absent_class_convention(self):
        # all-foreground prediction against all-foreground truth
        assert miou(ConfusionCounts(tp=9, fp=0, fn=0, tn=0)) == 100.0

    def test_arithmetic_example(self):
        assert miou(ConfusionCounts(6, 2, 2, 6)) == pytest.approx(60.0)

    def test_no_pixels_rejected(self):
        with pytest.raises(ValueError):
            miou(ConfusionCounts(0, 0, 0, 0, ignored=4))

    def test_symmetry_without_ignores(self):
        rng = np.random.default_rng(1)
        p = rng.integers(0, 2, (12, 12)).astype(np.uint8)
        g = rng.integers(0, 2, (12, 12)).astype(np.uint8)
        a = miou(confusion(BinaryMask(Raster2D(p)), Raster2D(g)))
        b = miou(confusion(BinaryMask(Raster2D(g)), Raster2D(p)))
        assert a == pytest.approx(b)


class TestBoundaryRegion:
    def test_centered_square(self):
        a = np.zeros((8, 8), np.uint8)
        a[2:6, 2:6] = 1
        band = boundary_region(BinaryMask(Raster2D(a)), 1).raster.data.astype(bool)
        assert np.array_equal(band, brute_boundary(a, 1))

    def test_all_background_is_empty(self):
        band = boundary_region(BinaryMask(Raster2D(np.zeros((6, 6), np.uint8))), 1)
        assert band.coverage == 0.0

    def test_foreground_touching_frame_is_boundary(self):
        band = boundary_region(BinaryMask(Raster2D(np.ones((4, 4), np.uint8))), 1)
        # the frame rule makes the outermost ring boundary
        assert band.raster.data[0, 0] == 1

    def test_saturating_radius_covers_image(self):
        a = np.zeros((8, 8), np.uint8)
        a[3, 3] = 1
        band = boundary_region(BinaryMask(Raster2D(a)), 12)
        assert band.coverage == 1.0

    def test_radius_validation(self):
        with pytest.raises(ValueError):
            boundary_region(BinaryMask(Raster2D(np.zeros((2, 2), np.uint8))), 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_matches_brute_force(self, seed, radius):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(2, 14, 2)
        a = rng.integers(0, 2, (h, w)).astype(np.uint8)
        band = boundary_region(BinaryMask(Raster2D(a)), radius).raster.data.astype(bool)
        assert np.array_equal(band, brute_boundary(a, radius))


class TestBiou:
    def test_identity(self):
        a = np.zeros((8, 8), np.uint8)
        a[2:5, 2:5] = 1
        m = BinaryMask(Raster2D(a))
        assert biou(m, m, 1) == 100.0

    def test_disjoint_boundary_sets(self):
        a = np.zeros((8, 8), np.uint8)
        a[0:2, 0:2] = 1
        b = np.zeros((8, 8), np.uint8)
        b[6:8, 6:8] = 1
        assert biou(BinaryMask(Raster2D(a)), BinaryMask(Raster2D(b)), 1) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(2, 33, 2)
        p = rng.integers(0, 2, (h, w)).astype(np.uint8)
        g = rng.integers(0, 2, (h, w)).astype(np.uint8)
        got = biou(BinaryMask(Raster2D(p)), BinaryMask(Raster2D(g)), 2)
        assert got == pytest.approx(brute_biou(p, g, 2))

    def test_large_radius_converges_to_plain_iou(self):
        rng = np.random.default_rng(2)
        p = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        g = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        if not p.any() or not g.any():
            pytest.skip("degenerate draw")
        inter = np.sum((p == 1) & (g == 1))
        union = np.sum((p == 1) | (g == 1))
        assert biou(BinaryMask(Raster2D(p)), BinaryMask(Raster2D(g)), 40) == pytest.approx(
            100.0 * inter / union
        )


class TestAggregate:
    def test_singleton_equals_per_image(self):
        rng = np.random.default_rng(3)
        p = rng.integers(0, 2, (10, 10)).astype(np.uint8)
        g = rng.integers(0, 2, (10, 10)).astype(np.uint8)
        rep = aggregate([(BinaryMask(Raster2D(p)), Raster2D(g))], radius=1)
        assert rep.miou == pytest.approx(miou(confusion(BinaryMask(Raster2D(p)), Raster2D(g))))
        assert rep.biou == pytest.approx(biou(BinaryMask(Raster2D(p)), BinaryMask(Raster2D(g)), 1))
        assert rep.images == 1

    def test_duplication_invariance(self):
        rng = np.random.default_rng(4)
        p = rng.integers(0, 2, (10, 10)).astype(np.uint8)
        g = rng.integers(0, 2, (10, 10)).astype(np.uint8)
        pair = (BinaryMask(Raster2D(p)), Raster2D(g))
        one = aggregate([pair], radius=1)
        three = aggregate([pair, pair, pair], radius=1)
        assert one.miou == pytest.approx(three.miou)
        assert one.biou == pytest.approx(three.biou)

    def test_hand_summed_counts(self):
        p1 = np.array([[1, 0], [0, 0]], np.uint8)
        g1 = np.array([[1, 1], [0, 0]], np.uint8)
        p2 = np.array([[1, 1], [1, 1]], np.uint8)
        g2 = np.array([[1, 1], [1, 1]], np.uint8)
        rep = aggregate(
            [
                (BinaryMask(Raster2D(p1)), Raster2D(g1)),
                (BinaryMask(Raster2D(p2)), Raster2D(g2)),
            ],
            radius=1,
        )
        # summed counts: tp=5, fp=0, fn=1, tn=2
        assert rep.miou == pytest.approx(100.0 * 0.5 * (5 / 6 + 2 / 3))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_default_radius_rule(self):
        assert default_biou_radius(100, 100) == max(1, round(0.02 * np.hypot(100, 100)))
        assert default_biou_radius(4, 4) == 1

    def test_report_serializes_expected_columns(self):
        a = np.eye(6, dtype=np.uint8)
        rep = aggregate([(BinaryMask(Raster2D(a)), Raster2D(a))], radius=1)
        assert set(rep.to_dict()) == {"miou", "iou_fg", "iou_bg", "biou", "images", "biou_radius"}
