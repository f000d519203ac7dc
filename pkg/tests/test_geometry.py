import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsodkit.geometry import (
    Box,
    InvalidBox,
    ZeroAreaAfterClip,
    clip_box,
    decode_deltas,
    encode_deltas,
    greedy_diverse_select,
    iou,
    iou_matrix,
    nms,
)

# quarter-pixel grid keeps distinct boxes distinguishable in float arithmetic
coord = st.integers(min_value=0, max_value=400).map(lambda v: v / 4)
side = st.integers(min_value=2, max_value=200).map(lambda v: v / 4)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    return Box(x1, y1, x1 + draw(side), y1 + draw(side))


def brute_iou(a: Box, b: Box, step: float = 0.5) -> float:
    """Pixel-count IoU on a half-unit grid (exact for half-integer coordinates)."""
    xs = np.arange(min(a.x1, b.x1), max(a.x2, b.x2), step) + step / 2
    ys = np.arange(min(a.y1, b.y1), max(a.y2, b.y2), step) + step / 2
    X, Y = np.meshgrid(xs, ys)
    ina = (X > a.x1) & (X < a.x2) & (Y > a.y1) & (Y < a.y2)
    inb = (X > b.x1) & (X < b.x2) & (Y > b.y1) & (Y < b.y2)
    return (ina & inb).sum() / (ina | inb).sum()


class TestIoU:
    def test_identity(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        # inter 50, union 150
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-12)

    def test_matches_grid_count(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x1, y1 = rng.integers(0, 20, 2) / 2.0
            x2, y2 = x1 + rng.integers(1, 20) / 2.0, y1 + rng.integers(1, 20) / 2.0
            u1, v1 = rng.integers(0, 20, 2) / 2.0
            u2, v2 = u1 + rng.integers(1, 20) / 2.0, v1 + rng.integers(1, 20) / 2.0
            a, b = Box(x1, y1, x2, y2), Box(u1, v1, u2, v2)
            assert iou(a, b) == pytest.approx(brute_iou(a, b), abs=1e-12)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        if a != b:
            assert v < 1.0

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 50, (12, 2))
        wh = rng.uniform(1, 30, (12, 2))
        arr = np.hstack([xy, xy + wh])
        m = iou_matrix(arr, arr)
        for i, j in itertools.product(range(12), repeat=2):
            assert m[i, j] == pytest.approx(iou(Box.from_seq(arr[i]), Box.from_seq(arr[j])), abs=1e-12)


class TestBox:
    def test_rejects_degenerate(self):
        with pytest.raises(InvalidBox):
            Box(5, 0, 5, 10)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidBox):
            Box(0, 0, math.inf, 1)


class TestGreedyDiverseSelect:
    A = Box(0, 0, 10, 10)

    def test_single(self):
        assert greedy_diverse_select([self.A], 0.5) == [self.A]

    def test_empty(self):
        assert greedy_diverse_select([], 0.2) == []

    def test_duplicate_suppressed(self):
        c = Box(20, 0, 30, 10)
        assert greedy_diverse_select([self.A, Box(0, 0, 10, 10), c], 0.2) == [self.A, c]

    def test_boundary_is_strict(self):
        # B shifted right by s: IoU = (10 - s) / (10 + s); s = 81/11.9 gives 0.19
        s = 10 * (1 - 0.19) / (1 + 0.19)
        b = Box(s, 0, 10 + s, 10)
        assert iou(self.A, b) == pytest.approx(0.19, abs=1e-12)
        assert greedy_diverse_select([self.A, b], 0.2) == [self.A, b]
        # at exactly the threshold the box is rejected
        assert greedy_diverse_select([self.A, b], iou(self.A, b)) == [self.A]

    @settings(max_examples=200)
    @given(st.lists(boxes(), min_size=1, max_size=15), st.floats(min_value=0.05, max_value=0.95))
    def test_diversity_and_idempotence(self, bs, thr):
        out = greedy_diverse_select(bs, thr)
        assert out[0] == bs[0]
        for a, b in itertools.combinations(out, 2):
            assert iou(a, b) < thr
        assert greedy_diverse_select(out, thr) == out
        # order preserved
        pos = [bs.index(b) for b in out]
        assert pos == sorted(pos)


class TestClip:
    def test_clamps(self):
        assert clip_box(Box(-5, -5, 10, 10), (100, 100)) == Box(0, 0, 10, 10)

    def test_identity(self):
        assert clip_box(Box(0, 0, 10, 10), (100, 100)) == Box(0, 0, 10, 10)

    def test_partial_edge(self):
        assert clip_box(Box(99, 99, 200, 200), (100, 100)) == Box(99, 99, 100, 100)

    def test_collapse(self):
        with pytest.raises(ZeroAreaAfterClip):
            clip_box(Box(100, 100, 200, 200), (100, 100))
        # area 1e-3 * 1e-4 < 1e-6
        with pytest.raises(ZeroAreaAfterClip):
            clip_box(Box(100 - 1e-3, 100 - 1e-4, 200, 200), (100, 100))


class TestDeltas:
    def test_identity_is_zero(self):
        b = np.array([[3.0, 4.0, 20.0, 30.0]])
        np.testing.assert_array_equal(encode_deltas(b, b), np.zeros((1, 4)))

    def test_hand_computed(self):
        # src centre (5, 5) size 10x10; dst centre (6, 5) size 8x10
        src = np.array([[0.0, 0.0, 10.0, 10.0]])
        dst = np.array([[2.0, 0.0, 10.0, 10.0]])
        np.testing.assert_allclose(encode_deltas(src, dst), [[0.1, 0.0, math.log(0.8), 0.0]], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 50, (20, 2))
        src = np.hstack([xy, xy + rng.uniform(1, 30, (20, 2))])
        xy2 = rng.uniform(0, 50, (20, 2))
        dst = np.hstack([xy2, xy2 + rng.uniform(1, 30, (20, 2))])
        np.testing.assert_allclose(decode_deltas(src, encode_deltas(src, dst)), dst, atol=1e-9)


def test_nms_suppresses_above_threshold():
    bx = np.array([[0, 0, 10, 10], [1, 0, 11, 10], [20, 20, 30, 30]], dtype=float)
    keep = nms(bx, np.array([0.9, 0.8, 0.7]), 0.3)
    assert keep.tolist() == [0, 2]
