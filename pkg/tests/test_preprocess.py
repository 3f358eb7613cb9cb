import json

import numpy as np
import pytest

from kneeloc import imagecore
from kneeloc.parametrize import affine_matrix
from kneeloc.preprocess import (
    HalfTransform,
    ImageTooSmall,
    PreprocessConfig,
    augment,
    find_split,
    split_bilateral,
)

SMALL_CFG = PreprocessConfig(out_h=160, out_w=100, split_down_w=64)


def make_bilateral(rng, h=300, w=460, blob=True):
    """Composite wider than tall with mild left/right mirror structure."""
    ys = np.linspace(-1, 1, h)[:, None]
    xs = np.linspace(-1, 1, w)[None, :]
    img = 0.45 + 0.25 * np.cos(2.2 * np.abs(xs)) * np.cos(1.7 * ys)
    img += 0.05 * rng.standard_normal((h, w))
    if blob:
        for cx in (-0.5, 0.52):
            img += 0.35 * np.exp(-(((xs - cx) ** 2) / 0.02 + (ys + 0.1) ** 2 / 0.03))
    return np.clip(img, 0, 1).astype(np.float32)


class TestFindSplit:
    def test_mirror_symmetric_ties_to_left(self, rng):
        half = rng.random((64, 64)).astype(np.float32)
        img = np.hstack([half, half[:, ::-1]])
        col = find_split(img, down_w=64)
        # Left candidate at 3/8 of the width.
        assert col == int(round((32 - 8) * 128 / 64))

    def test_constant_image_ties_to_left(self):
        img = np.full((40, 120), 0.5, dtype=np.float32)
        assert find_split(img, down_w=60) <= 60

    def test_constructed_left_mirror_wins(self, rng):
        # Left 3/8 mirrors the adjacent 3/8; the rest is noise.
        w = 128
        img = rng.random((48, w)).astype(np.float32)
        band = img[:, 48:96]
        img[:, :48] = band[:, ::-1]
        col = find_split(img, down_w=w)
        assert col == 48

        # Brute-force both candidate scores as an independent check.
        def score(a):
            wb = min(a, w - a)
            lo = img[:, a - wb : a].astype(np.float64)
            hi = img[:, a : a + wb].astype(np.float64)[:, ::-1]
            return np.sqrt(np.mean((lo - hi) ** 2))

        assert score(48) < score(80)


class TestSplitBilateral:
    def test_output_shapes_and_aspect(self, rng):
        img = make_bilateral(rng, 320, 500)
        res = split_bilateral(img, SMALL_CFG)
        assert res.u_left.shape == (160, 100)
        assert res.u_right.shape == (160, 100)
        for tr in (res.left_transform, res.right_transform):
            assert abs(tr.pre_h / tr.pre_w - 1.6) <= 1.0 / tr.pre_w

    def test_aspect_padding_other_branch(self, rng):
        # Tall-ish composite: h/w of halves > 1.6 pads columns instead.
        img = make_bilateral(rng, 420, 470)
        res = split_bilateral(img, SMALL_CFG)
        for tr in (res.left_transform, res.right_transform):
            assert abs(tr.pre_h / tr.pre_w - 1.6) <= 1.0 / tr.pre_w

    def test_halves_overlap(self, rng):
        import math

        img = make_bilateral(rng, 300, 460)
        res = split_bilateral(img, SMALL_CFG)
        a = res.split_column
        w = img.shape[1]
        le = min(w, math.ceil(a * 1.1))
        rs = max(0, w - math.ceil((w - a) * 1.1))
        overlap = le - rs
        narrower = min(le, w - rs)
        assert overlap >= 0.1 * narrower - 2

    def test_determinism(self, rng):
        img = make_bilateral(rng, 300, 460)
        r1 = split_bilateral(img, SMALL_CFG)
        r2 = split_bilateral(img, SMALL_CFG)
        assert np.array_equal(r1.u_left, r2.u_left)
        assert np.array_equal(r1.u_right, r2.u_right)

    def test_own_output_flagged_degenerate(self, rng):
        img = make_bilateral(rng, 300, 460)
        res = split_bilateral(img, SMALL_CFG)
        again = split_bilateral(res.u_left, SMALL_CFG)
        assert again.degenerate_input

    def test_too_small_rejected(self):
        tiny = np.random.default_rng(0).random((20, 12)).astype(np.float32)
        with pytest.raises(ImageTooSmall):
            split_bilateral(tiny, SMALL_CFG)

    def test_transform_roundtrip_identity(self, rng):
        img = make_bilateral(rng, 300, 460)
        res = split_bilateral(img, SMALL_CFG)
        pts = rng.uniform(10, 90, size=(20, 2))
        for tr in (res.left_transform, res.right_transform):
            back = tr.from_original(tr.to_original(pts))
            assert np.max(np.abs(back - pts)) < 0.5

    def test_transforms_json_roundtrip(self, rng):
        img = make_bilateral(rng, 300, 460)
        res = split_bilateral(img, SMALL_CFG)
        blob = json.loads(res.transforms_json())
        tr = HalfTransform.from_dict(blob["left"])
        assert tr == res.left_transform

    def test_pose_box_roundtrip_alignment(self, rng):
        # A patch extracted from the half should align (within 2 px) with the
        # patch sampled from the original at the mapped coordinates.
        img = make_bilateral(rng, 300, 460)
        res = split_bilateral(img, SMALL_CFG)
        theta = np.array([0.5, 0.1, -0.1, 0.0])
        f = 1.2
        out_h, out_w = 48, 40
        p1 = imagecore.warp(res.u_left, affine_matrix(theta, f), out_h, out_w)

        grid = imagecore.make_regular_grid(out_h, out_w)
        A = affine_matrix(theta, f)
        sx = grid @ A[:2, :2].T + A[:, 2]
        half_px = np.stack(
            [
                (sx[:, 0] + 1) / 2 * (res.u_left.shape[1] - 1),
                (sx[:, 1] + 1) / 2 * (res.u_left.shape[0] - 1),
            ],
            axis=1,
        )
        orig_px = res.left_transform.to_original(half_px)
        p2 = imagecore.sample_pixels(img, orig_px[:, 0], orig_px[:, 1]).reshape(
            out_h, out_w
        )

        def ncc(a, b):
            a = a - a.mean()
            b = b - b.mean()
            return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))

        # Alignment: zero shift must be the correlation peak within +-2 px.
        base = ncc(p1[4:-4, 4:-4].astype(np.float64), p2[4:-4, 4:-4].astype(np.float64))
        assert base > 0.9
        for dy in (-2, 2):
            for dx in (-2, 2):
                shifted = np.roll(p2, (dy, dx), axis=(0, 1))
                assert ncc(
                    p1[4:-4, 4:-4].astype(np.float64),
                    shifted[4:-4, 4:-4].astype(np.float64),
                ) <= base + 1e-9


class _FixedShift:
    def __init__(self, dx, dy):
        self.vals = [dy, dx]
        self.i = 0

    def integers(self, lo, hi):
        v = self.vals[self.i % 2]
        self.i += 1
        return v


class TestAugment:
    def test_zero_shift_is_identity(self, rng):
        half = rng.random((50, 40)).astype(np.float32)
        out = augment(half, rng, max_shift=0.0)
        assert np.array_equal(out, half)

    def test_shift_semantics(self, rng):
        half = rng.random((50, 40)).astype(np.float32)
        right5 = augment(half, _FixedShift(5, 0), max_shift=0.1)
        back5 = augment(right5, _FixedShift(-5, 0), max_shift=0.1)
        assert np.array_equal(back5[:, :-5], half[:, :-5])
        assert np.all(back5[:, -5:] == 0)

    def test_mass_never_increases(self, rng):
        half = rng.random((30, 30)).astype(np.float32)
        n0 = np.count_nonzero(half)
        for _ in range(20):
            out = augment(half, rng, max_shift=0.1)
            assert np.count_nonzero(out) <= n0

    def test_max_shift_validated(self, rng):
        with pytest.raises(ValueError):
            augment(np.ones((10, 10), np.float32), rng, max_shift=0.2)
