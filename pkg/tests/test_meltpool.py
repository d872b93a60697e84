import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldedtwin import meltpool as mp


def brute_otsu(img):
    vals = np.asarray(img, dtype=float).ravel()
    best, best_t = -1.0, 0
    for t in range(256):
        lo, hi = vals[vals < t], vals[vals >= t]
        if lo.size == 0 or hi.size == 0:
            continue
        w0, w1 = lo.size / vals.size, hi.size / vals.size
        between = w0 * w1 * (lo.mean() - hi.mean()) ** 2
        if between > best + 1e-12:
            best, best_t = between, t
    return best_t


def brute_moments(img, mask):
    h, w = mask.shape
    m00 = m10 = m01 = 0.0
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                m00 += img[y, x]
                m10 += img[y, x] * x
                m01 += img[y, x] * y
    xb, yb = m10 / m00, m01 / m00
    mu20 = mu02 = mu11 = 0.0
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                mu20 += img[y, x] * (x - xb) ** 2
                mu02 += img[y, x] * (y - yb) ** 2
                mu11 += img[y, x] * (x - xb) * (y - yb)
    return m00, xb, yb, mu20, mu02, mu11


def brute_hull_area(points):
    """Area of the hull as the union-free maximum over fan triangulations:
    the hull vertices are exactly the points not strictly inside any triangle."""
    pts = [tuple(p) for p in np.unique(np.asarray(points, dtype=float), axis=0)]
    n = len(pts)

    def inside(p, a, b, c):
        d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        d2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
        d3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
        neg = d1 < 0 or d2 < 0 or d3 < 0
        pos = d1 > 0 or d2 > 0 or d3 > 0
        return not (neg and pos)

    verts = []
    for i, p in enumerate(pts):
        covered = False
        for a in range(n):
            for b in range(a + 1, n):
                for c in range(b + 1, n):
                    if i in (a, b, c):
                        continue
                    tri = (pts[a], pts[b], pts[c])
                    area2 = abs((tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
                                - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0]))
                    if area2 > 0 and inside(p, *tri):
                        covered = True
                        break
                if covered:
                    break
            if covered:
                break
        if not covered:
            verts.append(p)
    # order the extreme points by angle around their centroid, shoelace
    c = np.mean(verts, axis=0)
    verts.sort(key=lambda v: math.atan2(v[1] - c[1], v[0] - c[0]))
    return mp.polygon_area(np.array(verts))


def ellipse_points(a, b, theta_deg, n=60, center=(0.0, 0.0)):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    th = math.radians(theta_deg)
    x = a * np.cos(t)
    y = b * np.sin(t)
    # b is along the rotated major direction
    px = center[0] + y * math.cos(th) - x * math.sin(th)
    py = center[1] + y * math.sin(th) + x * math.cos(th)
    return np.column_stack([px, py])


def test_fixed_threshold():
    assert mp.binarize(np.array([[10, 200]], np.uint8), 100).tolist() == [[False, True]]


def test_otsu_matches_exhaustive_search(rng):
    img = rng.normal(30, 5, (64, 64))
    yy, xx = np.mgrid[0:64, 0:64]
    blob = (xx - 30) ** 2 / 100 + (yy - 34) ** 2 / 49 < 1
    img[blob] = rng.normal(200, 10, blob.sum())
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    t = mp.otsu_threshold(img)
    assert np.array_equal(mp.binarize(img), img >= brute_otsu(img))
    assert t == brute_otsu(img)


def test_area_moment_examples():
    one = np.zeros((3, 3)); one[1, 1] = 1
    assert mp.contour_area_moment(one, one > 0) == 1
    assert mp.contour_area_moment(np.full((3, 3), 2.0), np.ones((3, 3), bool)) == 18


def test_area_moment_dimension_mismatch():
    with pytest.raises(ValueError):
        mp.contour_area_moment(np.ones((3, 3)), np.ones((3, 4), bool))


def test_single_pixel_moments():
    img = np.zeros((10, 10)); img[7, 5] = 3
    assert mp.central_moments(img, img > 0) == (5.0, 7.0, 0.0, 0.0, 0.0)


def test_rectangle_moments():
    w, h = 7, 4
    mask = np.zeros((12, 12), bool); mask[2 : 2 + h, 3 : 3 + w] = True
    _, _, mu20, mu02, mu11 = mp.central_moments(mask.astype(float), mask)
    assert mu11 == 0
    assert mu20 == pytest.approx(w * h * (w * w - 1) / 12, rel=1e-12)
    assert mu02 == pytest.approx(w * h * (h * h - 1) / 12, rel=1e-12)


def test_empty_mask_signals_no_meltpool():
    with pytest.raises(mp.NoMeltPool):
        mp.central_moments(np.ones((4, 4)), np.zeros((4, 4), bool))


def test_moments_match_double_loop(rng):
    for _ in range(20):
        img = rng.random((8, 8))
        mask = rng.random((8, 8)) < 0.5
        mask[0, 0] = True
        m00, xb, yb, mu20, mu02, mu11 = brute_moments(img, mask)
        assert mp.contour_area_moment(img, mask) == pytest.approx(m00, rel=1e-12)
        got = mp.central_moments(img, mask)
        assert got == pytest.approx((xb, yb, mu20, mu02, mu11), rel=1e-9, abs=1e-12)


def test_mask_as_intensity_counts_pixels(rng):
    mask = rng.random((16, 16)) < 0.3
    assert mp.contour_area_moment(mask, mask) == mask.sum()


def test_hull_examples():
    mask = np.zeros((5, 6), bool)
    mask[0, 0] = mask[0, 4] = mask[3, 0] = True
    assert mp.convex_hull(mask)[1] == 6
    assert mp.convex_hull(np.ones((10, 10), bool))[1] == 81
    line = np.zeros((5, 5), bool); line[2, :] = True
    assert mp.convex_hull(line)[1] == 0
    with pytest.raises(mp.NoMeltPool):
        mp.convex_hull(np.zeros((3, 3), bool))


def test_hull_matches_triple_oracle(rng):
    for _ in range(3):
        mask = np.zeros((20, 20), bool)
        idx = rng.choice(400, 50, replace=False)
        mask.flat[idx] = True
        ys, xs = np.nonzero(mask)
        assert mp.convex_hull(mask)[1] == pytest.approx(brute_hull_area(np.column_stack([xs, ys])), abs=1e-9)


def test_hull_bounds_boundary_polygon():
    yy, xx = np.mgrid[0:30, 0:30]
    mask = (xx - 15) ** 2 / 64 + (yy - 14) ** 2 / 25 <= 1
    edge = mp.boundary_pixels(mask)
    assert mp.convex_hull(mask)[1] >= len(edge)
    c = edge.mean(axis=0)
    order = np.argsort(np.arctan2(edge[:, 1] - c[1], edge[:, 0] - c[0]))
    assert mp.convex_hull(mask)[1] >= mp.polygon_area(edge[order]) - 1e-9


def test_ellipse_circle():
    e = mp.fit_ellipse_points(ellipse_points(10, 10, 0))
    assert e.width_a == pytest.approx(10, abs=1e-6)
    assert e.length_b == pytest.approx(10, abs=1e-6)


def test_ellipse_recovery_and_angle():
    e = mp.fit_ellipse_points(ellipse_points(2, 5, 30, center=(3, -1)))
    assert (e.width_a, e.length_b) == pytest.approx((2, 5), rel=1e-6)
    assert e.angle == pytest.approx(30, abs=0.01)
    assert e.center == pytest.approx((3, -1), abs=1e-6)


def test_ellipse_scale_equivariance():
    pts = ellipse_points(3, 7, 110, center=(1, 2)) + np.random.default_rng(1).normal(0, 0.05, (60, 2))
    e1 = mp.fit_ellipse_points(pts)
    e3 = mp.fit_ellipse_points(pts * 3)
    assert e3.width_a == pytest.approx(3 * e1.width_a, rel=1e-9)
    assert e3.length_b == pytest.approx(3 * e1.length_b, rel=1e-9)


def test_ellipse_errors():
    with pytest.raises(mp.EllipseFitError):
        mp.fit_ellipse_points(np.zeros((4, 2)))
    with pytest.raises(mp.EllipseFitError):
        mp.fit_ellipse(np.eye(8, dtype=bool)[:, ::-1] & False)
    line = np.zeros((8, 8), bool); line[3, 1:7] = True
    with pytest.raises(mp.EllipseFitError):
        mp.fit_ellipse(line)


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(2, 20), ratio=st.floats(1.0, 4.0), theta=st.floats(0, 180),
    cx=st.floats(-50, 50), cy=st.floats(-50, 50),
)
def test_ellipse_b_ge_a(a, ratio, theta, cx, cy):
    e = mp.fit_ellipse_points(ellipse_points(a, a * ratio, theta, center=(cx, cy)))
    assert e.length_b >= e.width_a > 0


def test_gaussian_blob_aspect_ratio():
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    g = np.exp(-((xx - 32) ** 2 / (2 * 4**2) + (yy - 32) ** 2 / (2 * 8**2)))
    img = np.rint(255 * g).astype(np.uint8)
    f = mp.extract_meltpool_features(0.0, img, mp.MeltPoolConfig(threshold=128))
    assert f.valid
    assert f.length / f.width == pytest.approx(2.0, rel=0.05)


def test_dark_and_flat_frames_invalid(rng):
    assert not mp.extract_meltpool_features(0, np.zeros((32, 32), np.uint8)).valid
    noise = np.clip(np.rint(20 + rng.normal(0, 3, (32, 32))), 0, 255).astype(np.uint8)
    assert not mp.extract_meltpool_features(0, noise).valid


def test_largest_blob_wins():
    img = np.zeros((40, 40), np.uint8)
    img[2:12, 2:12] = 200  # 100 px
    img[25:30, 25:33] = 200  # 40 px
    f = mp.extract_meltpool_features(1.0, img)
    assert f.valid and f.area == 100 and (f.cx, f.cy) == (6.5, 6.5)


def test_translation_invariance_exact(rng):
    img = np.zeros((24, 24)); img[3:12, 4:10] = rng.random((9, 6))
    mask = img > 0.3
    a = mp.central_moments(img, mask)
    b = mp.central_moments(np.roll(np.roll(img, 4, 0), 3, 1), np.roll(np.roll(mask, 4, 0), 3, 1))
    assert a[2:] == b[2:]
    assert (b[0] - a[0], b[1] - a[1]) == pytest.approx((3, 4), abs=1e-12)


def test_features_deterministic_and_csv_roundtrip(tmp_path, rng):
    yy, xx = np.mgrid[0:64, 0:64]
    frames = []
    for k in range(3):
        img = 20 + 200 * ((xx - 30) ** 2 / (80 + k) + (yy - 33) ** 2 / 30 < 1)
        frames.append(img.astype(np.uint8))
    frames.append(np.zeros((64, 64), np.uint8))
    feats = mp.extract_series([0, 1 / 30, 2 / 30, 3 / 30], frames)
    assert feats == mp.extract_series([0, 1 / 30, 2 / 30, 3 / 30], frames)
    mp.write_features_csv(feats, tmp_path / "f.csv")
    back = mp.read_features_csv(tmp_path / "f.csv")
    assert [b.valid for b in back] == [True, True, True, False]
    for a, b in zip(feats[:3], back[:3]):
        assert b.area == pytest.approx(a.area, rel=1e-8)
        assert b.width == pytest.approx(a.width, rel=1e-8)
