import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinna.losses import (
    LandmarkSet2D,
    LossComponents,
    LossWeights,
    camera_loss,
    contour_loss,
    landmark_loss,
    load_landmarks,
    photometric_loss,
    range_loss,
    reg_loss,
    resample_polyline,
    save_landmarks,
    similarity_loss,
    total_loss,
)
from pinna.render import CameraParams, RenderOutput

from conftest import random_landmark_set, straight_contour_set


# ---------------------------------------------------------------------------
# LandmarkSet2D


def test_groups_must_partition(rng):
    pts = rng.normal(size=(55, 2))
    with pytest.raises(ValueError, match="partition"):
        LandmarkSet2D(pts, (np.arange(0, 20), np.arange(19, 35), np.arange(35, 47), np.arange(47, 55)))


def test_groups_min_size(rng):
    pts = rng.normal(size=(55, 2))
    with pytest.raises(ValueError, match="at least 2"):
        LandmarkSet2D(pts, (np.array([0]), np.arange(1, 35), np.arange(35, 47), np.arange(47, 55)))


def test_landmark_json_roundtrip(tmp_path, rng):
    lms = random_landmark_set(rng)
    save_landmarks(lms, tmp_path / "lm.json")
    back = load_landmarks(tmp_path / "lm.json")
    assert np.allclose(back.points, lms.points)
    assert back.same_structure(lms)
    assert back.occlusion == "clean"


def test_landmark_json_schema_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ValueError, match="missing"):
        load_landmarks(bad)
    bad.write_text("not json")
    with pytest.raises(ValueError, match="invalid"):
        load_landmarks(bad)


# ---------------------------------------------------------------------------
# resampling


def test_resample_straight_line_uniform():
    line = np.array([[0.0, 0.0], [10.0, 0.0]])
    out = resample_polyline(line, 6)
    assert np.allclose(out[:, 0], np.linspace(0, 10, 6))


def test_resample_includes_endpoints(rng):
    poly = rng.normal(size=(5, 2)) * 10
    out = resample_polyline(poly, 17)
    assert np.allclose(out[0], poly[0]) and np.allclose(out[-1], poly[-1])


def test_resample_zero_length_polyline():
    poly = np.array([[2.0, 3.0], [2.0, 3.0]])
    out = resample_polyline(poly, 8)
    assert np.allclose(out, np.tile([2.0, 3.0], (8, 1)))


# ---------------------------------------------------------------------------
# contour loss


def test_contour_loss_zero_for_identical(rng):
    lms = random_landmark_set(rng)
    assert contour_loss(lms, lms, 64) == pytest.approx(0.0, abs=1e-12)


def test_contour_loss_perpendicular_shift_converges():
    gt = straight_contour_set()
    d = 2.0
    offsets = np.zeros((55, 2))
    offsets[:, 1] = d  # shift all contours perpendicular to their direction
    pred = straight_contour_set(offsets)
    loss = contour_loss(pred, gt, 512)
    assert loss == pytest.approx(d, rel=0.01)


def test_contour_loss_robust_to_tangential_slide(rng):
    gt = straight_contour_set()
    d_slide = 3.0
    offsets = np.zeros((55, 2))
    for g in gt.groups:
        interior = g[1:-1]
        offsets[interior, 0] = rng.uniform(-d_slide, d_slide, len(interior))
    pred = straight_contour_set(offsets)
    c = contour_loss(pred, gt, 128)
    l = landmark_loss(pred.points, gt)
    assert c < 0.05 * d_slide
    # landmark loss grows linearly with the slide; contour barely moves
    assert l * np.linalg.norm(np.ptp(gt.points, axis=0)) * 55 > 10 * c


def test_contour_loss_group_order_reversal_invariance(rng):
    lms = random_landmark_set(rng)
    pred = random_landmark_set(rng)
    rev_groups = tuple(g[::-1] for g in lms.groups)
    lms_rev = LandmarkSet2D(lms.points, rev_groups)
    pred_rev = LandmarkSet2D(pred.points, rev_groups)
    assert contour_loss(pred, lms, 128) == pytest.approx(
        contour_loss(pred_rev, lms_rev, 128), rel=1e-9
    )


def test_contour_loss_structure_mismatch(rng):
    a = random_landmark_set(rng)
    other_groups = (np.arange(0, 10), np.arange(10, 30), np.arange(30, 47), np.arange(47, 55))
    b = LandmarkSet2D(a.points, other_groups)
    with pytest.raises(ValueError, match="groups"):
        contour_loss(a, b)


# ---------------------------------------------------------------------------
# similarity loss


def test_similarity_identical_vectors():
    assert similarity_loss(np.array([[1.0, 2.0], [1.0, 2.0]])) == pytest.approx(1.0)


def test_similarity_orthogonal_vectors():
    assert similarity_loss(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.0, abs=1e-15)


def test_similarity_worked_example():
    batch = np.array([[1.0, 0.0], [0.0, 1.0], [1.0 / np.sqrt(2), 1.0 / np.sqrt(2)]])
    expected = (2.0 * (0.0 + 1 / np.sqrt(2) + 1 / np.sqrt(2))) / 6.0
    assert similarity_loss(batch) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.4714, abs=5e-5)


def test_similarity_zero_vector_rejected():
    with pytest.raises(ValueError):
        similarity_loss(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_similarity_needs_batch():
    with pytest.raises(ValueError):
        similarity_loss(np.array([[1.0, 0.0]]))


def test_similarity_scale_invariance(rng):
    betas = rng.normal(size=(5, 7))
    scales = rng.uniform(0.1, 10.0, size=(5, 1))
    assert similarity_loss(betas) == pytest.approx(similarity_loss(betas * scales), rel=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_similarity_bounded(seed):
    r = np.random.default_rng(seed)
    betas = r.normal(size=(int(r.integers(2, 8)), int(r.integers(1, 6))))
    if (np.linalg.norm(betas, axis=1) == 0).any():
        return
    assert -1.0 - 1e-9 <= similarity_loss(betas) <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# range / camera losses


@pytest.mark.parametrize(
    "x,lo,hi,expected",
    [(3.0, 0.5, 4.0, 0.0), (5.0, 0.5, 4.0, 1.0), (0.0, 0.5, 4.0, 0.25)],
)
def test_range_loss_table(x, lo, hi, expected):
    assert range_loss(x, lo, hi) == pytest.approx(expected, rel=1e-12)


@given(st.floats(-10, 10))
@settings(max_examples=50, deadline=None)
def test_range_loss_c1_continuity(x):
    h = 1e-7
    lo, hi = -1.0, 2.0
    f = lambda v: range_loss(v, lo, hi)
    # continuous and with continuous first derivative (quadratic splice)
    assert abs(f(x + h) - f(x)) < 1e-5
    dfp = (f(x + h) - f(x)) / h
    dfm = (f(x) - f(x - h)) / h
    assert abs(dfp - dfm) < 1e-5


def test_camera_loss_examples():
    assert camera_loss(CameraParams(scale=1.0, rotation=np.array([0.0, -1.0, 0.0]))) == 0.0
    assert camera_loss(CameraParams(scale=5.0, rotation=np.array([0.0, -1.0, 0.0]))) == pytest.approx(1.0)
    assert camera_loss(CameraParams(scale=1.0, rotation=np.array([0.0, 0.0, 0.0]))) == pytest.approx(0.25)


def test_camera_loss_ignores_other_angles():
    cam = CameraParams(scale=1.0, rotation=np.array([9.0, -1.0, -9.0]), translation=np.array([1e6, -1e6]))
    assert camera_loss(cam) == 0.0


# ---------------------------------------------------------------------------
# landmark loss


def test_landmark_loss_zero(rng):
    gt = random_landmark_set(rng)
    assert landmark_loss(gt.points, gt) == 0.0


def test_landmark_loss_worked_example(rng):
    gt = random_landmark_set(rng)
    span = np.ptp(gt.points, axis=0)
    scale = 100.0 / np.linalg.norm(span)
    gt = gt.with_points(gt.points * scale)  # bbox diagonal exactly 100
    pred = gt.points + np.array([3.0, 4.0])
    assert landmark_loss(pred, gt) == pytest.approx(0.05, rel=1e-9)


def test_landmark_loss_scale_invariance(rng):
    gt = random_landmark_set(rng)
    pred = gt.points + rng.normal(size=(55, 2))
    c = np.array([7.0, -3.0])
    scaled_gt = gt.with_points((gt.points - c) * 2.5 + c)
    scaled_pred = (pred - c) * 2.5 + c
    assert landmark_loss(pred, gt) == pytest.approx(
        landmark_loss(scaled_pred, scaled_gt), rel=1e-12
    )


def test_landmark_loss_translation_invariance(rng):
    # the bbox-diagonal normalization is exactly invariant to simultaneous
    # translation (rotations change the axis-aligned bbox)
    gt = random_landmark_set(rng)
    pred = gt.points + rng.normal(size=(55, 2))
    t = np.array([11.0, -4.0])
    assert landmark_loss(pred, gt) == pytest.approx(
        landmark_loss(pred + t, gt.with_points(gt.points + t)), rel=1e-12
    )


def test_landmark_loss_degenerate_bbox():
    pts = np.tile([1.0, 2.0], (55, 1))
    groups = (np.arange(0, 20), np.arange(20, 35), np.arange(35, 47), np.arange(47, 55))
    gt = LandmarkSet2D(pts, groups)
    with pytest.raises(ValueError, match="degenerate"):
        landmark_loss(pts, gt)


# ---------------------------------------------------------------------------
# photometric loss


def render_with(rgb, mask_arr):
    depth = np.where(mask_arr, 1.0, np.inf)
    return RenderOutput(rgb=rgb, depth=depth, mask=mask_arr)


def test_photometric_zero_for_match(rng):
    h = w = 16
    mask = np.zeros((h, w), dtype=bool)
    mask[4:12, 4:12] = True
    image = rng.random((h, w, 3))
    rendered = render_with(mask[:, :, None] * image, mask)
    assert photometric_loss(image, rendered, mask) == pytest.approx(0.0, abs=1e-12)


def test_photometric_all_black():
    h = w = 8
    mask = np.ones((h, w), dtype=bool)
    rendered = render_with(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))
    assert photometric_loss(np.zeros((h, w, 3)), rendered, mask) == 0.0


def test_photometric_constant_closed_form():
    h, w = 12, 10
    c = 0.6
    mask = np.zeros((h, w), dtype=bool)
    mask[2:7, 3:9] = True
    m = mask.sum()
    image = np.full((h, w, 3), c)
    rendered = render_with(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))
    expected = c * np.sqrt(3 * m / (h * w))
    assert photometric_loss(image, rendered, mask) == pytest.approx(expected, rel=1e-12)


def test_photometric_resolution_mismatch(rng):
    rendered = render_with(np.zeros((8, 8, 3)), np.zeros((8, 8), dtype=bool))
    with pytest.raises(ValueError, match="mismatch"):
        photometric_loss(np.zeros((9, 8, 3)), rendered, np.zeros((9, 8), dtype=bool))


# ---------------------------------------------------------------------------
# regularization / total


def test_reg_loss_examples():
    assert reg_loss(np.zeros(236), np.zeros(50)) == 0.0
    assert reg_loss(np.ones(236), np.zeros(50)) == pytest.approx(1.0)
    theta = np.tile([2.0, -2.0], 25)
    assert reg_loss(np.zeros(236), theta) == pytest.approx(2.0)


def test_default_weights_match_published_values():
    w = LossWeights()
    assert (w.contour, w.sim, w.cam, w.lmk, w.photo, w.smooth, w.reg) == (
        100.0, 1.0, 100.0, 10.0, 100.0, 10.0, 0.005,
    )


def test_total_loss_all_ones():
    comps = LossComponents(contour=1, sim=1, cam=1, lmk=1, photo=1, smooth=1, reg=1)
    assert total_loss(comps, LossWeights()) == pytest.approx(321.005, rel=1e-12)


def test_total_loss_zero():
    assert total_loss(LossComponents(), LossWeights()) == 0.0


def test_total_loss_single_component():
    comps = LossComponents(lmk=0.3)
    assert total_loss(comps, LossWeights()) == pytest.approx(3.0)


@given(st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=25, deadline=None)
def test_total_loss_linear_in_components(a, b):
    w = LossWeights()
    base = LossComponents(contour=a)
    other = LossComponents(contour=b)
    assert total_loss(LossComponents(contour=a + b), w) == pytest.approx(
        total_loss(base, w) + total_loss(other, w), rel=1e-9, abs=1e-9
    )


def test_negative_weight_rejected():
    with pytest.raises(ValueError, match="negative"):
        LossWeights(contour=-1.0)
