import math

import numpy as np
import pytest
from scipy import ndimage

from tactsense.core import DepthMap
from tactsense.markers import MotionField
from tactsense.simulator import contact_radius, sphere_indenter
from tactsense.slip import (
    INCIPIENT_SLIP,
    NO_CONTACT,
    STICTION,
    NoFit,
    RigidTransform2D,
    SlipConfig,
    contact_region,
    detect_slip,
    fit_rigid,
)


def _patch(n=6, spacing=20.0, center=(320.0, 240.0)):
    y, x = np.mgrid[0:n, 0:n] * spacing - spacing * (n - 1) / 2
    return np.column_stack([x.ravel() + center[0], y.ravel() + center[1]])


def _contact_depth(shape=(480, 640), center=(320.0, 240.0), radius=120.0):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return DepthMap(np.where(np.hypot(xx - center[0], yy - center[1]) < radius, 1.0, 0.0))


def _rotate(pts, deg, about):
    t = RigidTransform2D(math.radians(deg), (0.0, 0.0))
    return t.apply(pts - about) + about


def test_zero_depth_gives_empty_region():
    assert not contact_region(DepthMap(np.zeros((20, 30))), 0.2).any()


def test_cap_region_matches_analytic_radius(geometry):
    c = (300.4, 250.7)
    dm = sphere_indenter(3.0, c, 1.0, geometry)
    mask = contact_region(dm, 0.2)
    r_px = math.sqrt(3.0**2 - (3.0 - 0.8) ** 2) / geometry.pixel_pitch
    yy, xx = np.mgrid[0 : geometry.height_px, 0 : geometry.width_px]
    r = np.hypot(xx - c[0], yy - c[1])
    assert mask[r < r_px - 2].all()
    assert not mask[r > r_px + 2].any()
    assert mask.sum() == pytest.approx(math.pi * r_px**2, rel=0.03)


def test_only_the_cap_above_threshold_survives(geometry):
    a = sphere_indenter(3.0, (200, 240), 1.0, geometry).z
    b = sphere_indenter(3.0, (450, 240), 0.15, geometry).z
    mask = contact_region(DepthMap(a + b), 0.2)
    assert mask[240, 200] and not mask[:, 350:].any()


def test_largest_component_wins():
    z = np.zeros((50, 50))
    z[5:10, 5:10] = 1.0
    z[20:40, 20:40] = 1.0
    mask = contact_region(DepthMap(z), 0.5)
    assert mask[30, 30] and not mask[7, 7]


def test_cropped_closing_equals_full_frame_closing(rng):
    z = ndimage.gaussian_filter(rng.random((120, 160)), 3) > 0.5
    z = np.where(z, 1.0, 0.0)
    mask = contact_region(DepthMap(z), 0.5, closing=3)
    labels, _ = ndimage.label(z > 0.5)
    sizes = np.bincount(labels.ravel())[1:]
    full = ndimage.binary_closing(labels == np.argmax(sizes) + 1, structure=np.ones((3, 3), bool))
    np.testing.assert_array_equal(mask, full)


def test_translation_fit():
    ref = _patch()
    fit = fit_rigid(MotionField.from_arrays(ref, ref + [3.0, -1.0]))
    assert fit.angle == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(fit.translation, [3.0, -1.0], atol=1e-9)
    assert fit.residual < 1e-9


def test_rotation_about_centroid_fit():
    ref = _patch()
    cur = _rotate(ref, 5.0, ref.mean(axis=0))
    fit = fit_rigid(MotionField.from_arrays(ref, cur))
    assert math.degrees(fit.angle) == pytest.approx(5.0, abs=1e-6)
    assert fit.residual < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_fit_is_exact_on_any_rigid_field(seed):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0, 400, (12, 2))
    true = RigidTransform2D(rng.uniform(-math.pi, math.pi), tuple(rng.uniform(-50, 50, 2)))
    fit = fit_rigid(MotionField.from_arrays(ref, true.apply(ref)))
    assert -math.pi < fit.angle <= math.pi
    assert fit.residual < 1e-9
    np.testing.assert_allclose(fit.apply(ref), true.apply(ref), atol=1e-9)


def test_single_outlier_barely_moves_the_fit():
    ref = _patch()
    true = RigidTransform2D(math.radians(2.0), (1.5, -0.5))
    cur = true.apply(ref)
    cur[4] += [5.0, 0.0]
    fit = fit_rigid(MotionField.from_arrays(ref, cur))
    keep = np.arange(len(ref)) != 4
    oracle = fit_rigid(MotionField.from_arrays(ref[keep], cur[keep]))
    for f in (fit, true):
        assert abs(math.degrees(f.angle - oracle.angle)) < 0.3
    probe = ref.mean(axis=0)
    assert np.linalg.norm(fit.apply(probe) - oracle.apply(probe)) < 0.5
    assert np.linalg.norm(fit.apply(probe) - true.apply(probe)) < 0.5


def test_fit_needs_two_markers_in_contact():
    ref = _patch()
    mask = np.zeros((480, 640), dtype=bool)
    with pytest.raises(NoFit):
        fit_rigid(MotionField.from_arrays(ref, ref), mask)
    with pytest.raises(NoFit):
        fit_rigid(MotionField.from_arrays(ref[:1], ref[:1]))


def test_translation_field_is_stiction():
    ref = _patch()
    rep = detect_slip(MotionField.from_arrays(ref, ref + [2.0, 1.0]), _contact_depth())
    assert rep.state == STICTION and not rep.flags.any() and rep.score == 0.0
    assert np.nanmax(rep.deviation) < 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_rigid_motion_is_always_stiction(seed):
    rng = np.random.default_rng(seed)
    ref = _patch()
    t = RigidTransform2D(rng.uniform(-0.2, 0.2), tuple(rng.uniform(-5, 5, 2)))
    rep = detect_slip(MotionField.from_arrays(ref, t.apply(ref)), _contact_depth(radius=200))
    assert rep.n_contact == len(ref)
    assert np.nanmax(rep.deviation) < 1e-6 and rep.state == STICTION


def test_twenty_percent_slipping_markers_are_flagged(rng):
    cfg = SlipConfig(deviation_threshold=1.0)
    ref = _patch()
    t = RigidTransform2D(math.radians(1.0), (2.0, 0.5))
    cur = t.apply(ref)
    slipping = rng.choice(len(ref), size=len(ref) // 5, replace=False)
    dirs = rng.normal(size=(len(slipping), 2))
    cur[slipping] += 2.0 * cfg.deviation_threshold * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    rep = detect_slip(MotionField.from_arrays(ref, cur), _contact_depth(radius=200), cfg)
    np.testing.assert_array_equal(np.flatnonzero(rep.flags), np.sort(slipping))
    assert rep.state == INCIPIENT_SLIP
    assert rep.score == pytest.approx(len(slipping) / len(ref))


def test_empty_contact_is_no_contact():
    ref = _patch()
    rep = detect_slip(MotionField.from_arrays(ref, ref), DepthMap(np.zeros((480, 640))))
    assert rep.state == NO_CONTACT and rep.transform is None and rep.score == 0.0


def test_only_contact_markers_are_judged():
    ref = np.vstack([_patch(), [[20.0, 20.0]]])
    cur = ref + [1.0, 0.0]
    cur[-1] += [30.0, 0.0]
    rep = detect_slip(MotionField.from_arrays(ref, cur), _contact_depth())
    assert not rep.contact[-1] and np.isnan(rep.deviation[-1]) and not rep.flags[-1]
    assert rep.state == STICTION


def test_raising_threshold_never_adds_flags(rng):
    ref = _patch()
    cur = ref + rng.normal(0, 1.5, ref.shape)
    depth = _contact_depth(radius=200)
    m = MotionField.from_arrays(ref, cur)
    prev = None
    for thr in (0.25, 0.5, 1.0, 2.0, 4.0):
        flags = detect_slip(m, depth, SlipConfig(deviation_threshold=thr)).flags
        if prev is not None:
            assert not (flags & ~prev).any()
        prev = flags


def test_reordering_correspondences_permutes_the_report(rng):
    ref = _patch()
    cur = ref + rng.normal(0, 1.0, ref.shape)
    depth = _contact_depth(radius=200)
    a = detect_slip(MotionField.from_arrays(ref, cur), depth)
    perm = rng.permutation(len(ref))
    b = detect_slip(MotionField.from_arrays(ref[perm], cur[perm]), depth)
    assert a.state == b.state and a.score == b.score
    np.testing.assert_array_equal(a.flags[perm], b.flags)
    np.testing.assert_allclose(a.deviation[perm], b.deviation, atol=1e-9)


def test_flags_follow_deviation_and_state_follows_score(rng):
    ref = _patch()
    cur = ref + rng.normal(0, 1.0, ref.shape)
    rep = detect_slip(MotionField.from_arrays(ref, cur), _contact_depth(radius=200))
    inside = rep.contact
    np.testing.assert_array_equal(rep.flags[inside], rep.deviation[inside] > rep.config.deviation_threshold)
    assert 0.0 <= rep.score <= 1.0
    assert (rep.state == INCIPIENT_SLIP) == (rep.score > rep.config.trigger_fraction)


def test_report_serialises(rng):
    ref = _patch()
    m = MotionField.from_arrays(ref, ref + 1.0)
    d = detect_slip(m, _contact_depth()).to_dict(m)
    assert d["state"] == STICTION and len(d["markers"]) == d["contact_markers"]


def test_config_validation():
    with pytest.raises(ValueError):
        SlipConfig(deviation_threshold=0.0)
    with pytest.raises(ValueError):
        SlipConfig(trigger_fraction=1.5)


def test_contact_radius_formula():
    assert contact_radius(3.0, 0.8) == pytest.approx(math.sqrt(9 - 2.2**2))
