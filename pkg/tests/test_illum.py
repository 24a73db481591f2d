import math
import time

import numpy as np
import pytest

from tactsense.illum import (
    SKEWED_DESIGN,
    WHITE,
    BeamShaping,
    LensDesign,
    OptBounds,
    ReceiverGeometry,
    ReceiverMesh,
    cost,
    design_cost,
    irradiance_mesh,
    metrics,
    optimize,
    project,
    rotate_layout,
    satisfies,
    to_illumination,
)
from tactsense.simulator import POINT_SOURCE, Emitter, IlluminationConfig

RECEIVER = ReceiverGeometry()


def _white(emitter):
    return IlluminationConfig(((emitter,), (emitter,), (emitter,)), mode=POINT_SOURCE)


def _down(x=0.0, y=0.0, h=10.0, power=1.0):
    return Emitter((x, y, h), tilt=90.0, azimuth=0.0, power=power)


def test_overhead_emitter_peaks_at_the_centre_and_is_symmetric():
    total = irradiance_mesh(_white(_down())).total
    c = RECEIVER.bins // 2
    assert np.unravel_index(np.argmax(total), total.shape) == (c, c)
    assert np.abs(total - total[::-1]).max() < 0.01 * total.max()
    assert np.abs(total - total[:, ::-1]).max() < 0.01 * total.max()


def test_flux_is_linear_in_power():
    a = irradiance_mesh(_white(_down())).flux
    b = irradiance_mesh(_white(_down(power=2.0))).flux
    np.testing.assert_array_equal(b, 2.0 * a)


def test_inverse_square_on_axis():
    c = RECEIVER.bins // 2
    near = irradiance_mesh(_white(_down(h=10.0))).flux[c, c, 0]
    far = irradiance_mesh(_white(_down(h=20.0))).flux[c, c, 0]
    assert far / near == pytest.approx(0.25, rel=0.02)
    # point-sample oracle at the bin centre: flux ~ irradiance * bin area
    bx, by = RECEIVER.bin_size
    assert near == pytest.approx(bx * by / 10.0**2, rel=0.02)
    assert far == pytest.approx(bx * by / 20.0**2, rel=0.02)


def test_emitter_on_the_plane_is_rejected():
    with pytest.raises(ValueError):
        Emitter((0.0, 0.0, 0.0))


def test_uniform_white_mesh_metrics():
    m = metrics(ReceiverMesh(np.ones((25, 25, 3)), RECEIVER))
    assert m.sigma == 0.0
    assert m.cie_mean == pytest.approx(WHITE)
    assert m.centroid == pytest.approx((0.0, 0.0), abs=1e-12)


def test_red_only_chromaticity():
    flux = np.zeros((25, 25, 3))
    flux[..., 0] = 1.0
    assert metrics(ReceiverMesh(flux, RECEIVER)).cie_mean == (1.0, 0.0)


def test_point_mass_centroid():
    flux = np.zeros((25, 25, 3))
    flux[0, 24] = 1.0
    X, Y = RECEIVER.bin_centers()
    assert metrics(ReceiverMesh(flux, RECEIVER)).centroid == pytest.approx((X[0, 24], Y[0, 24]))


def test_empty_mesh_is_rejected():
    with pytest.raises(ValueError):
        metrics(ReceiverMesh(np.zeros((25, 25, 3)), RECEIVER))


def test_bins_tile_the_sensing_area():
    X, Y = RECEIVER.bin_centers()
    bx, by = RECEIVER.bin_size
    assert X.min() - bx / 2 == pytest.approx(-15.0) and X.max() + bx / 2 == pytest.approx(15.0)
    assert Y.min() - by / 2 == pytest.approx(-11.25) and Y.max() + by / 2 == pytest.approx(11.25)
    assert RECEIVER.bins == 25


def test_metrics_scale_invariance_and_centroid_equivariance(rng):
    flux = np.zeros((25, 25, 3))
    flux[5:12, 3:10] = rng.random((7, 7, 3))
    a = metrics(ReceiverMesh(flux, RECEIVER))
    b = metrics(ReceiverMesh(7.5 * flux, RECEIVER))
    assert b.sigma == pytest.approx(a.sigma) and b.cie_mean == pytest.approx(a.cie_mean)
    assert b.centroid == pytest.approx(a.centroid)
    shifted = np.roll(flux, (4, 6), axis=(0, 1))
    c = metrics(ReceiverMesh(shifted, RECEIVER))
    bx, by = RECEIVER.bin_size
    assert c.centroid == pytest.approx((a.centroid[0] + 6 * bx, a.centroid[1] + 4 * by))


def test_metric_ranges(rng):
    m = metrics(ReceiverMesh(rng.random((25, 25, 3)), RECEIVER))
    x, y = m.cie_mean
    assert m.sigma >= 0 and 0 <= x <= 1 and 0 <= y <= 1 and x + y <= 1
    assert abs(m.centroid[0]) <= 15 and abs(m.centroid[1]) <= 11.25


def test_ideal_configuration_costs_nothing():
    from tactsense.illum import objective

    m = metrics(ReceiverMesh(np.ones((25, 25, 3)), RECEIVER))
    assert objective(m, RECEIVER) == pytest.approx(0.0, abs=1e-24)


def test_cost_ignores_global_power():
    illum = to_illumination(LensDesign(), OptBounds())
    assert cost(illum.scaled(3.0)) == pytest.approx(cost(illum), rel=1e-12)


def test_cost_drops_as_a_lone_emitter_moves_to_the_centre():
    values = [cost(_white(_down(x=x, h=10.0))) for x in (10.0, 8.0, 6.0, 4.0, 2.0, 0.0)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_channels_are_rotated_copies():
    illum = to_illumination(LensDesign(x=1.5, y=18.0, z=2.0, alpha=25.0, shaping=BeamShaping(1.0, 20.0, 5.0)),
                            OptBounds())
    em = [c[0] for c in illum.channels]
    for k in range(3):
        a, b = em[k], em[(k + 1) % 3]
        np.testing.assert_allclose(rotate_layout(np.array(a.position[:2]), 120.0), b.position[:2], atol=1e-12)
        assert a.position[2] == b.position[2] and a.tilt == b.tilt and a.exponent == b.exponent
        np.testing.assert_allclose(rotate_layout(a.axis[:2], 120.0), b.axis[:2], atol=1e-12)


def test_projection_respects_bounds():
    b = OptBounds()
    d = project(LensDesign(x=3.0, y=-4.0, z=50.0, alpha=120.0, shaping=BeamShaping(9.0, -5.0, 400.0)), b)
    assert satisfies(d, b)
    assert d.x == b.m_x and d.y == b.m_y and d.z == b.t1 and d.shaping.length == b.t2


def test_zero_thickness_pins_z():
    b = OptBounds(t1=0.0)
    res = optimize(LensDesign(z=3.0), b, budget=60)
    assert res.design.z == 0.0 and satisfies(res.design, b)


def test_budget_must_cover_the_simplex():
    with pytest.raises(ValueError):
        optimize(LensDesign(), OptBounds(), budget=3)


@pytest.fixture(scope="module")
def skewed_run():
    t = time.perf_counter()
    res = optimize(SKEWED_DESIGN, OptBounds(), budget=500, seed=0)
    return res, time.perf_counter() - t


def test_skewed_design_improves(skewed_run):
    res, _ = skewed_run
    assert res.evaluations == 500 and len(res.trace) == 500
    assert res.cost < res.initial_cost
    assert metrics(res.after).sigma < metrics(res.before).sigma
    assert satisfies(res.design, OptBounds())
    assert res.cost == pytest.approx(design_cost(res.design, OptBounds()), rel=1e-12)


def test_optimizer_is_reproducible_and_monotone_in_budget(skewed_run):
    res, _ = skewed_run
    short = optimize(SKEWED_DESIGN, OptBounds(), budget=150, seed=0)
    assert short.trace == res.trace[:150]
    assert res.cost <= short.cost


def test_optimizer_never_degrades_a_good_start(skewed_run):
    res, _ = skewed_run
    again = optimize(res.design, OptBounds(), budget=40, seed=3)
    assert again.cost <= again.initial_cost
    assert again.initial_cost == pytest.approx(res.cost, rel=1e-12)


def test_design_round_trips_through_dict():
    d = LensDesign(x=0.0, y=14.0, z=1.0, alpha=10.0, shaping=BeamShaping(0.5, 3.0, 4.0))
    assert LensDesign.from_dict(d.as_dict()) == d
    assert LensDesign.from_vector(d.vector()) == d


def test_shaping_length_scales_the_beam_transform():
    b = OptBounds()
    flat = to_illumination(LensDesign(alpha=20.0, shaping=BeamShaping(0.0, 40.0, 30.0)), b).channels[0][0]
    full = to_illumination(LensDesign(alpha=20.0, shaping=BeamShaping(b.t2, 40.0, 30.0)), b).channels[0][0]
    assert flat.tilt == 20.0 and full.tilt == 60.0
    assert full.exponent < flat.exponent
    assert math.isfinite(full.exponent)
