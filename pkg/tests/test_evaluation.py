import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloudcarve.camera import camera_from_fov
from cloudcarve.evaluation import (
    MetricsReport,
    OpacityMap,
    cloud_base_heights,
    coverage_error,
    evaluate,
    jaccard,
    render_opacity,
    save_png,
    segment,
    split_l1,
)
from cloudcarve.exceptions import ConfigError
from cloudcarve.volume import DensityGrid, GridDomain

D = GridDomain(origin=(-1000.0, -1000.0, 0.0), voxel_size=50.0, dims=(41, 41, 41))


def up_camera(width=9, height=9, hfov=30.0, z=-500.0):
    return camera_from_fov((0.0, 0.0, z), (0.0, 0.0, 1000.0), width, height, hfov)


def homogeneous_slab(sigma, lo, hi, domain=D):
    z = domain.axes()[2]
    data = np.zeros(domain.dims)
    data[:, :, (z >= lo) & (z <= hi)] = sigma
    return DensityGrid(domain, data)


def slab_path(sigma, lo, hi):
    """Optical depth along a vertical ray: the interpolated slab ramps over one voxel on each side."""
    return sigma * ((hi - lo) + 50.0)


def test_beer_lambert_300m_path():
    # plateau of 250 m between nodes plus two half-voxel linear ramps = 300 m effective path
    om = render_opacity(homogeneous_slab(0.01, 500.0, 750.0), up_camera())
    assert om.opacity[4, 4] == pytest.approx(1 - math.exp(-3.0), abs=2e-3)
    assert om.opacity[4, 4] == pytest.approx(0.9502, abs=2e-3)


def test_beer_lambert_single_voxel():
    data = np.zeros(D.dims)
    data[20, 20, 10] = 0.004  # one node; the tent around it integrates to 50 m
    om = render_opacity(DensityGrid(D, data), up_camera(1, 1, 1.0))
    assert om.opacity[0, 0] == pytest.approx(1 - math.exp(-0.2), abs=2e-3)
    assert om.opacity[0, 0] == pytest.approx(0.1813, abs=2e-3)


@pytest.mark.parametrize("sigma,lo,hi", [(0.001, 200, 400), (0.002, 500, 1500), (0.005, 100, 300),
                                         (0.0005, 0, 2000)])
def test_beer_lambert_slabs(sigma, lo, hi):
    om = render_opacity(homogeneous_slab(sigma, lo, hi), up_camera(1, 1, 1.0))
    lo_eff = max(lo - 25.0, 0.0)
    hi_eff = min(hi + 25.0, 2000.0)
    assert om.opacity[0, 0] == pytest.approx(1 - math.exp(-sigma * (hi_eff - lo_eff)), abs=2e-3)


def test_opacity_depth_channel():
    om = render_opacity(homogeneous_slab(0.05, 500.0, 1000.0), up_camera())
    # opaque slab: half the final opacity is reached a few meters past the base
    assert np.all((om.depth > 1000.0 - 25.0) & (om.depth < 1000.0 + 25.0))
    empty = render_opacity(DensityGrid.zeros(D), up_camera())
    assert np.all(empty.opacity == 0) and np.all(np.isinf(empty.depth))


def test_opacity_map_validation():
    with pytest.raises(ConfigError):
        OpacityMap(np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        OpacityMap(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ConfigError):
        render_opacity(DensityGrid.zeros(D), up_camera(), step=0.0)


def test_segment_thresholds():
    om = OpacityMap(np.array([[0.1, 0.15, 0.9], [0.9, 0.5, 1.0]]),
                    np.array([[100.0, 100.0, 100.0], [4000.0, 4000.1, np.inf]]))
    np.testing.assert_array_equal(segment(om), [[0, 1, 1], [1, 0, 0]])
    with pytest.raises(ConfigError):
        segment(om, 1.5)


def test_jaccard_and_coverage_examples():
    gt = np.zeros((10, 10), np.uint8)
    pred = np.zeros((10, 10), np.uint8)
    gt[:, :6] = 1
    pred[:, :3] = 1
    assert jaccard(gt, pred) == 50.0
    pred[:, :] = 0
    pred.reshape(-1)[:35] = 1
    assert coverage_error(gt, pred) == pytest.approx(25.0)
    assert jaccard(np.zeros((3, 3)), np.zeros((3, 3))) is None
    assert coverage_error(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0


def test_split_l1_hand_case():
    d = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=(2, 1, 1))
    gt = DensityGrid(d, np.array([1.0, 0.0]).reshape(2, 1, 1))
    pred = DensityGrid(d, np.array([0.5, 0.2]).reshape(2, 1, 1))
    assert split_l1(gt, pred, 1.0) == pytest.approx(0.7, abs=1e-7)
    assert split_l1(gt, pred, 0.0) == 0.5


def test_split_l1_validation():
    d = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=(2, 1, 1))
    g = DensityGrid.zeros(d)
    with pytest.raises(ConfigError):
        split_l1(g, g, 1.5)
    other = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=(1, 2, 1))
    with pytest.raises(ConfigError):
        split_l1(g, DensityGrid.zeros(other))
    with pytest.raises(ConfigError):
        jaccard(np.zeros((2, 2)), np.zeros((2, 3)))


masks = st.integers(1, 64).flatmap(lambda h: st.integers(1, 64).flatmap(
    lambda w: st.tuples(arrays(np.uint8, (h, w), elements=st.integers(0, 1)),
                        arrays(np.uint8, (h, w), elements=st.integers(0, 1)))))


def brute_jaccard(gt, pred):
    inter = union = 0
    for a, b in zip(gt.reshape(-1).tolist(), pred.reshape(-1).tolist()):
        inter += a and b
        union += a or b
    return None if union == 0 else 100.0 * inter / union


@given(masks)
def test_jaccard_oracle_and_symmetry(pair):
    gt, pred = pair
    assert jaccard(gt, pred) == brute_jaccard(gt, pred)
    assert jaccard(gt, pred) == jaccard(pred, gt)


@given(masks)
def test_coverage_oracle_and_symmetry(pair):
    gt, pred = pair
    n = gt.size
    expected = 100.0 * abs(sum(gt.reshape(-1).tolist()) / n - sum(pred.reshape(-1).tolist()) / n)
    assert coverage_error(gt, pred) == expected
    assert coverage_error(gt, pred) == coverage_error(pred, gt)


@given(arrays(np.uint8, st.tuples(st.integers(1, 32), st.integers(1, 32)), elements=st.integers(0, 1)))
def test_self_comparison(m):
    assert coverage_error(m, m) == 0.0
    if m.any():
        assert jaccard(m, m) == 100.0


grids = st.integers(1, 16).flatmap(lambda n: st.tuples(
    arrays(np.float32, (n, n, n), elements=st.floats(0, 1, width=32) | st.just(np.float32(0))),
    arrays(np.float32, (n, n, n), elements=st.floats(0, 1, width=32))))


def exact_split(g, p, lam):
    g = [Fraction(float(x)) for x in g.reshape(-1)]
    p = [Fraction(float(x)) for x in p.reshape(-1)]
    cloud = [abs(a - b) for a, b in zip(g, p) if a > 0]
    empty = [abs(a - b) for a, b in zip(g, p) if a == 0]
    first = sum(cloud, Fraction(0)) / len(cloud) if cloud else Fraction(0)
    second = sum(empty, Fraction(0)) / len(empty) if empty else Fraction(0)
    return float(first), float(second)


@given(grids, st.sampled_from([0.0, 0.25, 1.0]))
def test_split_l1_oracle(pair, lam):
    g, p = pair
    d = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=g.shape)
    first, second = exact_split(g, p, lam)
    assert split_l1(DensityGrid(d, g), DensityGrid(d, p), lam) == first + lam * second


@given(grids, st.floats(0, 1), st.floats(0, 1))
def test_split_l1_monotone_in_lambda(pair, a, b):
    g, p = pair
    d = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=g.shape)
    lo, hi = sorted((a, b))
    s_lo = split_l1(DensityGrid(d, g), DensityGrid(d, p), lo)
    assert 0 <= s_lo <= split_l1(DensityGrid(d, g), DensityGrid(d, p), hi)


def test_evaluate_identical_and_clear():
    g = homogeneous_slab(0.01, 500.0, 750.0)
    cam = up_camera()
    r = evaluate(g, g, cam)
    assert r.jaccard == 100.0 and r.coverage_error == 0.0 and r.split_l1 == 0.0
    assert r.n_cloud + r.n_empty == D.size
    clear = evaluate(DensityGrid.zeros(D), DensityGrid.zeros(D), cam)
    assert clear.clear_sky and clear.coverage_error == 0.0
    assert evaluate(g, g, cam, lam=None).split_l1 is None


def test_report_mean_skips_clear_sky():
    reports = [MetricsReport(None, 0.0, 0.1, 10, 90), MetricsReport(60.0, 4.0, 0.3, 20, 80),
               MetricsReport(80.0, 2.0, 0.2, 30, 70)]
    m = MetricsReport.mean(reports)
    assert m.jaccard == 70.0 and m.coverage_error == 2.0 and m.split_l1 == pytest.approx(0.2)
    assert MetricsReport.mean(reports[:1]).jaccard is None
    with pytest.raises(ConfigError):
        MetricsReport.mean([])
    assert set(m.to_dict()) == {"jaccard", "coverage_error", "split_l1", "n_cloud", "n_empty"}


def test_cloud_base_heights():
    g = homogeneous_slab(0.01, 500.0, 750.0)
    h = cloud_base_heights(g)
    assert h.shape == (41 * 41,) and np.all(h == 500.0)
    assert cloud_base_heights(DensityGrid.zeros(D)).size == 0


def test_save_png(tmp_path):
    from PIL import Image

    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    save_png(img, tmp_path / "a.png")
    back = np.asarray(Image.open(tmp_path / "a.png"))
    np.testing.assert_array_equal(back, [[0, 128], [255, 255]])
