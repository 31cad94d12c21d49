import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cloudcarve.camera import CameraModel, DepthMap, camera_from_fov, make_paper_rig, signed_view_distance
from cloudcarve.carving import (
    CarveConfig,
    backproject_features,
    carve_single_view,
    carving_to_density,
    combine_carvings,
    depth_carve,
    silhouette_carve,
    tsdf_fuse,
    tsdf_to_carving,
)
from cloudcarve.exceptions import ConfigError
from cloudcarve.synthetic import SURFACE_DENSITY, SceneParams, generate_cloud_field, render_depth, render_silhouette
from cloudcarve.volume import CarvingGrid, GridDomain

# a column of voxels on the optical axis of an upward camera
COLUMN = GridDomain(origin=(0.0, 0.0, 100.0), voxel_size=100.0, dims=(1, 1, 40))


def up_camera(size=9, fov=60.0):
    return camera_from_fov((0, 0, 0), (0, 0, 1), size, size, fov)


def flat_depth(value, size=9):
    return DepthMap(np.full((size, size), value))


def column_heights():
    return COLUMN.axes()[2]


def test_keep_rule_examples():
    cam = up_camera()
    keep = carve_single_view(COLUMN, cam, flat_depth(3000.0)).data.reshape(-1)
    z = column_heights()
    # kept iff the voxel is less than epsilon in front of the surface
    np.testing.assert_array_equal(keep, (z > 3000.0 - 1000.0).astype(np.uint8))
    assert keep[z == 2500.0][0] == 1  # 500 m in front
    assert keep[z == 1500.0][0] == 0  # 1500 m in front
    assert keep[z == 2000.0][0] == 0  # exactly epsilon in front is carved


def test_sky_carves_whole_ray_and_unobserved_is_kept():
    cam = up_camera()
    assert carve_single_view(COLUMN, cam, DepthMap.sky(9, 9)).data.sum() == 0
    sideways = camera_from_fov((0, 0, 0), (1, 0, 0), 9, 9, 10.0)
    assert carve_single_view(COLUMN, sideways, DepthMap.sky(9, 9)).data.all()


def _random_views(rng, n, domain):
    cams, depths = [], []
    center = np.asarray(domain.origin) + (np.asarray(domain.dims) - 1) * domain.voxel_size / 2
    for _ in range(n):
        pos = center + rng.normal(size=3) * 3000
        cam = camera_from_fov(pos, center + rng.normal(size=3) * 300, 16, 12, 70.0)
        d = rng.uniform(500, 6000, (12, 16))
        d[rng.random((12, 16)) < 0.2] = np.inf
        cams.append(cam)
        depths.append(DepthMap(d))
    return cams, depths


SMALL = GridDomain(origin=(-500.0, -500.0, 0.0), voxel_size=100.0, dims=(11, 11, 8))


@given(st.integers(0, 2**32 - 1), st.floats(0, 3000), st.floats(0, 3000))
def test_epsilon_monotone(seed, e1, e2):
    cams, depths = _random_views(np.random.default_rng(seed), 1, SMALL)
    lo, hi = sorted((e1, e2))
    a = carve_single_view(SMALL, cams[0], depths[0], CarveConfig(epsilon=lo)).data
    b = carve_single_view(SMALL, cams[0], depths[0], CarveConfig(epsilon=hi)).data
    assert np.all(a <= b)


@given(st.integers(0, 2**32 - 1))
def test_adding_views_only_removes(seed):
    cams, depths = _random_views(np.random.default_rng(seed), 4, SMALL)
    prev = CarvingGrid.ones(SMALL).data
    for k in range(1, 5):
        cur = depth_carve(SMALL, cams[:k], depths[:k]).data
        assert np.all(cur <= prev)
        prev = cur


@given(st.integers(0, 2**32 - 1))
def test_combine_commutative_idempotent(seed):
    cams, depths = _random_views(np.random.default_rng(seed), 3, SMALL)
    cs = [carve_single_view(SMALL, c, d) for c, d in zip(cams, depths)]
    ab = combine_carvings(cs).data
    assert np.array_equal(ab, combine_carvings(cs[::-1]).data)
    assert np.array_equal(combine_carvings([cs[0], cs[0]]).data, cs[0].data)
    assert np.array_equal(ab, depth_carve(SMALL, cams, depths).data)


def test_combine_rejects_mismatched_domains():
    with pytest.raises(ConfigError):
        combine_carvings([CarvingGrid.ones(SMALL), CarvingGrid.ones(COLUMN)])
    with pytest.raises(ConfigError):
        combine_carvings([])


def test_min_views_keeps_poorly_observed_voxels():
    cams, depths = _random_views(np.random.default_rng(5), 3, SMALL)
    base = depth_carve(SMALL, cams, depths).data
    relaxed = depth_carve(SMALL, cams, depths, CarveConfig(min_views=3)).data
    seen = sum(~np.isnan(signed_view_distance(c, d, SMALL.centers())) for c, d in zip(cams, depths))
    assert np.all(relaxed >= base)
    assert np.all(relaxed.reshape(-1)[seen < 3] == 1)
    np.testing.assert_array_equal(relaxed.reshape(-1)[seen >= 3], base.reshape(-1)[seen >= 3])


def test_carve_config_validation():
    with pytest.raises(ConfigError):
        CarveConfig(epsilon=-1)
    with pytest.raises(ConfigError):
        CarveConfig(min_views=0)


@pytest.mark.parametrize("seed", range(3))
def test_soundness_and_depth_inside_silhouette(coarse_domain, seed):
    g = generate_cloud_field(coarse_domain, SceneParams(seed=seed))
    rig = make_paper_rig(seed)
    cams = rig.reference_cameras
    depths = [render_depth(g, c) for c in cams]
    carved = depth_carve(coarse_domain, cams, depths).data
    # every voxel dense enough to form a visible surface survives
    assert np.all(carved[g.data >= SURFACE_DENSITY] == 1)
    hull = silhouette_carve(coarse_domain, cams, [render_silhouette(d) for d in depths]).data
    assert np.all(carved <= hull)
    assert carved.sum() < hull.sum()


def test_silhouette_mask_shape_checked():
    cam = up_camera()
    with pytest.raises(ConfigError):
        silhouette_carve(COLUMN, [cam], [np.ones((3, 3))])
    with pytest.raises(ConfigError):
        silhouette_carve(COLUMN, [cam, cam], [np.ones((9, 9))])


def test_tsdf_single_view_matches_hand_formula():
    cam = up_camera()
    tsdf = tsdf_fuse(COLUMN, [cam], [flat_depth(2000.0)], truncation=1000.0).reshape(-1)
    z = column_heights()
    np.testing.assert_allclose(tsdf, np.clip((z - 2000.0) / 1000.0, -1, 1))
    assert tsdf[z == 3500.0][0] == 1.0 and tsdf[z == 500.0][0] == -1.0
    assert tsdf_fuse(COLUMN, [cam], [DepthMap.sky(9, 9)]).max() == -1.0
    kept = tsdf_to_carving(COLUMN, tsdf).data.reshape(-1)
    np.testing.assert_array_equal(kept, (z >= 2000.0).astype(np.uint8))


def test_tsdf_unobserved_is_zero_and_views_average():
    sideways = camera_from_fov((0, 0, 0), (1, 0, 0), 9, 9, 10.0)
    assert np.all(tsdf_fuse(COLUMN, [sideways], [flat_depth(10.0)]) == 0)
    cam = up_camera()
    two = tsdf_fuse(COLUMN, [cam, cam], [flat_depth(2000.0), flat_depth(3000.0)]).reshape(-1)
    z = column_heights()
    expected = (np.clip((z - 2000) / 1000, -1, 1) + np.clip((z - 3000) / 1000, -1, 1)) / 2
    np.testing.assert_allclose(two, expected)


def test_backproject_features():
    cam = up_camera()
    sideways = camera_from_fov((0, 0, 0), (1, 0, 0), 9, 9, 10.0)
    a = np.full((9, 9, 2), [1.0, 2.0])
    b = np.full((9, 9, 2), [3.0, 6.0])
    fv = backproject_features(COLUMN, [cam], [a])
    assert np.all(fv.counts == 1) and np.allclose(fv.data, [1.0, 2.0])
    fv = backproject_features(COLUMN, [cam, cam], [a, b])
    assert np.allclose(fv.data, [2.0, 4.0]) and np.all(fv.counts == 2)
    fv = backproject_features(COLUMN, [sideways], [a])
    assert np.all(fv.counts == 0) and np.all(fv.data == 0)
    with pytest.raises(ConfigError):
        backproject_features(COLUMN, [cam, cam], [a, np.ones((9, 9, 3))])


def test_carving_to_density():
    assert np.all(carving_to_density(CarvingGrid(COLUMN, np.zeros(40))).data == 0)
    np.testing.assert_array_equal(carving_to_density(CarvingGrid.ones(COLUMN)).data, np.float32(0.04))
    with pytest.raises(ConfigError):
        carving_to_density(CarvingGrid.ones(COLUMN), -1.0)


def test_depth_size_mismatch_rejected():
    cam = CameraModel(10, 10, 4, 4, 9, 9)
    with pytest.raises(ConfigError):
        carve_single_view(COLUMN, cam, DepthMap.sky(8, 9))
