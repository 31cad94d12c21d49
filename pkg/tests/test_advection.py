import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cloudcarve.advection import (
    SequenceConfig,
    WindProfile,
    advect,
    candidate_grid,
    center_time,
    fit_wind,
    frame_offsets,
    integrate,
    wind_objective,
)
from cloudcarve.exceptions import ConfigError, DomainError
from cloudcarve.volume import DensityGrid, GridDomain, grid_to_world, sample_trilinear, world_to_grid

from conftest import blob

D = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=50.0, dims=(40, 36, 6))
CENTER = (975.0, 875.0, 125.0)


def random_grid(seed, domain=D):
    return DensityGrid(domain, np.random.default_rng(seed).random(domain.dims) * 0.05)


def test_zero_wind_is_identity():
    g = random_grid(0)
    for dt in (0.0, 5.0, -3.7):
        assert np.array_equal(advect(g, 0.0, 0.0, dt).data, g.data)
    assert np.array_equal(advect(g, 3.0, 4.0, 0.0).data, g.data)


def test_integer_shift_oracle():
    g = random_grid(1)
    out = advect(g, 10.0, 0.0, 5.0).data  # exactly one voxel east
    assert np.array_equal(out[1:], g.data[:-1])
    assert np.all(out[0] == 0)
    out = advect(g, -20.0, 10.0, 5.0).data  # two voxels west, one north
    assert np.array_equal(out[:-2, 1:], g.data[2:, :-1])
    assert np.all(out[-2:] == 0) and np.all(out[:, 0] == 0)


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_advect_matches_backtrace_oracle(u, v, dt, seed):
    shift = np.array([u, v, 0.0]) * dt / D.voxel_size
    # near-integer shifts are snapped to whole voxels; the oracle does not snap
    frac = np.abs(shift - np.round(shift))
    assume(np.all((frac > 1e-6) | (frac == 0)))
    g = random_grid(seed % 1000)
    out = advect(g, u, v, dt).data
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in D.dims], indexing="ij"), axis=-1)
    expected = sample_trilinear(g, idx - shift)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-7)


def test_forward_backward_residual_on_blob():
    g = blob(D, CENTER, 200.0)
    back = advect(advect(g, 7.3, -4.1, 5.0), 7.3, -4.1, -5.0)
    assert np.abs(back.data - g.data).max() <= 0.05 * g.data.max()


def test_advect_rejects_non_finite():
    g = random_grid(2)
    for args in ((math.nan, 0, 1), (0, math.inf, 1), (0, 0, math.nan)):
        with pytest.raises(DomainError):
            advect(g, *args)


def test_center_time_and_offsets():
    assert center_time(20) == 9.5 and center_time(1) == 0
    np.testing.assert_array_equal(frame_offsets(3, 5.0), [5.0, 0.0, -5.0])


def translating(T, wind, base=None, interval=5.0):
    base = base or blob(D, CENTER, 150.0)
    tc = center_time(T)
    return [advect(base, wind[0], wind[1], (i - tc) * interval) for i in range(T)]


def test_objective_zero_cases():
    g = random_grid(3)
    assert wind_objective([g] * 5, 0.0, 0.0) == 0.0
    assert wind_objective([g], 13.0, -2.0) == 0.0


def population_variance_oracle(frames, u, v, interval, margin=0):
    T = len(frames)
    stack = np.stack([advect(f, u, v, dt).data.astype(np.float64)
                      for f, dt in zip(frames, frame_offsets(T, interval))])
    var = np.var(stack, axis=0)
    if margin:
        var = var[margin:-margin, margin:-margin]
    return float(np.mean(var))


@pytest.mark.parametrize("T", [2, 3, 6])
def test_objective_matches_numpy_oracle(T):
    frames = [random_grid(10 + i) for i in range(T)]
    full = SequenceConfig(boundary="full")
    for u, v in ((0, 0), (3.3, -7.1), (10, 10), (-25.5, 4)):
        got = wind_objective(frames, u, v, full)
        assert got == pytest.approx(population_variance_oracle(frames, u, v, 5.0), rel=1e-6, abs=1e-15)


@pytest.mark.parametrize("T", [2, 3, 6])
def test_interior_objective_matches_cropped_oracle(T):
    frames = [random_grid(30 + i) for i in range(T)]
    cfg = SequenceConfig(u_max=6.0, coarse_step=2.0)
    # (6 + 2) m/s over (T - 1) / 2 * 5 s, in 50 m voxels, rounded up
    margin = int(np.ceil(8.0 * (T - 1) * 2.5 / 50.0 - 1e-9))
    for u, v in ((0, 0), (3.3, -7.1), (-8, 2.5)):
        got = wind_objective(frames, u, v, cfg)
        expected = population_variance_oracle(frames, u, v, 5.0, margin)
        assert got == pytest.approx(expected, rel=1e-6, abs=1e-15)


def test_interior_objective_ignores_boundary_inflow():
    # frames agree everywhere except a boundary strip that any wind could advect in
    a = random_grid(40)
    data = a.data.copy()
    data[:2] += 0.5
    b = DensityGrid(D, data)
    cfg = SequenceConfig(u_max=38.0)  # 40 m/s over 2.5 s: a two-column margin
    assert wind_objective([a, b], 0.0, 0.0, cfg) == 0.0
    assert wind_objective([a, b], 0.0, 0.0, SequenceConfig(boundary="full")) > 0.0


@pytest.mark.parametrize("boundary", ["full", "interior"])
def test_objective_minimized_at_generating_wind(boundary):
    frames = translating(8, (10.0, -5.0))
    cfg = SequenceConfig(u_max=12.0, boundary=boundary)
    at_truth = wind_objective(frames, 10.0, -5.0, cfg)
    assert at_truth <= 1e-15
    for u, v in candidate_grid((0.0, 0.0), 12.0, 2.0):
        assert at_truth <= wind_objective(frames, u, v, cfg)


@pytest.mark.parametrize("boundary", ["full", "interior"])
def test_fit_recovers_blob_wind(boundary):
    frames = translating(20, (10.0, -5.0))
    w = fit_wind(frames, SequenceConfig(u_max=12.0, boundary=boundary))
    assert abs(w.u - 10.0) <= 0.25 and abs(w.v + 5.0) <= 0.25
    assert w.evaluations > 0 and w.objective >= 0


def test_fit_recovers_fractional_wind():
    frames = translating(10, (6.3, 3.1))
    w = fit_wind(frames, SequenceConfig(u_max=12.0))
    assert abs(w.u - 6.3) <= 0.25 and abs(w.v - 3.1) <= 0.25


def test_static_sequence_ties_break_to_zero():
    g = random_grid(4)
    w = fit_wind([g] * 4)
    assert (w.u, w.v, w.objective) == (0.0, 0.0, 0.0)


def test_empty_sequence_fits_zero():
    z = DensityGrid.zeros(D)
    w = fit_wind([z, z, z])
    assert (w.u, w.v) == (0.0, 0.0)


def test_single_frame_fit():
    w = fit_wind([random_grid(5)])
    assert (w.u, w.v, w.objective) == (0.0, 0.0, 0.0) and w.evaluations in (0, 1)


def test_fit_is_translation_equivariant():
    a = translating(6, (8.0, 4.0), blob(D, CENTER, 150.0))
    b = translating(6, (8.0, 4.0), blob(D, (CENTER[0] - 150.0, CENTER[1] + 100.0, CENTER[2]), 150.0))
    cfg = SequenceConfig(u_max=12.0)
    wa, wb = fit_wind(a, cfg), fit_wind(b, cfg)
    assert (wa.u, wa.v) == (wb.u, wb.v)


def test_fit_deterministic():
    frames = translating(5, (4.0, -6.0))
    assert fit_wind(frames) == fit_wind(frames)


def test_domain_mismatch_is_config_error():
    other = GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=50.0, dims=(40, 36, 7))
    with pytest.raises(ConfigError):
        wind_objective([random_grid(0), random_grid(0, other)], 0, 0)
    with pytest.raises(ConfigError):
        integrate([random_grid(0), random_grid(0, other)], WindProfile(0, 0))


def test_integrate_identities():
    g = random_grid(6)
    assert np.array_equal(integrate([g], WindProfile(5, 5)).data, g.data)
    assert np.array_equal(integrate([g] * 7, WindProfile(0, 0)).data, g.data)
    frames = [random_grid(20 + i) for i in range(4)]
    mean = np.mean([f.data.astype(np.float64) for f in frames], axis=0)
    np.testing.assert_array_equal(integrate(frames, WindProfile(0, 0)).data, mean.astype(np.float32))


def test_integrate_undoes_translation():
    frames = translating(6, (10.0, 0.0))
    fused = integrate(frames, WindProfile(10.0, 0.0)).data
    # integer-voxel offsets for odd frame distance: compare away from the boundary
    core = (slice(8, -8), slice(None), slice(None))
    center = blob(D, CENTER, 150.0).data
    assert np.abs(fused[core] - center[core]).max() < 0.05 * center.max()


def test_integrated_noise_shrinks_like_sqrt_t():
    rng = np.random.default_rng(7)
    s, T = 0.01, 16
    ratios = []
    for _ in range(30):
        frames = [DensityGrid(D, 0.1 + rng.normal(0, s, D.dims)) for _ in range(T)]
        ratios.append(np.std(integrate(frames, WindProfile(0, 0)).data))
    assert np.mean(ratios) == pytest.approx(s / math.sqrt(T), rel=0.2)


@given(st.integers(0, 2**32 - 1), st.floats(-20, 20), st.floats(-20, 20))
def test_integrate_nonnegative(seed, u, v):
    frames = [random_grid(seed % 997 + i) for i in range(3)]
    assert integrate(frames, WindProfile(u, v)).data.min() >= 0


def test_sequence_config_validation():
    for kw in ({"frame_interval": 0}, {"window": 0}, {"refine_step": 3.0}, {"coarse_step": 0},
               {"boundary": "periodic"}):
        with pytest.raises(ConfigError):
            SequenceConfig(**kw)


def test_wind_profile_rejects_bad_objective():
    with pytest.raises(DomainError):
        WindProfile(0, 0, -1.0)


def test_candidate_grid_covers_bounds():
    c = candidate_grid((0.0, 0.0), 30.0, 2.0)
    assert len(c) == 31 * 31 and (-30.0, 30.0) in c
    r = candidate_grid((4.0, -2.0), 2.0, 0.25)
    assert len(r) == 17 * 17 and (2.0, -4.0) in r and (6.0, 0.0) in r


def test_grid_world_helpers_consistent():
    g = np.array([1.5, 2.0, 3.25])
    np.testing.assert_allclose(world_to_grid(grid_to_world(g, D), D), g)
