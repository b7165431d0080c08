import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import occlusion_all_pairs
from tactisim.fields import ParticleLayerSpec
from tactisim.geometry import PinholeCamera, default_gel_to_pinhole, particle_projected_radius, pinhole_project
from tactisim.visibility import (
    ParticleConfig,
    VisibilityGrid,
    bin_indices,
    estimate_visibility_grid,
    load_grid,
    lookup,
    particle_count,
    sample_particles,
    save_grid,
    visible_flags,
    weight,
)


def brute_flags(config, cam, T):
    sP = T.apply(config.centers)
    return occlusion_all_pairs(
        pinhole_project(cam, sP),
        particle_projected_radius(cam, sP, config.radii),
        np.linalg.norm(sP, axis=1),
    )


def test_particle_count_default_layer(layer):
    r = 0.0825
    expected = round(0.002 * 30 * 30 * 4.5 / (4 / 3 * np.pi * r**3))
    assert particle_count(layer) == expected == 3444


def test_sample_particles_deterministic(layer):
    a = sample_particles(layer, 7)
    b = sample_particles(layer, 7)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.radii, b.radii)
    assert np.all(a.centers >= layer.lower) and np.all(a.centers <= layer.upper)
    assert np.all((a.radii >= 0.075) & (a.radii <= 0.09))


def test_sample_particles_zero_count():
    with pytest.raises(ValueError):
        sample_particles(ParticleLayerSpec((1, 1, 1), particle_volume_ratio=1e-9), 0)


def test_single_particle_visible(cam, gel_to_pinhole):
    cfg = ParticleConfig([[15, 15, 2]], [0.08])
    assert visible_flags(cfg, cam, gel_to_pinhole).tolist() == [True]


def test_two_particles_on_one_ray(cam, gel_to_pinhole):
    # both on the optical axis; z = 0 is nearest the camera
    cfg = ParticleConfig([[15, 15, 3.0], [15, 15, 0.5]], [0.08, 0.08])
    assert visible_flags(cfg, cam, gel_to_pinhole).tolist() == [False, True]


def test_far_apart_particles_both_visible(cam, gel_to_pinhole):
    cfg = ParticleConfig([[5, 5, 3.0], [25, 25, 0.5]], [0.09, 0.09])
    assert visible_flags(cfg, cam, gel_to_pinhole).all()


def test_matches_all_pairs_oracle(cam, gel_to_pinhole, rng):
    dense = ParticleLayerSpec((6, 6, 4.5), origin=(12, 12, 0), particle_volume_ratio=0.01)
    for _ in range(20):
        cfg = sample_particles(dense, rng)
        flags = visible_flags(cfg, cam, gel_to_pinhole)
        assert not flags.all()
        assert np.array_equal(flags, brute_flags(cfg, cam, gel_to_pinhole))


def test_adding_particle_never_reveals(cam, gel_to_pinhole, rng):
    dense = ParticleLayerSpec((4, 4, 4.5), origin=(13, 13, 0), particle_volume_ratio=0.01)
    cfg = sample_particles(dense, rng)
    before = visible_flags(cfg, cam, gel_to_pinhole)
    extra = ParticleConfig(np.vstack([cfg.centers, [[15, 15, 0.01]]]), np.append(cfg.radii, 0.09))
    after = visible_flags(extra, cam, gel_to_pinhole)[:-1]
    assert np.all(after <= before)


def test_bin_indices_half_open_and_clamped():
    dims = (2, 3, 4)
    idx = bin_indices([[0, 0, 0], [1.0, 0, 0], [2, 3, 4], [-1, -1, -1], [0.99, 1.0, 1.0]], (0, 0, 0), (2, 3, 4), dims)
    assert idx.tolist() == [0, 1, 2 * 3 * 4 - 1, 0, 0 + 2 * (1 + 3 * 1)]


def test_lookup_examples(layer):
    p = np.arange(27, dtype=float).reshape(3, 3, 3) / 27
    grid = VisibilityGrid((3, 3, 3), layer.origin, layer.extent, p)
    assert lookup(grid, [15, 15, 2.25]) == pytest.approx(np.float32(p[1, 1, 1]))
    # far corners and outside points clamp
    assert grid.lookup([30, 30, 4.5]) == pytest.approx(np.float32(p[2, 2, 2]))
    assert grid.lookup([-5, 50, 2.0]) == pytest.approx(np.float32(p[1, 2, 0]))
    assert grid.lookup(np.zeros((4, 3))).shape == (4,)


def test_uniform_grid_and_weight(layer):
    g = VisibilityGrid.uniform(layer, 0.7)
    assert g.lookup([1, 2, 3]) == pytest.approx(0.7, abs=1e-7)
    assert weight(g, [1, 2, 3], [0, 0, 0.1]) == pytest.approx(0.49, abs=1e-7)
    assert weight(VisibilityGrid.uniform(layer, 1.0), [1, 2, 3], [0.5, 0, 0]) == 1.0


def test_weight_uses_both_locations(layer):
    p = np.array([[[1.0, 0.5]]])  # bins split along x at 15 mm
    g = VisibilityGrid((2, 1, 1), layer.origin, layer.extent, p)
    assert weight(g, [10, 15, 2], [0, 0, 0]) == 1.0
    assert weight(g, [10, 15, 2], [10, 0, 0]) == 0.5
    assert weight(g, [20, 15, 2], [0, 0, 0]) == 0.25


def test_grid_validation(layer):
    with pytest.raises(ValueError):
        VisibilityGrid((1, 1, 1), layer.origin, layer.extent, np.array([[[1.2]]]))
    with pytest.raises(ValueError):
        VisibilityGrid((0, 1, 1), layer.origin, layer.extent, np.zeros(0))


def test_estimate_grid_in_unit_interval_and_deterministic(cam, gel_to_pinhole, layer):
    a = estimate_visibility_grid(layer, cam, gel_to_pinhole, n_configs=3, bin_dims=(5, 5, 3), rng_seed=4)
    b = estimate_visibility_grid(layer, cam, gel_to_pinhole, n_configs=3, bin_dims=(5, 5, 3), rng_seed=4)
    assert np.array_equal(a.probabilities, b.probabilities)
    assert np.all((a.probabilities >= 0) & (a.probabilities <= 1))
    # deeper bins see more occluders on average
    by_depth = a.probabilities.mean(axis=(1, 2))
    assert by_depth[0] > by_depth[-1]


def test_estimate_grid_same_for_any_jobs(cam, gel_to_pinhole, layer):
    a = estimate_visibility_grid(layer, cam, gel_to_pinhole, n_configs=4, bin_dims=(3, 3, 3), rng_seed=9, jobs=1)
    b = estimate_visibility_grid(layer, cam, gel_to_pinhole, n_configs=4, bin_dims=(3, 3, 3), rng_seed=9, jobs=2)
    assert np.array_equal(a.probabilities, b.probabilities)


def _corner_sampler(layer, rng):
    # every particle in the lowest-index bin
    return ParticleConfig(rng.uniform(0, 1, (5, 3)), np.full(5, 0.08))


def test_never_populated_bins_are_one(cam, gel_to_pinhole, layer):
    g = estimate_visibility_grid(layer, cam, gel_to_pinhole, n_configs=2, bin_dims=(3, 3, 3), sampler=_corner_sampler)
    flat = g.probabilities.ravel()
    assert np.all(flat[1:] == 1.0)
    assert 0 <= flat[0] <= 1


def test_grid_save_load(tmp_path, cam, gel_to_pinhole, layer):
    g = estimate_visibility_grid(layer, cam, gel_to_pinhole, n_configs=2, bin_dims=(4, 3, 2), rng_seed=1)
    p = tmp_path / "vis.grid"
    save_grid(g, p)
    h = load_grid(p)
    assert h.bin_dims == (4, 3, 2)
    assert np.array_equal(h.probabilities, g.probabilities)
    pts = np.random.default_rng(0).uniform(0, 30, (50, 3))
    assert np.array_equal(h.lookup(pts), g.lookup(pts))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_grid(p)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
def test_flags_equal_oracle_property(n, seed):
    rng = np.random.default_rng(seed)
    centers = np.column_stack([rng.uniform(14, 16, (n, 2)), rng.uniform(0, 4.5, n)])
    cfg = ParticleConfig(centers, rng.uniform(0.075, 0.09, n))
    cam, T = PinholeCamera(), default_gel_to_pinhole()
    assert np.array_equal(visible_flags(cfg, cam, T), brute_flags(cfg, cam, T))
