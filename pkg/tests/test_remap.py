import json

import numpy as np
import pytest

from tactisim.flow import FeatureImage
from tactisim.geometry import GeometryError, RigidTransform, pinhole_project, rotation_about_axis
from tactisim.remap import (
    FisheyeModel,
    RemapTable,
    build_remap_table,
    feature_mse,
    grid_search_translation,
    load_fisheye_json,
    load_remap_table,
    read_pgm,
    refine_translation,
    remap_image,
    save_fisheye_json,
    save_remap_table,
    world2cam,
    write_pgm,
)

# equidistant lens covering about 80 degrees of half-angle on a 640 x 480 sensor
EQUI = FisheyeModel((200.0,), np.eye(2), (320.0, 240.0), (640, 480), "theta", np.deg2rad(85))


# world2cam


def test_world2cam_on_axis_hits_center():
    np.testing.assert_allclose(world2cam(EQUI, [0, 0, -10]), [320, 240])


def test_world2cam_equidistant_off_axis():
    # 45 degrees in the x-z plane: rho = 200 * pi / 4
    np.testing.assert_allclose(world2cam(EQUI, [5, 0, -5]), [320 + 50 * np.pi, 240], atol=1e-12)
    np.testing.assert_allclose(world2cam(EQUI, [0, -5, -5]), [320, 240 - 50 * np.pi], atol=1e-12)


def test_world2cam_tan_model_is_pinhole(cam, rng):
    model = FisheyeModel.from_pinhole(cam)
    s = np.column_stack([rng.uniform(-10, 10, (200, 2)), rng.uniform(-40, -10, 200)])
    np.testing.assert_allclose(world2cam(model, s), pinhole_project(cam, s), atol=1e-9)


def test_world2cam_affine_and_fov():
    m = FisheyeModel((200.0,), [[1.0, 0.1], [0.0, 1.2]], (320, 240), (640, 480), "theta", np.deg2rad(60))
    np.testing.assert_allclose(world2cam(m, [0, 5, -5]), [320 + 0.1 * 50 * np.pi, 240 + 1.2 * 50 * np.pi])
    with pytest.raises(GeometryError):
        world2cam(m, [10, 0, -1])
    with pytest.raises(GeometryError):
        world2cam(m, [0, 0, 5])
    assert np.isnan(world2cam(m, [0, 0, 5], strict=False)).all()


def test_rho_monotone_check():
    with pytest.raises(ValueError):
        FisheyeModel((200.0, -300.0))
    with pytest.raises(ValueError):
        FisheyeModel((200.0,), radial_model="tan", theta_max=np.pi / 2)


def test_world2cam_monotone_and_injective():
    poly = FisheyeModel((190.0, 0.0, -8.0, 1.0), center=(320, 240), theta_max=np.deg2rad(80))
    th = np.linspace(0, np.deg2rad(80), 500)
    assert np.all(np.diff(poly.rho(th)) > 0)
    g = np.linspace(-1, 1, 100)
    X, Y = np.meshgrid(g, g)
    pix = world2cam(poly, np.stack([X, Y, -np.ones_like(X)], -1)).reshape(-1, 2)
    assert len(np.unique(np.round(pix, 9), axis=0)) == pix.shape[0]


# remap tables


def test_identity_table(cam, gel_to_pinhole):
    table = build_remap_table(FisheyeModel.from_pinhole(cam), gel_to_pinhole, cam, gel_to_pinhole)
    assert table.mapped.all()
    v, u = np.mgrid[0:440, 0:440] + 0.5
    assert np.max(np.abs(table.map_u - u)) < 1e-6
    assert np.max(np.abs(table.map_v - v)) < 1e-6


def test_shifted_camera_gives_uniform_shift(cam, gel_to_pinhole):
    delta = 0.3
    shifted = gel_to_pinhole.with_translation(gel_to_pinhole.translation + [delta, 0, 0])
    table = build_remap_table(FisheyeModel.from_pinhole(cam), shifted, cam, gel_to_pinhole)
    u = np.arange(440) + 0.5
    # source coordinate moves by |f| * delta / |z_plane|
    expected = u + 440 * delta / 30
    inside = table.mapped
    assert inside.mean() > 0.95
    np.testing.assert_allclose(np.where(inside, table.map_u, np.nan)[:, :-20], np.broadcast_to(expected, (440, 440))[:, :-20], atol=1e-9)


def test_equidistant_fisheye_maps_everything(cam, gel_to_pinhole):
    gel_to_cam = RigidTransform(gel_to_pinhole.rotation @ rotation_about_axis([0, 0, 1], 0.02).T, gel_to_pinhole.translation + [0.2, -0.1, 8.0])
    table = build_remap_table(EQUI, gel_to_cam, cam, gel_to_pinhole)
    assert table.mapped.all()
    assert np.all((table.map_u >= 0) & (table.map_u <= 640))


def test_remap_identity_image(cam, gel_to_pinhole, rng):
    table = build_remap_table(FisheyeModel.from_pinhole(cam), gel_to_pinhole, cam, gel_to_pinhole)
    img = rng.integers(0, 256, (440, 440), dtype=np.uint8)
    assert np.array_equal(remap_image(table, img), img)
    assert np.array_equal(remap_image(table, img, "nearest"), img)


def test_remap_integer_shift_and_constant():
    v, u = np.mgrid[0:20, 0:30] + 0.5
    table = RemapTable(u + 3, v + 2, (40, 30))
    img = np.arange(40 * 30, dtype=np.uint32).reshape(30, 40) % 251
    img = img.astype(np.uint8)
    out = remap_image(table, img)
    assert np.array_equal(out, img[2:22, 3:33])
    const = np.full((30, 40), 77, np.uint8)
    assert np.all(remap_image(table, const) == 77)


def test_remap_half_pixel_average_and_unmapped():
    u = np.array([[1.0, np.nan]])
    v = np.array([[0.5, 0.5]])
    table = RemapTable(u, v, (2, 1))
    out = remap_image(table, np.array([[10, 20]], np.uint8))
    assert out.tolist() == [[15, 0]]
    assert remap_image(table, np.array([[10, 20]], np.uint8), "nearest").tolist() == [[20, 0]]


def test_remap_dimension_mismatch():
    table = RemapTable(np.zeros((2, 2)), np.zeros((2, 2)), (5, 4))
    with pytest.raises(ValueError):
        remap_image(table, np.zeros((5, 4), np.uint8))
    with pytest.raises(ValueError):
        remap_image(table, np.zeros((4, 5), np.uint8), "cubic")


def test_table_and_fisheye_files(tmp_path, gel_to_pinhole):
    t = RemapTable(np.array([[1.5, np.nan]]), np.array([[0.5, 2.0]]), (3, 3))
    save_remap_table(t, tmp_path / "t.npz")
    back = load_remap_table(tmp_path / "t.npz")
    np.testing.assert_array_equal(back.map_u, t.map_u)
    assert back.src_size == (3, 3)
    save_fisheye_json(EQUI, gel_to_pinhole, tmp_path / "f.json")
    assert "translation_mm" in json.loads((tmp_path / "f.json").read_text())
    model, T = load_fisheye_json(tmp_path / "f.json")
    assert model.poly == EQUI.poly and model.theta_max == EQUI.theta_max
    np.testing.assert_array_equal(T.translation, gel_to_pinhole.translation)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "b.pgm")


# refinement


def test_feature_mse():
    a = FeatureImage(np.zeros((2, 2, 2)))
    b = FeatureImage(np.ones((2, 2, 2)) * 2)
    assert feature_mse(a, b) == 4.0
    with pytest.raises(ValueError):
        feature_mse(a, FeatureImage(np.zeros((2, 3, 3))))


def quadratic_probe(target, scale=1.0):
    """Features whose MSE against zeros is a convex quadratic in ``t - target``."""
    target = np.asarray(target, float)

    def make(t):
        data = np.zeros((2, 2, 2))
        data[0, 0, :2] = scale * (np.asarray(t) - target)[:2]
        data[1, 0, 0] = scale * (t[2] - target[2])
        return FeatureImage(data)

    return make


REAL = FeatureImage(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("strategy", ["exhaustive", "coarse_to_fine"])
def test_grid_search_finds_lattice_target(strategy):
    t0 = np.array([-15.0, 15.0, -30.0])
    target = t0 + [0.3, -0.45, 0.15]
    res = grid_search_translation(quadratic_probe(target), REAL, t0, radius=0.6, step=0.05, strategy=strategy)
    np.testing.assert_allclose(res.translation, target, atol=1e-12)
    assert res.mse == pytest.approx(0, abs=1e-20)
    if strategy == "exhaustive":
        assert res.n_evaluations == 25**3


def test_grid_search_returns_t_init_when_it_matches():
    t0 = np.array([1.0, 2.0, 3.0])
    res = grid_search_translation(quadratic_probe(t0), REAL, t0, radius=0.2, step=0.05)
    np.testing.assert_array_equal(res.offset, 0)


def test_grid_search_tie_prefers_smallest_offset():
    flat = lambda t: REAL  # noqa: E731
    res = grid_search_translation(flat, REAL, [0, 0, 0], radius=0.2, step=0.05, strategy="exhaustive")
    np.testing.assert_array_equal(res.offset, 0)


def test_finer_step_never_worse():
    t0 = np.zeros(3)
    target = np.array([0.123, -0.077, 0.031])
    coarse = grid_search_translation(quadratic_probe(target), REAL, t0, 0.3, 0.1, "exhaustive")
    fine = grid_search_translation(quadratic_probe(target), REAL, t0, 0.3, 0.05, "exhaustive")
    assert fine.mse <= coarse.mse


def test_feature_scaling_does_not_move_optimum():
    t0 = np.zeros(3)
    target = np.array([0.2, 0.1, -0.25])
    a = refine_translation(quadratic_probe(target), REAL, t0, 0.4, 0.05)
    b = refine_translation(quadratic_probe(target, scale=7.0), REAL, t0, 0.4, 0.05)
    np.testing.assert_array_equal(a, b)


def test_grid_search_threads_match_serial():
    target = np.array([0.35, 0.1, -0.2])
    a = grid_search_translation(quadratic_probe(target), REAL, np.zeros(3), 0.5, 0.05, jobs=1)
    b = grid_search_translation(quadratic_probe(target), REAL, np.zeros(3), 0.5, 0.05, jobs=3)
    np.testing.assert_array_equal(a.translation, b.translation)
    assert a.n_evaluations == b.n_evaluations


def test_grid_search_errors():
    with pytest.raises(ValueError):
        grid_search_translation(quadratic_probe(np.zeros(3)), FeatureImage(np.full((2, 2, 2), np.nan)), np.zeros(3))
    with pytest.raises(ValueError):
        grid_search_translation(quadratic_probe(np.zeros(3)), REAL, np.zeros(3), step=0)
    bad = lambda t: FeatureImage(np.full((2, 2, 2), np.inf))  # noqa: E731
    with pytest.raises(ValueError, match="non-finite"):
        grid_search_translation(bad, REAL, np.zeros(3), radius=0.1, step=0.05)
    with pytest.raises(ValueError):
        grid_search_translation(quadratic_probe(np.zeros(3)), REAL, np.zeros(3), 0.1, 0.05, strategy="random")
