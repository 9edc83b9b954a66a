import math

import numpy as np
import pytest

from pano_epipolar.core.epipolar import (
    EpipolarMaskBuilder,
    EpipolarMaskTensor,
    EpipolarPlane,
    EpipolarSamples,
    MaskParams,
    build_mask,
    curve_distance,
    distance_to_curves,
    epipolar_plane,
    epipolar_v_of_u,
    epipole,
    estimate_mask_bytes,
    mask_jaccard,
    mask_rows,
    min_distance,
    plane_coeffs_literal,
    project_point,
    sample_epipolar,
)
from pano_epipolar.core.errors import DegenerateGeometryError, MemoryBudgetError, ShapeMismatchError
from pano_epipolar.core.geometry import (
    CameraPose,
    GridSpec,
    PixelCoord,
    PoseConvention,
    RelativePose,
    Rotation3,
    direction_to_pixel,
    grid_directions,
    pixel_to_direction,
    relative_pose,
)

PANO = GridSpec(512, 256)
FEAT = GridSpec(16, 8)
QUARTER = Rotation3.about_y(math.pi / 2)


def rel(t, rotation=None):
    return RelativePose.from_parts(rotation or Rotation3.identity(), np.array(t, dtype=float))


def forward_pixel(g):
    """Pixel whose direction is (0, 0, 1)."""
    return PixelCoord(g.width - 0.5, g.height / 2 - 0.5)


def c2w(t, rotation=None):
    return CameraPose(rotation or Rotation3.identity(), np.array(t, dtype=float), PoseConvention.CAM_TO_WORLD)


def test_project_point_and_epipole():
    np.testing.assert_allclose(project_point(RelativePose.identity(), [0.0, 0.0, 1.0]), [0, 0, 1])
    np.testing.assert_allclose(project_point(rel((1, 0, 0)), [0.0, 0.0, 1.0]), [1, 0, 1])
    np.testing.assert_allclose(project_point(rel((0, 0, 0), QUARTER), [1.0, 0.0, 0.0]), [0, 0, -1], atol=1e-12)

    np.testing.assert_allclose(epipole(RelativePose.identity()), [0, 0, 0])
    np.testing.assert_allclose(epipole(rel((1, 0, 0))), [1, 0, 0])
    np.testing.assert_allclose(epipole(rel((0, 0, 2), QUARTER)), [0, 0, 2])


def test_epipolar_plane_normals():
    plane = epipolar_plane(rel((1, 0, 0)), forward_pixel(PANO), PANO)
    assert not plane.degenerate
    np.testing.assert_allclose(plane.normal, [0, -1, 0], atol=1e-12)

    # o = (0, 1, 0); with zero rotation p_{i->j} = dir + o, and o x (dir + o) = o x dir
    plane = epipolar_plane(rel((0, 1, 0)), forward_pixel(PANO), PANO)
    np.testing.assert_allclose(plane.normal, [1, 0, 0], atol=1e-12)


def test_epipolar_plane_degenerate_at_epipole():
    # query direction (1, 0, 0) is parallel to the baseline
    query = direction_to_pixel(np.array([1.0, 0.0, 0.0]), PANO)
    plane = epipolar_plane(rel((1, 0, 0)), query, PANO)
    assert plane.degenerate
    assert epipolar_plane(RelativePose.identity(), query, PANO).degenerate


def test_plane_coeffs_literal():
    assert plane_coeffs_literal(EpipolarPlane(np.array([1.0, 2.0, 4.0]), False)) == (0.25, 0.5)
    assert plane_coeffs_literal(EpipolarPlane(np.array([3.0, 0.0, 3.0]), False)) == (1.0, 0.0)
    with pytest.raises(DegenerateGeometryError):
        plane_coeffs_literal(EpipolarPlane(np.array([0.0, -1.0, 0.0]), False))


def test_epipolar_v_of_u():
    assert float(epipolar_v_of_u(1.0, 1.0, 128, PANO)) == pytest.approx(192.0)
    assert float(epipolar_v_of_u(0.0, 1.0, 0, PANO)) == pytest.approx(192.0)
    with pytest.raises(DegenerateGeometryError):
        epipolar_v_of_u(1.0, 0.0, 10, PANO)


def test_sample_epipolar_equator():
    r = rel((1, 0, 0))
    plane = epipolar_plane(r, forward_pixel(PANO), PANO)
    samples = sample_epipolar(plane, 4, PANO, r)
    assert samples.k == 4
    np.testing.assert_allclose(samples.points.v, 127.5, atol=1e-9)
    lon = 2 * np.pi * (samples.points.u + 0.5) / PANO.width
    gaps = np.sort(np.mod(np.diff(np.sort(lon)), 2 * np.pi))
    np.testing.assert_allclose(gaps, np.pi / 2, atol=1e-9)


def test_sample_epipolar_pure_rotation_fallback():
    query = PixelCoord(100.0, 40.0)
    r = RelativePose.identity()
    samples = sample_epipolar(epipolar_plane(r, query, PANO), 7, PANO, r)
    np.testing.assert_allclose(samples.points.u, 100.0, atol=1e-9)
    np.testing.assert_allclose(samples.points.v, 40.0, atol=1e-9)

    r = rel((0, 0, 0), QUARTER)
    samples = sample_epipolar(epipolar_plane(r, query, PANO), 3, PANO, r)
    expected = direction_to_pixel(QUARTER.apply(pixel_to_direction(query, PANO)), PANO)
    np.testing.assert_allclose(samples.points.u, expected.u, atol=1e-9)
    np.testing.assert_allclose(samples.points.v, expected.v, atol=1e-9)


def test_sample_epipolar_query_at_epipole():
    query = direction_to_pixel(np.array([1.0, 0.0, 0.0]), PANO)
    r = rel((2, 0, 0))
    samples = sample_epipolar(epipolar_plane(r, query, PANO), 5, PANO, r)
    np.testing.assert_allclose(samples.points.u, query.u, atol=1e-9)
    np.testing.assert_allclose(samples.points.v, query.v, atol=1e-9)


def test_samples_lie_on_plane():
    rng = np.random.default_rng(4)
    r = RelativePose.from_parts(Rotation3.random(rng), rng.normal(size=3))
    query = PixelCoord(33.0, 71.0)
    plane = epipolar_plane(r, query, PANO)
    n_hat = plane.normal / np.linalg.norm(plane.normal)
    samples = sample_epipolar(plane, 250, PANO, r)
    assert np.abs(pixel_to_direction(samples.points, PANO) @ n_hat).max() <= 1e-9


def test_sample_epipolar_rejects_bad_k():
    r = rel((1, 0, 0))
    with pytest.raises(ValueError):
        sample_epipolar(epipolar_plane(r, PixelCoord(1.0, 1.0), PANO), 0, PANO, r)


def test_min_distance():
    samples = EpipolarSamples(PixelCoord(np.array([511.0]), np.array([10.0])), 1)
    assert min_distance(PixelCoord(1.0, 10.0), samples, PANO) == pytest.approx(2.0)
    assert min_distance(PixelCoord(511.0, 10.0), samples, PANO) == 0.0

    r = rel((1, 0, 0))
    dense = sample_epipolar(epipolar_plane(r, forward_pixel(PANO), PANO), 4096, PANO, r)
    assert min_distance(PixelCoord(200.0, 132.5), dense, PANO) == pytest.approx(5.0, abs=1e-6)


def test_curve_distance_matches_vertical_offset():
    r = rel((1, 0, 0))
    query_dir = np.array([0.0, 0.0, 1.0])
    d = curve_distance(PixelCoord(np.array([10.0, 300.0]), np.array([130.5, 127.5])), r, query_dir, PANO)
    np.testing.assert_allclose(d, [3.0, 0.0], atol=0.03)


def test_distance_to_curves_batched():
    r = rel((1, 0, 0))
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    targets = PixelCoord(np.array([50.0, 50.0]), np.array([127.5, 125.5]))
    np.testing.assert_allclose(distance_to_curves(r, dirs, targets, PANO), [0.0, 2.0], atol=0.2)


def test_mask_params_validation():
    with pytest.raises(ValueError):
        MaskParams(FEAT, k=0)
    with pytest.raises(ValueError):
        MaskParams(FEAT, tau=0.0)
    assert MaskParams(FEAT) == MaskParams(GridSpec(16, 8))


def test_build_mask_single_identity_frame():
    params = MaskParams(FEAT)
    mask = build_mask([c2w((0, 0, 0))], params, 0)
    dense = mask.to_dense()
    assert dense.shape == (128, 1, 128)
    np.testing.assert_array_equal(dense[:, 0, :], np.eye(128, dtype=bool))
    assert mask.density() == 1 / 128


def test_build_mask_rows_are_never_empty():
    poses = [c2w((0, 0, 0)), c2w((0.5, 0.1, 0.2), Rotation3.about_y(0.3)), c2w((2.0, -0.3, 1.0))]
    mask = build_mask(poses, MaskParams(FEAT), 1)
    dense = mask.to_dense()
    assert dense.any(axis=2).all()
    # the query frame itself keeps the diagonal
    assert dense[np.arange(128), 1, np.arange(128)].all()


def test_build_mask_matches_literal_threshold():
    poses = [c2w((0, 0, 0)), c2w((0.7, 0.2, -0.4), Rotation3.about_y(1.1))]
    params = MaskParams(GridSpec(12, 6), k=40)
    dense = build_mask(poses, params, 0).to_dense()

    r = relative_pose(poses[0], poses[1])
    centers = params.grid.pixel_centers()
    keys = PixelCoord(centers.u.reshape(-1), centers.v.reshape(-1))
    for query in (0, 17, 40, 71):
        p = PixelCoord(float(query % 12), float(query // 12))
        samples = sample_epipolar(epipolar_plane(r, p, params.grid), params.k, params.grid, r)
        expected = [min_distance(PixelCoord(u, v), samples, params.grid) <= params.tau + 1e-9
                    for u, v in zip(keys.u, keys.v)]
        np.testing.assert_array_equal(dense[query, 1], expected)


def test_build_mask_is_scale_invariant():
    poses = [c2w((0, 0, 0)), c2w((0.3, 0.4, -0.2), Rotation3.about_y(0.5)), c2w((-1.0, 0.2, 0.8))]
    params = MaskParams(FEAT, k=64)
    a = build_mask(poses, params, 0)
    b = build_mask([p.scaled(17.3) for p in poses], params, 0)
    np.testing.assert_array_equal(a.bits, b.bits)


def test_build_mask_threads_are_deterministic():
    poses = [c2w((0, 0, 0)), c2w((0.3, 0.4, -0.2)), c2w((-1.0, 0.2, 0.8)), c2w((0.1, 0.0, 2.0))]
    params = MaskParams(FEAT, k=32)
    serial = build_mask(poses, params, 2, workers=1)
    threaded = build_mask(poses, params, 2, workers=3)
    np.testing.assert_array_equal(serial.bits, threaded.bits)


def test_build_mask_bad_query_frame():
    with pytest.raises(IndexError):
        build_mask([c2w((0, 0, 0))], MaskParams(FEAT), 1)


def test_mask_tensor_dense_roundtrip_and_shape_check():
    params = MaskParams(GridSpec(2, 1))
    dense = np.array([[[True, False], [False, True]], [[False, False], [True, True]]])
    mask = EpipolarMaskTensor.from_dense(3, dense, params)
    assert mask.bits.tolist() == [0b11001001]
    assert mask.count() == 4
    np.testing.assert_array_equal(mask.to_dense(), dense)
    with pytest.raises(ShapeMismatchError):
        EpipolarMaskTensor.from_dense(0, np.zeros((3, 1, 2), dtype=bool), params)


def test_mask_jaccard():
    params = MaskParams(GridSpec(2, 1))
    one = np.zeros((2, 1, 2), dtype=bool)
    one[0, 0, 0] = True
    two = one.copy()
    two[1, 0, 1] = True
    other = np.zeros((2, 1, 2), dtype=bool)
    other[0, 0, 1] = True
    a = EpipolarMaskTensor.from_dense(0, one, params)
    b = EpipolarMaskTensor.from_dense(0, two, params)
    assert mask_jaccard(a, a) == 1.0
    assert mask_jaccard(a, b) == 0.5
    assert mask_jaccard(a, EpipolarMaskTensor.from_dense(0, other, params)) == 0.0
    with pytest.raises(ShapeMismatchError):
        mask_jaccard(a, EpipolarMaskTensor.from_dense(1, one, params))


def test_mask_rows_grow_with_tau():
    r = rel((0.4, 0.1, 0.9), Rotation3.about_y(0.2))
    dirs = grid_directions(FEAT).reshape(-1, 3)
    narrow = mask_rows(r, dirs, MaskParams(FEAT, tau=0.5))
    wide = mask_rows(r, dirs, MaskParams(FEAT, tau=1.5))
    assert not (narrow & ~wide).any()
    assert wide.sum() > narrow.sum()


def test_builder_memory_budget():
    assert estimate_mask_bytes(2, FEAT, 2) == 128 * 2 * 128 + 2 * (128 * 2 * 128 // 8)
    builder = EpipolarMaskBuilder(mem_budget=1000)
    with pytest.raises(MemoryBudgetError):
        builder.build([c2w((0, 0, 0)), c2w((1, 0, 0))], FEAT)


def test_builder_builds_requested_frames():
    builder = EpipolarMaskBuilder(k=16, workers=2)
    poses = [c2w((0, 0, 0)), c2w((1, 0, 0)), c2w((0, 0, 1))]
    masks = builder.build(poses, GridSpec(8, 4), [2, 0, 2])
    assert [m.query_frame for m in masks] == [0, 2]
    assert all(m.params == builder.params(GridSpec(8, 4)) for m in masks)


def test_curve_relation_is_mostly_symmetric():
    g = GridSpec(64, 32)
    params = MaskParams(g)
    near = MaskParams(g, tau=params.tau / 2)
    rng = np.random.default_rng(13)
    held = total = 0
    for _ in range(100):
        pose_i = CameraPose(Rotation3.random(rng), rng.normal(size=3), PoseConvention.CAM_TO_WORLD)
        pose_j = CameraPose(Rotation3.random(rng), rng.normal(size=3), PoseConvention.CAM_TO_WORLD)
        p = PixelCoord(float(rng.integers(64)), float(rng.integers(32)))
        row = mask_rows(relative_pose(pose_i, pose_j), pixel_to_direction(p, g)[None, :], near)[0]
        cols = np.flatnonzero(row)
        if len(cols) == 0:
            continue
        keys = PixelCoord((cols % 64).astype(np.float64), (cols // 64).astype(np.float64))
        back = distance_to_curves(relative_pose(pose_j, pose_i), pixel_to_direction(keys, g),
                                  PixelCoord(np.full(len(cols), p.u), np.full(len(cols), p.v)), g, k=params.k)
        held += int((back <= 2 * params.tau + 1e-9).sum())
        total += len(cols)
    assert total > 1000
    # pixel distances on the equirect grid are anisotropic, so roughly one pair in ten
    # falls outside 2 tau on the way back
    assert held / total >= 0.8
