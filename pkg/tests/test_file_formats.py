import json
import struct

import numpy as np
import pytest

from pano_epipolar.core.epipolar import EpipolarMaskBuilder, EpipolarMaskTensor, MaskParams
from pano_epipolar.core.errors import ConventionError, FormatError, PoseValidationError, TrajectoryParseError
from pano_epipolar.core.file_formats import (
    SEPM_HEADER,
    ManifestRecord,
    append_manifest,
    read_correspondences,
    read_image,
    read_manifest,
    read_masks,
    read_plucker,
    read_trajectory,
    write_correspondences,
    write_image,
    write_masks,
    write_plucker,
    write_trajectory,
)
from pano_epipolar.core.geometry import CameraPose, GridSpec, PixelCoord, PoseConvention, Rotation3, plucker_trajectory
from pano_epipolar.core.scene_forge import Correspondence

IDENTITY = [1, 0, 0, 0, 1, 0, 0, 0, 1]


def write_lines(path, records):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n")
    return str(path)


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [CameraPose(Rotation3.random(rng), rng.normal(size=3), PoseConvention.CAM_TO_WORLD),
             CameraPose(Rotation3.about_y(0.3), [1.0, 2.0, 3.0], PoseConvention.WORLD_TO_CAM)]
    path = str(tmp_path / "traj.jsonl")
    write_trajectory(path, poses)
    loaded = read_trajectory(path)
    assert [p.convention for p in loaded] == [PoseConvention.CAM_TO_WORLD, PoseConvention.WORLD_TO_CAM]
    for a, b in zip(poses, loaded):
        np.testing.assert_array_equal(a.rotation.matrix, b.rotation.matrix)
        np.testing.assert_array_equal(a.translation, b.translation)


def test_trajectory_orders_frames_and_skips_comments(tmp_path):
    path = write_lines(tmp_path / "traj.jsonl", [
        "# two frames, written out of order",
        {"frame": 1, "R": IDENTITY, "t": [0, 0, 1], "convention": "c2w"},
        "",
        {"frame": 0, "R": IDENTITY, "t": [0, 0, 0], "convention": "c2w"},
    ])
    poses = read_trajectory(path)
    assert [list(p.translation) for p in poses] == [[0, 0, 0], [0, 0, 1]]


def test_trajectory_rejects_bad_rotation_with_frame(tmp_path):
    bad = [1, 0, 0, 0, 1, 0, 0, 0, 1.001]
    path = write_lines(tmp_path / "traj.jsonl", [
        {"frame": 0, "R": IDENTITY, "t": [0, 0, 0], "convention": "c2w"},
        {"frame": 1, "R": bad, "t": [0, 0, 0], "convention": "c2w"},
    ])
    with pytest.raises(PoseValidationError) as info:
        read_trajectory(path)
    assert info.value.frame == 1


@pytest.mark.parametrize("record,error", [
    ({"frame": 0, "R": IDENTITY, "t": [0, 0, 0]}, ConventionError),
    ({"frame": 0, "R": IDENTITY, "t": [0, 0, 0], "convention": "xyz"}, ConventionError),
    ({"frame": 0, "R": IDENTITY[:8], "t": [0, 0, 0], "convention": "c2w"}, TrajectoryParseError),
    ({"frame": -1, "R": IDENTITY, "t": [0, 0, 0], "convention": "c2w"}, TrajectoryParseError),
    ({"frame": 0, "R": IDENTITY, "t": [0, "a", 0], "convention": "c2w"}, TrajectoryParseError),
    ("{not json", TrajectoryParseError),
])
def test_trajectory_parse_errors(tmp_path, record, error):
    path = write_lines(tmp_path / "traj.jsonl", [record])
    with pytest.raises(error):
        read_trajectory(path)


def test_trajectory_frame_gaps(tmp_path):
    path = write_lines(tmp_path / "traj.jsonl", [
        {"frame": 0, "R": IDENTITY, "t": [0, 0, 0], "convention": "c2w"},
        {"frame": 2, "R": IDENTITY, "t": [0, 0, 0], "convention": "c2w"},
    ])
    with pytest.raises(TrajectoryParseError):
        read_trajectory(path)


def test_plucker_file_layout(tmp_path):
    poses = [CameraPose(Rotation3.identity(), [1.0, 0.0, 0.0], PoseConvention.CAM_TO_WORLD)] * 2
    fields = plucker_trajectory(poses, GridSpec(8, 4))
    path = str(tmp_path / "rays.plkf")
    size = write_plucker(path, fields)
    assert size == 20 + 2 * 4 * 8 * 6 * 4
    raw = open(path, "rb").read()
    assert raw[:4] == b"PLKF"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 2, 4, 8)
    np.testing.assert_array_equal(read_plucker(path), fields.astype(np.float32))


def test_plucker_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.plkf"
    path.write_bytes(b"PLKX" + bytes(16))
    with pytest.raises(FormatError):
        read_plucker(str(path))
    path.write_bytes(struct.pack("<4sIIII", b"PLKF", 1, 1, 2, 2) + bytes(10))
    with pytest.raises(FormatError):
        read_plucker(str(path))


def test_mask_file_roundtrip(tmp_path):
    poses = [CameraPose(Rotation3.identity(), [0.0, 0.0, 0.0], PoseConvention.CAM_TO_WORLD),
             CameraPose(Rotation3.about_y(0.4), [0.5, 0.0, 0.2], PoseConvention.CAM_TO_WORLD)]
    grid = GridSpec(8, 4)
    masks = EpipolarMaskBuilder(k=32).build(poses, grid)
    path = str(tmp_path / "masks.sepm")
    size = write_masks(path, masks)
    assert size == SEPM_HEADER.size + 2 * (32 * 2 * 32 // 8)

    loaded = read_masks(path)
    assert [m.query_frame for m in loaded] == [0, 1]
    for a, b in zip(masks, loaded):
        np.testing.assert_array_equal(a.bits, b.bits)
        assert b.params.k == 32 and b.params.grid == grid
        assert b.params.tau == pytest.approx(a.params.tau, rel=1e-7)


def test_mask_file_subset_needs_frame_list(tmp_path):
    params = MaskParams(GridSpec(2, 1))
    mask = EpipolarMaskTensor.from_dense(1, np.ones((2, 3, 2), dtype=bool), params)
    path = str(tmp_path / "one.sepm")
    write_masks(path, [mask])
    with pytest.raises(FormatError):
        read_masks(path)
    loaded = read_masks(path, query_frames=[1])
    assert loaded[0].query_frame == 1
    assert loaded[0].count() == 12


def test_mask_file_rejects_mixed_parameters(tmp_path):
    a = EpipolarMaskTensor.from_dense(0, np.ones((2, 1, 2), dtype=bool), MaskParams(GridSpec(2, 1), k=10))
    b = EpipolarMaskTensor.from_dense(1, np.ones((2, 1, 2), dtype=bool), MaskParams(GridSpec(2, 1), k=20))
    with pytest.raises(FormatError):
        write_masks(str(tmp_path / "mixed.sepm"), [a, b])


def test_image_roundtrip(tmp_path):
    image = np.random.default_rng(1).integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    for name in ("frame.ppm", "frame.png"):
        path = str(tmp_path / name)
        write_image(path, image)
        np.testing.assert_array_equal(read_image(path), image)
    assert open(tmp_path / "frame.ppm", "rb").read(2) == b"P6"
    with pytest.raises(FormatError):
        write_image(str(tmp_path / "frame.jpg"), image)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(FormatError):
        read_image(str(tmp_path / "junk.png"))


def test_manifest_and_correspondences(tmp_path):
    record = ManifestRecord(3, 4, [0, 5, 9], 5, 9, ["frame_000.ppm"], "trajectory.jsonl")
    path = str(tmp_path / "manifest.jsonl")
    append_manifest(path, record)
    append_manifest(path, record)
    assert read_manifest(path) == [record, record]

    corr = Correspondence(np.array([1.0, 2.0, 3.0]), np.array([0, 5]),
                          PixelCoord(np.array([10.5, 20.25]), np.array([3.0, 4.0])), np.array([True, False]))
    corr_path = str(tmp_path / "correspondences.jsonl")
    write_correspondences(corr_path, [corr])
    (back,) = read_correspondences(corr_path)
    np.testing.assert_array_equal(back.point, corr.point)
    np.testing.assert_array_equal(back.frame_indices, corr.frame_indices)
    np.testing.assert_array_equal(back.pixels.u, corr.pixels.u)
    np.testing.assert_array_equal(back.visible, corr.visible)


def test_manifest_rejects_unknown_fields(tmp_path):
    path = write_lines(tmp_path / "manifest.jsonl", [{"scene_seed": 1, "colour": "red"}])
    with pytest.raises(FormatError):
        read_manifest(path)
