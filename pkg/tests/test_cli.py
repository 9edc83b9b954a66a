import json
import os

import numpy as np
import pytest
import yaml

from pano_epipolar.core.errors import ConfigError, FormatError, GenerationError, MemoryBudgetError, ValidationFailure
from pano_epipolar.core.file_formats import read_image, read_manifest, read_masks, read_plucker, write_image
from pano_epipolar.main import (
    DEFAULT_CONFIG,
    EXIT_GENERATION,
    EXIT_INPUT,
    EXIT_IO,
    EXIT_MEMORY,
    EXIT_OK,
    EXIT_VALIDATION,
    exit_code,
    main,
    parse_bytes,
    parse_frames,
)

IDENTITY = [1, 0, 0, 0, 1, 0, 0, 0, 1]


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    # logs/ and plots/ are created relative to the working directory
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_traj(path, poses):
    with open(path, "w") as f:
        for frame, (rotation, t) in enumerate(poses):
            f.write(json.dumps({"frame": frame, "R": rotation, "t": t, "convention": "c2w"}) + "\n")
    return str(path)


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c]


def test_parse_helpers():
    assert parse_bytes("2G") == 2 * 1024 ** 3
    assert parse_bytes("512MB") == 512 * 1024 ** 2
    assert parse_bytes("1000") == 1000
    assert parse_frames("3,1,3") == [1, 3]
    assert parse_frames("all") is None
    with pytest.raises(ValueError):
        parse_frames("a,b")


def test_exit_codes():
    assert exit_code(ValidationFailure("x")) == EXIT_VALIDATION
    assert exit_code(MemoryBudgetError("x")) == EXIT_MEMORY
    assert exit_code(GenerationError("x")) == EXIT_GENERATION
    assert exit_code(FormatError("x")) == EXIT_IO
    assert exit_code(FileNotFoundError("x")) == EXIT_IO
    assert exit_code(ConfigError("x")) == EXIT_INPUT


def test_plucker_command(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), (IDENTITY, [0, 0, 0])])
    out = str(workdir / "out" / "rays.plkf")
    assert main(["plucker", "--traj", traj, "--width", "8", "--height", "4", "--out", out]) == EXIT_OK
    assert os.path.getsize(out) == 20 + 2 * 4 * 8 * 6 * 4
    fields = read_plucker(out)
    assert np.all(fields[..., :3] == 0.0)


def test_plucker_command_rejects_bad_rotation(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), ([1, 0, 0, 0, 1, 0, 0, 0, 2], [0, 0, 0])])
    assert main(["plucker", "--traj", traj, "--width", "8", "--height", "4",
                 "--out", str(workdir / "rays.plkf")]) == EXIT_INPUT


def test_missing_trajectory_is_io_error(workdir):
    assert main(["plucker", "--traj", str(workdir / "nope.jsonl"), "--out", str(workdir / "x.plkf")]) == EXIT_IO


def test_mask_command_identity_density(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0])])
    out = str(workdir / "masks.sepm")
    args = ["mask", "--traj", traj, "--feat-h", "8", "--feat-w", "16", "--out", out]
    assert main(args) == EXIT_OK
    (mask,) = read_masks(out)
    assert mask.density() == 1 / 128
    first = open(out, "rb").read()
    assert main(args) == EXIT_OK
    assert open(out, "rb").read() == first
    assert (workdir / "plots" / "mask_density.png").exists()


def test_mask_command_limits(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), (IDENTITY, [1, 0, 0])])
    out = str(workdir / "masks.sepm")
    assert main(["mask", "--traj", traj, "--feat-h", "8", "--feat-w", "16", "--mem-budget", "1K",
                 "--out", out]) == EXIT_MEMORY
    assert main(["mask", "--traj", traj, "--feat-h", "8", "--feat-w", "16", "--query-frames", "5",
                 "--out", out]) == EXIT_INPUT


def test_mask_command_query_subset(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), (IDENTITY, [1, 0, 0]), (IDENTITY, [0, 0, 1])])
    out = str(workdir / "masks.sepm")
    assert main(["mask", "--traj", traj, "--feat-h", "4", "--feat-w", "8", "--k", "32", "--workers", "2",
                 "--query-frames", "2,0", "--out", out]) == EXIT_OK
    masks = read_masks(out, query_frames=[0, 2])
    assert [m.query_frame for m in masks] == [0, 2]
    assert masks[0].params.k == 32


def gray_panorama(path):
    write_image(str(path), np.full((64, 128, 3), 90, dtype=np.uint8))
    return str(path)


def red_pixels(image):
    return np.argwhere(np.all(image == (255, 0, 0), axis=-1))


def test_epicurve_equator(workdir):
    # frame 1 sits at x = -1, so the baseline in camera 0 points along +x
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), (IDENTITY, [-1, 0, 0])])
    out = str(workdir / "overlay.png")
    assert main(["epicurve", "--traj", traj, "--frame-i", "0", "--frame-j", "1", "--u", "127.5", "--v", "31.5",
                 "--image", gray_panorama(workdir / "pano.png"), "--out", out]) == EXIT_OK
    overlay = read_image(out)
    assert overlay.shape == (64, 128, 3)
    marks = red_pixels(overlay)
    assert len(marks) > 64
    # the equator row sits on v = 31.5, between rows 31 and 32
    assert set(marks[:, 0].tolist()) <= {31, 32}


def test_epicurve_pure_rotation(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), (rot_y(0.5), [0, 0, 0])])
    out = str(workdir / "overlay.png")
    assert main(["epicurve", "--traj", traj, "--frame-i", "0", "--frame-j", "1", "--u", "40", "--v", "20",
                 "--image", gray_panorama(workdir / "pano.png"), "--out", out]) == EXIT_OK
    assert len(red_pixels(read_image(out))) == 1


def test_epicurve_pixel_outside_image(workdir):
    traj = write_traj(workdir / "traj.jsonl", [(IDENTITY, [0, 0, 0]), (IDENTITY, [1, 0, 0])])
    assert main(["epicurve", "--traj", traj, "--frame-i", "0", "--frame-j", "1", "--u", "500", "--v", "2",
                 "--image", gray_panorama(workdir / "pano.png"), "--out", str(workdir / "o.png")]) == EXIT_INPUT


def render_args(out, *extra):
    return ["render", "--seed-scene", "1", "--seed-traj", "2", "--frames", "3", "--width", "32", "--height", "16",
            "--correspondences", "5", "--out", str(out), *extra]


def test_render_command(workdir):
    assert main(render_args(workdir / "a")) == EXIT_OK
    assert main(render_args(workdir / "b")) == EXIT_OK
    (record,) = read_manifest(str(workdir / "a" / "manifest.jsonl"))
    assert len(record.frames) == 3
    assert record.scene_seed == 1 and record.trajectory_seed == 2
    assert record.conditional_frame_index in record.sampled_indices
    for name in record.frames + ["trajectory.jsonl", "sampled_trajectory.jsonl", "correspondences.jsonl"]:
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
    frame = read_image(str(workdir / "a" / record.frames[0]))
    assert frame.shape == (16, 32, 3)


def test_render_command_via_cubemap(workdir):
    assert main(render_args(workdir / "c", "--via-cubemap", "--face-size", "32")) == EXIT_OK
    (record,) = read_manifest(str(workdir / "c" / "manifest.jsonl"))
    assert (workdir / "c" / record.frames[-1]).exists()


def test_validate_roundtrip_writes_report(workdir):
    out = str(workdir / "report.jsonl")
    assert main(["validate", "roundtrip", "--out", out]) == EXIT_OK
    records = [json.loads(line) for line in open(out)]
    assert records[0]["record"] == "summary" and records[0]["passed"] is True
    assert records[0]["max_err"] <= 1e-9
    assert {r["width"] for r in records[1:]} == {128, 512}


def test_validate_oracle_small(workdir):
    assert main(["validate", "oracle", "--cases", "3", "--feat-h", "8", "--feat-w", "16"]) == EXIT_OK


def test_validate_failure_exit_status(workdir):
    with open(DEFAULT_CONFIG) as f:
        config = yaml.safe_load(f)
    config["validation"]["roundtrip"] = {"grids": [[4, 8]], "tol": -1.0}
    path = workdir / "strict.yaml"
    path.write_text(yaml.safe_dump(config))
    assert main(["--config", str(path), "validate", "roundtrip"]) == EXIT_VALIDATION


def test_bad_config_class(workdir):
    with open(DEFAULT_CONFIG) as f:
        config = yaml.safe_load(f)
    config["oracle"]["class"] = "NoSuchOracle"
    path = workdir / "broken.yaml"
    path.write_text(yaml.safe_dump(config))
    assert main(["--config", str(path), "validate", "roundtrip"]) == EXIT_INPUT
