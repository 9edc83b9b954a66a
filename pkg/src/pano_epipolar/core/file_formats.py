"""Readers and writers for trajectories, Plücker fields, masks, images and dataset records.

Binary formats are little-endian with fixed headers:

    PLKF: "PLKF" | u32 version=1 | u32 N | u32 H | u32 W, then N*H*W*6 f32
    SEPM: "SEPM" | u32 version=1 | u32 N | u32 h | u32 w | u32 K | f32 tau | u32 count,
          then one LSB-first bitset per query frame in ascending order

Text formats are JSON lines, one record per frame, clip or correspondence.
"""
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from pano_epipolar.core.epipolar import EpipolarMaskTensor, MaskParams
from pano_epipolar.core.errors import (
    ConventionError,
    FormatError,
    PoseValidationError,
    TrajectoryParseError,
)
from pano_epipolar.core.geometry import CameraPose, GridSpec, PixelCoord, PoseConvention, Rotation3
from pano_epipolar.core.scene_forge import Correspondence

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PLKF_HEADER = struct.Struct("<4sIIII")
SEPM_HEADER = struct.Struct("<4sIIIIIfI")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _format_error(path: str):
    return lambda message, line: FormatError(f"{path} line {line}: {message}")


def _json_lines(path: str, error=TrajectoryParseError) -> Iterable[tuple[int, dict]]:
    """Yield (line number, record), skipping blank and # lines. ``error(message, line)`` builds the parse error."""
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as e:
                raise error(f"not a JSON record ({e.msg})", number) from e
            if not isinstance(record, dict):
                raise error("record must be a JSON object", number)
            yield number, record


# --- trajectories ---------------------------------------------------------

def _numbers(record: dict, key: str, count: int, line: int) -> np.ndarray:
    value = record.get(key)
    if not isinstance(value, list) or len(value) != count:
        raise TrajectoryParseError(f'"{key}" must be a list of {count} numbers', line)
    try:
        return np.array([float(x) for x in value], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise TrajectoryParseError(f'"{key}" holds a non-numeric entry', line) from e


def read_trajectory(path: str) -> list[CameraPose]:
    """Poses ordered by frame index; frames must be exactly 0..N-1."""
    by_frame: dict[int, CameraPose] = {}
    for line, record in _json_lines(path):
        frame = record.get("frame")
        if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
            raise TrajectoryParseError('"frame" must be a non-negative integer', line)
        if frame in by_frame:
            raise TrajectoryParseError(f"frame {frame} appears twice", line)
        if "convention" not in record:
            raise ConventionError(f"line {line}: frame {frame} has no convention tag (c2w or w2c)")
        try:
            convention = PoseConvention(record["convention"])
        except ValueError as e:
            raise ConventionError(f"line {line}: unknown convention {record['convention']!r}") from e
        rotation = _numbers(record, "R", 9, line).reshape(3, 3)
        translation = _numbers(record, "t", 3, line)
        try:
            by_frame[frame] = CameraPose(Rotation3(rotation), translation, convention)
        except PoseValidationError as e:
            raise PoseValidationError(str(e), frame) from e
    if not by_frame:
        raise TrajectoryParseError(f"{path} holds no poses")
    expected = list(range(len(by_frame)))
    if sorted(by_frame) != expected:
        raise TrajectoryParseError(f"frame indices must be 0..{len(by_frame) - 1}, got {sorted(by_frame)}")
    logger.debug("read %d poses from %s", len(by_frame), path)
    return [by_frame[i] for i in expected]


def write_trajectory(path: str, poses: Sequence[CameraPose]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for frame, pose in enumerate(poses):
            record = {
                "frame": frame,
                "R": [float(x) for x in pose.rotation.matrix.reshape(-1)],
                "t": [float(x) for x in pose.translation],
                "convention": pose.convention.value,
            }
            f.write(json.dumps(record) + "\n")
    logger.debug("wrote %d poses to %s", len(poses), path)


# --- Plücker fields -------------------------------------------------------

def write_plucker(path: str, fields: np.ndarray) -> int:
    """Write an (N, H, W, 6) stack; returns the file size in bytes."""
    if fields.ndim != 4 or fields.shape[-1] != 6:
        raise FormatError(f"Plücker stack must be (N, H, W, 6), got {fields.shape}")
    n, h, w, _ = fields.shape
    payload = np.ascontiguousarray(fields, dtype="<f4").tobytes()
    _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(PLKF_HEADER.pack(b"PLKF", FORMAT_VERSION, n, h, w))
        f.write(payload)
    return PLKF_HEADER.size + len(payload)


def _read_header(f, header: struct.Struct, magic: bytes, path: str) -> tuple:
    raw = f.read(header.size)
    if len(raw) != header.size:
        raise FormatError(f"{path}: truncated header")
    values = header.unpack(raw)
    if values[0] != magic:
        raise FormatError(f"{path}: bad magic {values[0]!r}, expected {magic!r}")
    if values[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {values[1]}")
    return values[2:]


def read_plucker(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        n, h, w = _read_header(f, PLKF_HEADER, b"PLKF", path)
        payload = f.read()
    expected = n * h * w * 6 * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, h, w, 6)


# --- epipolar masks -------------------------------------------------------

def write_masks(path: str, masks: Sequence[EpipolarMaskTensor]) -> int:
    if not masks:
        raise FormatError("no masks to write")
    ordered = sorted(masks, key=lambda m: m.query_frame)
    first = ordered[0]
    for mask in ordered[1:]:
        if mask.n_frames != first.n_frames or mask.params != first.params:
            raise FormatError(f"mask of frame {mask.query_frame} was built with different parameters")
    if len({m.query_frame for m in ordered}) != len(ordered):
        raise FormatError("query frames must be distinct")
    grid = first.params.grid
    _ensure_parent(path)
    size = SEPM_HEADER.size
    with open(path, "wb") as f:
        f.write(SEPM_HEADER.pack(b"SEPM", FORMAT_VERSION, first.n_frames, grid.height, grid.width,
                                 first.params.k, first.params.tau, len(ordered)))
        for mask in ordered:
            f.write(mask.bits.tobytes())
            size += mask.bits.size
    return size


def read_masks(path: str, query_frames: Sequence[int] | None = None,
               wrap_u: bool = True) -> list[EpipolarMaskTensor]:
    """Masks of a SEPM file. The header stores only how many query frames there are."""
    with open(path, "rb") as f:
        n, h, w, k, tau, count = _read_header(f, SEPM_HEADER, b"SEPM", path)
        payload = f.read()
    if query_frames is None:
        if count != n:
            raise FormatError(f"{path}: holds {count} of {n} query frames; pass the frame list")
        query_frames = range(n)
    query_frames = sorted(query_frames)
    if len(query_frames) != count:
        raise FormatError(f"{path}: holds {count} query frames, {len(query_frames)} were named")
    params = MaskParams(GridSpec(w, h), k, float(tau), wrap_u=wrap_u)
    per_frame = (h * w * n * h * w + 7) // 8
    if len(payload) != per_frame * count:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, header implies {per_frame * count}")
    bits = np.frombuffer(payload, dtype=np.uint8)
    return [EpipolarMaskTensor(i, n, params, bits[slot * per_frame:(slot + 1) * per_frame].copy())
            for slot, i in enumerate(query_frames)]


# --- images ---------------------------------------------------------------

def write_image(path: str, image: np.ndarray) -> None:
    """PPM (P6) or PNG, chosen by extension."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"expected an (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    ext = os.path.splitext(path)[1].lower()
    fmt = {".ppm": "PPM", ".png": "PNG"}.get(ext)
    if fmt is None:
        raise FormatError(f"unsupported image extension {ext!r} (use .ppm or .png)")
    _ensure_parent(path)
    Image.fromarray(image, "RGB").save(path, format=fmt)


def read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except Image.UnidentifiedImageError as e:
        raise FormatError(f"{path}: not a readable image") from e


# --- dataset records ------------------------------------------------------

@dataclass
class ManifestRecord:
    scene_seed: int
    trajectory_seed: int
    sampled_indices: list[int]
    conditional_frame_index: int
    evaluation_frame_index: int
    frames: list[str] = field(default_factory=list)
    trajectory: str = ""
    sampled_trajectory: str = ""
    correspondences: str = ""


def append_manifest(path: str, record: ManifestRecord) -> None:
    _ensure_parent(path)
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(asdict(record)) + "\n")


def read_manifest(path: str) -> list[ManifestRecord]:
    records = []
    for line, raw in _json_lines(path, _format_error(path)):
        try:
            records.append(ManifestRecord(**raw))
        except TypeError as e:
            raise FormatError(f"{path} line {line}: {e}") from e
    return records


def write_correspondences(path: str, correspondences: Sequence[Correspondence]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for corr in correspondences:
            observations = [[int(frame), float(u), float(v), bool(seen)]
                            for frame, u, v, seen in zip(corr.frame_indices, corr.pixels.u,
                                                         corr.pixels.v, corr.visible)]
            f.write(json.dumps({"point": [float(x) for x in corr.point], "observations": observations}) + "\n")


def read_correspondences(path: str) -> list[Correspondence]:
    out = []
    for line, record in _json_lines(path, _format_error(path)):
        try:
            obs = record["observations"]
            frames = np.array([o[0] for o in obs], dtype=np.int64)
            pixels = PixelCoord(np.array([o[1] for o in obs], dtype=np.float64),
                                np.array([o[2] for o in obs], dtype=np.float64))
            visible = np.array([bool(o[3]) for o in obs])
            out.append(Correspondence(np.array(record["point"], dtype=np.float64), frames, pixels, visible))
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise FormatError(f"{path} line {line}: malformed correspondence") from e
    return out
