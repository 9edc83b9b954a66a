"""Equirectangular pixel conventions, camera poses and panoramic Plücker embeddings.

All transforms broadcast: a ``PixelCoord`` may hold scalars or equally shaped
arrays, and direction arrays carry xyz on the last axis. The default convention
puts pixel centers at integer coordinates (the half-pixel offset lives inside the
formulas), v = -0.5 at the north pole and +y up.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from pano_epipolar.core.errors import ConventionError, PoseValidationError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
ROTATION_TOL = 1e-8
POLE_EPS = 1e-12
# Inclusive slack on every distance threshold so exact ties survive last-bit rounding.
TIE_EPS = 1e-9

# Unit 3-vectors are plain float64 arrays with xyz on the last axis.
UnitVec3 = np.ndarray


class ConventionMode(str, Enum):
    DEFAULT_LATITUDE = "default_latitude"
    ELEVATION_LITERAL = "elevation_literal"


class PoseConvention(str, Enum):
    CAM_TO_WORLD = "c2w"
    WORLD_TO_CAM = "w2c"


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError(f"grid dimensions must be integers, got {self.width}x{self.height}")
        if self.width < 2 or self.height < 1:
            raise ValueError(f"grid needs W >= 2 and H >= 1, got W={self.width} H={self.height}")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def pixel_centers(self) -> "PixelCoord":
        """Row-major (H, W) arrays of the integer pixel centers."""
        v, u = np.meshgrid(np.arange(self.height, dtype=np.float64),
                           np.arange(self.width, dtype=np.float64), indexing="ij")
        return PixelCoord(u, v)


@dataclass(frozen=True, eq=False)
class PixelCoord:
    """Continuous pixel position.

    The type carries no grid, so u is kept as given; ``normalized`` wraps it into
    [0, W) and every operation that returns a PixelCoord returns it normalized.
    """
    u: float | np.ndarray
    v: float | np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("pixel coordinates must be finite")

    def normalized(self, grid: GridSpec) -> "PixelCoord":
        """Wrap u into [0, W) and clamp v into [-0.5, H - 0.5]."""
        u = np.mod(np.asarray(self.u, dtype=np.float64), grid.width)
        # np.mod of a tiny negative number can round up to exactly W
        u = np.where(u >= grid.width, u - grid.width, u)
        v = np.clip(np.asarray(self.v, dtype=np.float64), -0.5, grid.height - 0.5)
        if u.ndim == 0:
            return PixelCoord(float(u), float(v))
        return PixelCoord(u, v)

    def flat_index(self, grid: GridSpec) -> np.ndarray:
        """Row-major index of the nearest pixel center."""
        p = self.normalized(grid)
        col = np.mod(np.rint(p.u).astype(np.int64), grid.width)
        row = np.clip(np.rint(p.v).astype(np.int64), 0, grid.height - 1)
        return row * grid.width + col


@dataclass(frozen=True, eq=False)
class SphericalCoord:
    """Azimuth/elevation pair.

    DefaultLatitude: azimuth is longitude in [0, 2pi), elevation is latitude in
    [-pi/2, pi/2]. ElevationLiteral: azimuth is phi in [0, 2pi), elevation is theta in
    [0, pi], exactly as printed.
    """
    azimuth: float | np.ndarray
    elevation: float | np.ndarray
    mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE


@dataclass(frozen=True, eq=False)
class Rotation3:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise PoseValidationError("rotation has non-finite entries")
        ortho = np.max(np.abs(m.T @ m - np.eye(3)))
        if ortho > ROTATION_TOL:
            raise PoseValidationError(f"rotation is not orthonormal (max |R^T R - I| = {ortho:.3e})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > ROTATION_TOL:
            raise PoseValidationError(f"rotation determinant is {det:.12f}, expected +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls(np.eye(3))

    @classmethod
    def about_y(cls, angle: float) -> "Rotation3":
        return cls(Rotation.from_euler("y", angle).as_matrix())

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation3":
        return cls(Rotation.random(random_state=rng).as_matrix())

    def inverse(self) -> "Rotation3":
        return Rotation3(self.matrix.T)

    def compose(self, other: "Rotation3") -> "Rotation3":
        """self after other."""
        return Rotation3(self.matrix @ other.matrix)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.matrix.T


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: Rotation3
    translation: np.ndarray
    convention: PoseConvention

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise PoseValidationError("translation has non-finite entries")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "convention", PoseConvention(self.convention))

    @classmethod
    def identity(cls, convention: PoseConvention = PoseConvention.CAM_TO_WORLD) -> "CameraPose":
        return cls(Rotation3.identity(), np.zeros(3), convention)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.to_cam_to_world().translation

    def to_cam_to_world(self) -> "CameraPose":
        if self.convention is PoseConvention.CAM_TO_WORLD:
            return self
        return convert_convention(self)

    def to_world_to_cam(self) -> "CameraPose":
        if self.convention is PoseConvention.WORLD_TO_CAM:
            return self
        return convert_convention(self)

    def scaled(self, factor: float) -> "CameraPose":
        return CameraPose(self.rotation, self.translation * factor, self.convention)


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Maps camera-i coordinates to camera-j coordinates: x_j = R x_i + t."""
    rotation: Rotation3
    translation: np.ndarray
    baseline_norm: float

    @classmethod
    def from_parts(cls, rotation: Rotation3, translation: np.ndarray) -> "RelativePose":
        t = np.array(translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        return cls(rotation, t, float(np.linalg.norm(t)))

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls.from_parts(Rotation3.identity(), np.zeros(3))

    def compose(self, earlier: "RelativePose") -> "RelativePose":
        """Chain ``earlier`` (i -> j) with self (j -> k) into i -> k."""
        rotation = self.rotation.compose(earlier.rotation)
        translation = self.rotation.matrix @ earlier.translation + self.translation
        return RelativePose.from_parts(rotation, translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation


@dataclass(frozen=True, eq=False)
class PluckerRay:
    moment: np.ndarray
    direction: UnitVec3

    def __post_init__(self):
        m = np.asarray(self.moment, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise ValueError("Plücker direction must be unit length")
        if abs(float(m @ d)) > UNIT_TOL * max(1.0, float(np.linalg.norm(m))):
            raise ValueError("Plücker moment must be orthogonal to its direction")
        object.__setattr__(self, "moment", m)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True, eq=False)
class PluckerField:
    grid: GridSpec
    frame_index: int
    data: np.ndarray  # (H, W, 6): [m_x, m_y, m_z, d_x, d_y, d_z]

    @property
    def moments(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def directions(self) -> np.ndarray:
        return self.data[..., 3:]

    def ray(self, u: int, v: int) -> PluckerRay:
        return PluckerRay(self.data[v, u, :3], self.data[v, u, 3:])

    def invariant_errors(self) -> tuple[float, float]:
        """(max |m.d|, max |‖d‖ - 1|) over the field."""
        dot = np.abs(np.einsum("...i,...i->...", self.moments, self.directions))
        norm = np.abs(np.linalg.norm(self.directions, axis=-1) - 1.0)
        return float(dot.max()), float(norm.max())

    def estimate_center(self) -> np.ndarray:
        """Least-squares t from m = t x d over every ray of the field."""
        d = self.directions.reshape(-1, 3)
        m = self.moments.reshape(-1, 3)
        # t x d = -[d]x t
        zeros = np.zeros(len(d))
        cross = np.stack([
            np.stack([zeros, -d[:, 2], d[:, 1]], axis=-1),
            np.stack([d[:, 2], zeros, -d[:, 0]], axis=-1),
            np.stack([-d[:, 1], d[:, 0], zeros], axis=-1),
        ], axis=1)
        a = -cross.reshape(-1, 3)
        solution, *_ = np.linalg.lstsq(a, m.reshape(-1), rcond=None)
        return solution


def pixel_to_spherical(p: PixelCoord, g: GridSpec,
                       mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> SphericalCoord:
    u = np.asarray(p.u, dtype=np.float64)
    v = np.asarray(p.v, dtype=np.float64)
    if mode is ConventionMode.ELEVATION_LITERAL:
        azimuth = 2.0 * np.pi * u / g.width
        elevation = np.pi * v / g.height
    else:
        azimuth = np.mod(2.0 * np.pi * (u + 0.5) / g.width, 2.0 * np.pi)
        elevation = np.pi / 2.0 - np.pi * (v + 0.5) / g.height
    return SphericalCoord(azimuth, elevation, mode)


def spherical_to_direction(s: SphericalCoord) -> UnitVec3:
    """Same formula in both modes; ElevationLiteral feeds theta where latitude goes."""
    lon = np.asarray(s.azimuth, dtype=np.float64)
    lat = np.asarray(s.elevation, dtype=np.float64)
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.sin(lon), np.sin(lat), cos_lat * np.cos(lon)], axis=-1)


def pixel_to_direction(p: PixelCoord, g: GridSpec,
                       mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> UnitVec3:
    return spherical_to_direction(pixel_to_spherical(p, g, mode))


def direction_to_pixel(d: UnitVec3, g: GridSpec,
                       mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> PixelCoord:
    if mode is not ConventionMode.DEFAULT_LATITUDE:
        raise ConventionError("direction_to_pixel is only defined for the default latitude convention")
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    lon = np.mod(np.arctan2(x, z), 2.0 * np.pi)
    lat = np.arctan2(y, np.hypot(x, z))
    u = g.width * lon / (2.0 * np.pi) - 0.5
    # longitude is arbitrary at a pole; pin u to 0
    u = np.where(np.abs(y) >= 1.0 - POLE_EPS, 0.0, u)
    v = g.height * (np.pi / 2.0 - lat) / np.pi - 0.5
    return PixelCoord(u, v).normalized(g)


def grid_directions(g: GridSpec, mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> np.ndarray:
    """(H, W, 3) camera-frame directions of every pixel center."""
    return pixel_to_direction(g.pixel_centers(), g, mode)


def convert_convention(pose: CameraPose) -> CameraPose:
    r_t = pose.rotation.matrix.T
    flipped = (PoseConvention.WORLD_TO_CAM if pose.convention is PoseConvention.CAM_TO_WORLD
               else PoseConvention.CAM_TO_WORLD)
    return CameraPose(Rotation3(r_t), -r_t @ pose.translation, flipped)


def relative_pose(pose_i: CameraPose, pose_j: CameraPose) -> RelativePose:
    wi = pose_i.to_world_to_cam()
    wj = pose_j.to_world_to_cam()
    rotation = wj.rotation.compose(wi.rotation.inverse())
    translation = wj.translation - rotation.matrix @ wi.translation
    return RelativePose.from_parts(rotation, translation)


def anchor_trajectory(poses: Sequence[CameraPose], index: int) -> list[CameraPose]:
    """Re-express camera-to-world poses so that frame ``index`` is the identity camera."""
    reference = poses[index].to_world_to_cam()
    anchored = []
    for pose in poses:
        c2w = pose.to_cam_to_world()
        rotation = reference.rotation.compose(c2w.rotation)
        translation = reference.rotation.matrix @ c2w.translation + reference.translation
        anchored.append(CameraPose(rotation, translation, PoseConvention.CAM_TO_WORLD))
    return anchored


def _require_cam_to_world(pose: CameraPose) -> None:
    if pose.convention is not PoseConvention.CAM_TO_WORLD:
        raise ConventionError("Plücker rays need a camera-to-world pose; convert the pose first")


def plucker_ray(pose: CameraPose, p: PixelCoord, g: GridSpec,
                mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> PluckerRay:
    _require_cam_to_world(pose)
    direction = pose.rotation.apply(pixel_to_direction(p, g, mode))
    return PluckerRay(np.cross(pose.translation, direction), direction)


def plucker_field(pose: CameraPose, g: GridSpec, frame_index: int = 0,
                  mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> PluckerField:
    c2w = pose.to_cam_to_world()
    directions = c2w.rotation.apply(grid_directions(g, mode))
    moments = np.cross(np.broadcast_to(c2w.translation, directions.shape), directions)
    return PluckerField(g, frame_index, np.concatenate([moments, directions], axis=-1))


def plucker_trajectory(poses: Sequence[CameraPose], g: GridSpec,
                       mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE) -> np.ndarray:
    """Stacked (N, H, W, 6) embedding of a whole clip."""
    if mode is ConventionMode.ELEVATION_LITERAL:
        logger.warning("elevation-literal latitude covers one hemisphere twice; directions never reach y < 0")
    return np.stack([plucker_field(pose, g, i, mode).data for i, pose in enumerate(poses)])


def rasterize_disks(u: np.ndarray, v: np.ndarray, grid: GridSpec, tau: float,
                    wrap_u: bool = True) -> np.ndarray:
    """Mark every pixel center within ``tau`` of any point, one output row per input row.

    ``u`` and ``v`` are (M, P) continuous pixel coordinates; the result is a boolean
    (M, H*W) array in row-major pixel order. Only the integer neighbourhood of each
    point is visited, so the cost is independent of the grid size.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    width, height = grid.width, grid.height
    out = np.zeros((u.shape[0], grid.n_pixels), dtype=bool)
    rows = np.broadcast_to(np.arange(u.shape[0])[:, None], u.shape)
    reach = int(np.ceil(tau))
    limit = (tau + TIE_EPS) ** 2
    base_u = np.floor(u).astype(np.int64)
    base_v = np.floor(v).astype(np.int64)
    for dv in range(-reach, reach + 2):
        cand_v = base_v + dv
        dy = cand_v - v
        ok_v = (cand_v >= 0) & (cand_v < height) & (dy * dy <= limit)
        if not ok_v.any():
            continue
        for du in range(-reach, reach + 2):
            cand_u = base_u + du
            dx = np.abs(cand_u - u)
            if wrap_u:
                dx = np.mod(dx, width)
                dx = np.minimum(dx, width - dx)
                col = np.mod(cand_u, width)
                ok = ok_v & (dx * dx + dy * dy <= limit)
            else:
                col = cand_u
                ok = ok_v & (cand_u >= 0) & (cand_u < width) & (dx * dx + dy * dy <= limit)
            out[rows[ok], (cand_v * width + col)[ok]] = True
    return out


def pixel_distance(a: PixelCoord, b: PixelCoord, grid: GridSpec, wrap_u: bool = True) -> np.ndarray:
    """Euclidean pixel distance, with u taken modulo W when ``wrap_u``."""
    du = np.abs(np.asarray(a.u, dtype=np.float64) - np.asarray(b.u, dtype=np.float64))
    if wrap_u:
        du = np.mod(du, grid.width)
        du = np.minimum(du, grid.width - du)
    dv = np.asarray(a.v, dtype=np.float64) - np.asarray(b.v, dtype=np.float64)
    return np.sqrt(du * du + dv * dv)
