"""Procedural checkerboard rooms, camera trajectories and panorama rendering.

Scenes are axis-aligned boxes (y up) with checkerboard walls and flat-shaded spheres.
Panoramas are ray cast directly per pixel, or rendered as six 90 degree cube faces and
resampled into equirectangular projection. Everything is a pure function of seeds.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from pano_epipolar.core.errors import GenerationError
from pano_epipolar.core.geometry import (
    CameraPose,
    GridSpec,
    PixelCoord,
    PoseConvention,
    Rotation3,
    direction_to_pixel,
    grid_directions,
)

logger = logging.getLogger(__name__)

Color = tuple[int, int, int]

WALL_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")

# columns: right, down, forward (camera frame)
CUBE_FACE_BASES = {
    "+x": np.array([[0.0, 0.0, -1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]).T,
    "-x": np.array([[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]]).T,
    "+y": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).T,
    "-y": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]]).T,
    "+z": np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]).T,
    "-z": np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]).T,
}


class SamplingMode(str, Enum):
    UNIFORM_STRIDE = "uniform_stride"
    SEEDED_RANDOM = "seeded_random"


@dataclass(frozen=True)
class CheckerTexture:
    cell_size: float
    colors: tuple[Color, Color]


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    color: Color

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))


@dataclass(frozen=True, eq=False)
class Scene:
    seed: int
    room_min: np.ndarray
    room_max: np.ndarray
    walls: dict[str, CheckerTexture]
    spheres: tuple[Sphere, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "room_min", np.asarray(self.room_min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "room_max", np.asarray(self.room_max, dtype=np.float64).reshape(3))
        missing = set(WALL_NAMES) - set(self.walls)
        if missing:
            raise ValueError(f"scene is missing wall textures for {sorted(missing)}")

    def is_free(self, points: np.ndarray, clearance: float = 0.0) -> np.ndarray:
        """True where points are inside the room and outside every sphere, with clearance."""
        points = np.atleast_2d(points)
        ok = np.all((points > self.room_min + clearance) & (points < self.room_max - clearance), axis=-1)
        for sphere in self.spheres:
            ok &= np.linalg.norm(points - sphere.center, axis=-1) > sphere.radius + clearance
        return ok


@dataclass(frozen=True, eq=False)
class Trajectory:
    poses: tuple[CameraPose, ...]
    sampled_indices: tuple[int, ...]
    seed: int = 0
    conditional_frame_index: int = 0

    def __post_init__(self):
        idx = self.sampled_indices
        if any(b <= a for a, b in zip(idx, idx[1:])) or (idx and not 0 <= idx[0] <= idx[-1] < len(self.poses)):
            raise ValueError(f"sampled indices must be strictly increasing within 0..{len(self.poses) - 1}")

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    def sampled_poses(self) -> list[CameraPose]:
        return [self.poses[i] for i in self.sampled_indices]

    @property
    def evaluation_frame_index(self) -> int:
        """Fifth sampled frame after the conditional one, clamped to the clip."""
        position = self.sampled_indices.index(self.conditional_frame_index)
        return self.sampled_indices[min(position + 5, len(self.sampled_indices) - 1)]


@dataclass(eq=False)
class Correspondence:
    point: np.ndarray
    frame_indices: np.ndarray
    pixels: PixelCoord
    visible: np.ndarray


@dataclass(eq=False)
class SceneFrameSet:
    grid: GridSpec
    trajectory: Trajectory
    frames: list[np.ndarray]
    correspondences: list[Correspondence] = field(default_factory=list)

    def reprojection_error(self) -> float:
        """Max distance between stored pixels and a fresh projection, over visible observations."""
        worst = 0.0
        poses = dict(zip(self.trajectory.sampled_indices, self.trajectory.sampled_poses()))
        for corr in self.correspondences:
            for frame, u, v, seen in zip(corr.frame_indices, corr.pixels.u, corr.pixels.v, corr.visible):
                if not seen:
                    continue
                p = project_to_pixel(poses[int(frame)], corr.point, self.grid)
                du = abs(p.u - u)
                worst = max(worst, float(np.hypot(min(du, self.grid.width - du), p.v - v)))
        return worst


def _random_color(rng: np.random.Generator) -> Color:
    return tuple(int(c) for c in rng.integers(40, 216, size=3))


def generate_scene(seed: int, room_size: tuple[float, float, float] = (8.0, 3.0, 10.0),
                   sphere_count: int = 12, cell_size: float = 1.0,
                   radius_range: tuple[float, float] = (0.2, 0.6)) -> Scene:
    rng = np.random.default_rng(seed)
    room_max = np.asarray(room_size, dtype=np.float64)
    walls = {}
    for name in WALL_NAMES:
        base = rng.integers(70, 186, size=3)
        shift = rng.integers(30, 60) * rng.choice([-1, 1])
        walls[name] = CheckerTexture(cell_size, (tuple(int(c) for c in base),
                                                 tuple(int(c) for c in np.clip(base + shift, 0, 255))))
    spheres = []
    for _ in range(sphere_count):
        radius = float(rng.uniform(*radius_range))
        center = rng.uniform(radius, room_max - radius)
        spheres.append(Sphere(center, radius, _random_color(rng)))
    logger.debug("scene %d: %d spheres in a %s room", seed, len(spheres), room_size)
    return Scene(seed, np.zeros(3), room_max, walls, tuple(spheres))


def uniform_stride_indices(frame_count: int, sample: int) -> list[int]:
    if sample == 1:
        return [0]
    return [k * (frame_count - 1) // (sample - 1) for k in range(sample)]


def generate_trajectory(scene: Scene, seed: int, frame_count: int = 40, sample: int = 16,
                        sampling: SamplingMode = SamplingMode.SEEDED_RANDOM, waypoints: int = 4,
                        clearance: float = 0.3, height_range: tuple[float, float] = (1.0, 2.0),
                        max_yaw_step: float = np.pi / 3, max_attempts: int = 200) -> Trajectory:
    if not frame_count >= sample >= 1:
        raise ValueError(f"need frame_count >= sample >= 1, got {frame_count} and {sample}")
    sampling = SamplingMode(sampling)
    rng = np.random.default_rng([scene.seed, seed])
    low = scene.room_min + clearance
    high = scene.room_max - clearance
    low[1] = max(low[1], height_range[0])
    high[1] = min(high[1], height_range[1])

    for attempt in range(max_attempts):
        points = rng.uniform(low, high, size=(waypoints, 3))
        seg_lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
        if np.any(seg_lengths < 0.5):
            continue
        dense = np.concatenate([a + np.linspace(0, 1, 64, endpoint=False)[:, None] * (b - a)
                                for a, b in zip(points[:-1], points[1:])] + [points[-1:]])
        if not scene.is_free(dense, clearance).all():
            continue
        break
    else:
        raise GenerationError(f"no collision-free path after {max_attempts} attempts "
                              f"(scene {scene.seed}, trajectory seed {seed})")
    logger.debug("trajectory seed %d found after %d attempts", seed, attempt + 1)

    yaws = rng.uniform(0, 2 * np.pi) + np.concatenate(
        [[0.0], np.cumsum(rng.uniform(-max_yaw_step, max_yaw_step, size=waypoints - 1))])
    cumulative = np.concatenate([[0.0], np.cumsum(seg_lengths)])
    arc = np.linspace(0.0, cumulative[-1], frame_count)
    segment = np.clip(np.searchsorted(cumulative, arc, side="right") - 1, 0, waypoints - 2)
    frac = (arc - cumulative[segment]) / seg_lengths[segment]
    positions = points[segment] + frac[:, None] * (points[segment + 1] - points[segment])
    ease = frac * frac * (3.0 - 2.0 * frac)
    yaw = yaws[segment] + ease * (yaws[segment + 1] - yaws[segment])
    poses = tuple(CameraPose(Rotation3.about_y(a), p, PoseConvention.CAM_TO_WORLD)
                  for a, p in zip(yaw, positions))

    if sampling is SamplingMode.UNIFORM_STRIDE:
        indices = uniform_stride_indices(frame_count, sample)
    else:
        indices = sorted(int(i) for i in rng.choice(frame_count, size=sample, replace=False))
    conditional = int(rng.choice(indices))
    return Trajectory(poses, tuple(indices), seed, conditional)


def cast_rays(scene: Scene, origin: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and flat color for rays leaving ``origin``.

    ``directions`` is (..., 3) and unit length; returns (...,) distances and (..., 3)
    uint8 colors.
    """
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d > 0, scene.room_max, scene.room_min)
        steps = np.where(d != 0, (bound - origin) / d, np.inf)
    axis = np.argmin(steps, axis=-1)
    distance = np.take_along_axis(steps, axis[..., None], axis=-1)[..., 0]
    hit = origin + distance[..., None] * d
    positive = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0] > 0

    color = np.zeros(d.shape, dtype=np.uint8)
    for a in range(3):
        other = [b for b in range(3) if b != a]
        for sign, name in ((True, f"+{'xyz'[a]}"), (False, f"-{'xyz'[a]}")):
            sel = (axis == a) & (positive == sign)
            if not sel.any():
                continue
            texture = scene.walls[name]
            cells = np.floor(hit[sel][:, other] / texture.cell_size).astype(np.int64)
            parity = np.mod(cells.sum(axis=-1), 2)
            color[sel] = np.asarray(texture.colors, dtype=np.uint8)[parity]

    for sphere in scene.spheres:
        oc = origin - sphere.center
        b = d @ oc
        disc = b * b - (oc @ oc - sphere.radius ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        near = -b - root
        s = np.where(near > 0, near, -b + root)
        closer = (disc >= 0) & (s > 0) & (s < distance)
        distance = np.where(closer, s, distance)
        color[closer] = sphere.color
    return distance, color


def render_equirect(scene: Scene, pose: CameraPose, g: GridSpec) -> np.ndarray:
    c2w = pose.to_cam_to_world()
    _, color = cast_rays(scene, c2w.translation, c2w.rotation.apply(grid_directions(g)))
    return color


def cube_face_directions(face: str, face_size: int) -> np.ndarray:
    """(F, F, 3) unit camera-frame rays of one 90 degree cube face, indexed [row b, column a]."""
    coords = 2.0 * (np.arange(face_size) + 0.5) / face_size - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    local = np.stack([x, y, np.ones_like(x)], axis=-1)
    rays = local @ CUBE_FACE_BASES[face].T
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def render_cubemap(scene: Scene, pose: CameraPose, face_size: int) -> dict[str, np.ndarray]:
    if face_size < 8:
        raise ValueError(f"cube faces need at least 8 pixels, got {face_size}")
    c2w = pose.to_cam_to_world()
    faces = {}
    for face in CUBE_FACE_BASES:
        rays = c2w.rotation.apply(cube_face_directions(face, face_size))
        faces[face] = cast_rays(scene, c2w.translation, rays)[1]
    return faces


def face_assignment(directions: np.ndarray) -> np.ndarray:
    """Index into ``CUBE_FACE_BASES`` order of the face each direction falls on."""
    axis = np.argmax(np.abs(directions), axis=-1)
    negative = np.take_along_axis(directions, axis[..., None], axis=-1)[..., 0] < 0
    return 2 * axis + negative


def cubemap_to_equirect(faces: dict[str, np.ndarray], g: GridSpec) -> np.ndarray:
    sizes = {f.shape[0] for f in faces.values()} | {f.shape[1] for f in faces.values()}
    if set(faces) != set(CUBE_FACE_BASES) or len(sizes) != 1:
        raise ValueError("cubemap needs six square faces of equal size")
    face_size = sizes.pop()
    directions = grid_directions(g)
    assignment = face_assignment(directions)
    out = np.zeros((g.height, g.width, 3), dtype=np.uint8)
    for index, name in enumerate(CUBE_FACE_BASES):
        sel = assignment == index
        local = directions[sel] @ CUBE_FACE_BASES[name]
        a = (local[:, 0] / local[:, 2] + 1.0) * face_size / 2.0 - 0.5
        b = (local[:, 1] / local[:, 2] + 1.0) * face_size / 2.0 - 0.5
        image = faces[name].astype(np.float64)
        channels = [ndimage.map_coordinates(image[..., c], [b, a], order=1, mode="nearest") for c in range(3)]
        out[sel] = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)
    return out


def face_seam_mask(g: GridSpec, band: int = 2) -> np.ndarray:
    """True for equirect pixels within ``band`` pixels of a cube-face boundary."""
    assignment = face_assignment(grid_directions(g))
    seam = np.zeros(assignment.shape, dtype=bool)
    for shift in range(1, band + 1):
        seam |= assignment != np.roll(assignment, shift, axis=1)
        seam |= assignment != np.roll(assignment, -shift, axis=1)
        down = np.pad(assignment, ((shift, 0), (0, 0)), mode="edge")[:-shift]
        up = np.pad(assignment, ((0, shift), (0, 0)), mode="edge")[shift:]
        seam |= (assignment != down) | (assignment != up)
    return seam


def renderer_difference(scene: Scene, pose: CameraPose, g: GridSpec, face_size: int, band: int = 2) -> float:
    """Mean absolute channel difference (0..1) of cubemap vs direct rendering, seams excluded."""
    direct = render_equirect(scene, pose, g).astype(np.float64)
    converted = cubemap_to_equirect(render_cubemap(scene, pose, face_size), g).astype(np.float64)
    keep = ~face_seam_mask(g, band)
    return float(np.abs(direct - converted)[keep].mean() / 255.0)


def project_to_pixel(pose: CameraPose, point: np.ndarray, g: GridSpec) -> PixelCoord:
    c2w = pose.to_cam_to_world()
    local = c2w.rotation.inverse().apply(np.asarray(point) - c2w.translation)
    return direction_to_pixel(local / np.linalg.norm(local, axis=-1, keepdims=True), g)


def point_visibility(scene: Scene, origin: np.ndarray, points: np.ndarray) -> np.ndarray:
    """True where the first surface hit towards a point is the point itself."""
    offset = np.atleast_2d(points) - np.asarray(origin, dtype=np.float64)
    dist = np.linalg.norm(offset, axis=-1)
    hit, _ = cast_rays(scene, origin, offset / dist[:, None])
    return hit >= dist * (1.0 - 1e-6) - 1e-9


def _surface_points(scene: Scene, count: int, rng: np.random.Generator) -> np.ndarray:
    points = []
    n_sphere = count // 2 if scene.spheres else 0
    for _ in range(n_sphere):
        sphere = scene.spheres[rng.integers(len(scene.spheres))]
        direction = rng.normal(size=3)
        points.append(sphere.center + sphere.radius * direction / np.linalg.norm(direction))
    while len(points) < count:
        name = WALL_NAMES[rng.integers(len(WALL_NAMES))]
        axis = "xyz".index(name[1])
        cell = scene.walls[name].cell_size
        point = np.empty(3)
        point[axis] = scene.room_max[axis] if name[0] == "+" else scene.room_min[axis]
        for other in (b for b in range(3) if b != axis):
            first = int(np.floor(scene.room_min[other] / cell)) + 1
            last = int(np.ceil(scene.room_max[other] / cell)) - 1
            if last < first:
                break
            point[other] = cell * rng.integers(first, last + 1)
        else:
            points.append(point)
    return np.asarray(points)


def extract_correspondences(scene: Scene, traj: Trajectory, g: GridSpec, count: int,
                            seed: int = 0) -> list[Correspondence]:
    """Surface points with their projection and visibility in every sampled frame."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([scene.seed, traj.seed, seed])
    points = _surface_points(scene, count, rng)
    frames = np.asarray(traj.sampled_indices)
    u = np.empty((len(points), len(frames)))
    v = np.empty_like(u)
    visible = np.empty(u.shape, dtype=bool)
    for col, pose in enumerate(traj.sampled_poses()):
        visible[:, col] = point_visibility(scene, pose.to_cam_to_world().translation, points)
        pixels = project_to_pixel(pose, points, g)
        u[:, col], v[:, col] = pixels.u, pixels.v
    logger.info("extracted %d correspondences, %.1f%% of observations visible",
                len(points), 100.0 * visible.mean())
    return [Correspondence(points[n], frames.copy(), PixelCoord(u[n], v[n]), visible[n])
            for n in range(len(points))]


class SceneForge:
    """Configured dataset generator: scene, trajectory, rendering and correspondences."""

    def __init__(self, room_size: list[float] = (8.0, 3.0, 10.0), sphere_count: int = 12,
                 cell_size: float = 1.0, frame_count: int = 40, sample: int = 16,
                 sampling: str = "seeded_random", face_size: int = 512, correspondences: int = 500):
        self.room_size = tuple(float(x) for x in room_size)
        self.sphere_count = int(sphere_count)
        self.cell_size = float(cell_size)
        self.frame_count = int(frame_count)
        self.sample = int(sample)
        self.sampling = SamplingMode(sampling)
        self.face_size = int(face_size)
        self.correspondences = int(correspondences)

    def scene(self, seed: int) -> Scene:
        return generate_scene(seed, self.room_size, self.sphere_count, self.cell_size)

    def trajectory(self, scene: Scene, seed: int) -> Trajectory:
        return generate_trajectory(scene, seed, self.frame_count, self.sample, self.sampling)

    def render(self, scene: Scene, pose: CameraPose, g: GridSpec, via_cubemap: bool = False) -> np.ndarray:
        if via_cubemap:
            return cubemap_to_equirect(render_cubemap(scene, pose, self.face_size), g)
        return render_equirect(scene, pose, g)

    def render_clip(self, scene_seed: int, traj_seed: int, g: GridSpec,
                    via_cubemap: bool = False) -> SceneFrameSet:
        scene = self.scene(scene_seed)
        traj = self.trajectory(scene, traj_seed)
        frames = []
        for index, pose in zip(traj.sampled_indices, traj.sampled_poses()):
            frames.append(self.render(scene, pose, g, via_cubemap))
            logger.debug("rendered frame %d", index)
        logger.info("rendered %d frames at %dx%d (%s)", len(frames), g.height, g.width,
                    "cubemap" if via_cubemap else "direct")
        correspondences = extract_correspondences(scene, traj, g, self.correspondences)
        return SceneFrameSet(g, traj, frames, correspondences)
