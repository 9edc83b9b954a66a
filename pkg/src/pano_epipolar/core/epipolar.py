"""Spherical epipolar planes, great-circle sampling and bit-packed attention masks.

The plane normal n = o_{i->j} x p_{i->j} is the canonical representation of an
epipolar curve. Curves are sampled by walking the great circle in an orthonormal
in-plane basis, which has no division singularities. The printed ratio form (A', B')
and its v(u) curve are kept only as cross-checks.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pano_epipolar.core.errors import DegenerateGeometryError, MemoryBudgetError, ShapeMismatchError
from pano_epipolar.core.geometry import (
    CameraPose,
    GridSpec,
    PixelCoord,
    RelativePose,
    UnitVec3,
    direction_to_pixel,
    grid_directions,
    pixel_distance,
    pixel_to_direction,
    rasterize_disks,
    relative_pose,
)

logger = logging.getLogger(__name__)

NORMAL_EPS = 1e-12
DEFAULT_K = 250
DEFAULT_TAU = math.sqrt(2.0) / 2.0
DEFAULT_BASELINE_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class EpipolarPlane:
    normal: np.ndarray  # camera-j frame, D = 0
    degenerate: bool
    source: tuple[int, PixelCoord] | None = None


@dataclass(frozen=True, eq=False)
class EpipolarSamples:
    points: PixelCoord  # u, v arrays of length k
    k: int


@dataclass(frozen=True)
class MaskParams:
    grid: GridSpec
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU
    baseline_eps: float = DEFAULT_BASELINE_EPS
    wrap_u: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True, eq=False)
class EpipolarMaskTensor:
    """Mask M_i of one query frame, packed least-significant-bit first.

    Bit order is (query pixel row-major, key frame, key pixel row-major).
    """
    query_frame: int
    n_frames: int
    params: MaskParams
    bits: np.ndarray = field(repr=False)

    @property
    def n_pixels(self) -> int:
        return self.params.grid.n_pixels

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n_pixels, self.n_frames, self.n_pixels

    @property
    def n_bits(self) -> int:
        return self.n_pixels * self.n_frames * self.n_pixels

    @classmethod
    def from_dense(cls, query_frame: int, dense: np.ndarray, params: MaskParams) -> "EpipolarMaskTensor":
        hw = params.grid.n_pixels
        if dense.ndim != 3 or dense.shape[0] != hw or dense.shape[2] != hw:
            raise ShapeMismatchError(f"dense mask shape {dense.shape} does not match grid with {hw} pixels")
        bits = np.packbits(np.ascontiguousarray(dense, dtype=bool).reshape(-1), bitorder="little")
        return cls(query_frame, dense.shape[1], params, bits)

    def to_dense(self) -> np.ndarray:
        flat = np.unpackbits(self.bits, count=self.n_bits, bitorder="little").astype(bool)
        return flat.reshape(self.shape)

    def count(self) -> int:
        return int(np.bitwise_count(self.bits).sum())

    def density(self) -> float:
        return self.count() / self.n_bits


def project_point(rel: RelativePose, p_i: UnitVec3) -> np.ndarray:
    return rel.apply(p_i)


def epipole(rel: RelativePose) -> np.ndarray:
    return np.array(rel.translation)


def epipolar_plane(rel: RelativePose, query: PixelCoord, g: GridSpec, frame_index: int | None = None) -> EpipolarPlane:
    normal = np.cross(epipole(rel), project_point(rel, pixel_to_direction(query, g)))
    degenerate = bool(np.linalg.norm(normal) < NORMAL_EPS)
    source = (frame_index, query) if frame_index is not None else (None, query)
    return EpipolarPlane(normal, degenerate, source)


def plane_coeffs_literal(plane: EpipolarPlane) -> tuple[float, float]:
    nx, ny, nz = (float(c) for c in plane.normal)
    if abs(nz) < NORMAL_EPS:
        raise DegenerateGeometryError("plane normal has no z component; the ratio form A', B' is undefined")
    return nx / nz, ny / nz


def epipolar_v_of_u(a_prime: float, b_prime: float, u, g: GridSpec):
    """Printed curve v(u) in the elevation-literal pixel convention, reduced into [0, H)."""
    if b_prime == 0:
        raise DegenerateGeometryError("B' = 0: the curve is a vertical great circle, not a function of u")
    phase = 2.0 * np.pi * np.asarray(u, dtype=np.float64) / g.width
    v = -(g.height / np.pi) * np.arctan((a_prime * np.sin(phase) + np.cos(phase)) / b_prime)
    v = np.mod(v, g.height)
    return np.where(v >= g.height, v - g.height, v)


def _plane_basis(normals: np.ndarray, origin: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal in-plane basis (e1 towards the epipole, e2 = n x e1) for each normal."""
    n_hat = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    e1 = origin - np.asarray(np.einsum("...i,i->...", n_hat, origin))[..., None] * n_hat
    e1_norm = np.linalg.norm(e1, axis=-1, keepdims=True)
    # o inside the plane always has a usable projection unless the baseline vanished
    fallback = np.cross(n_hat, np.array([0.0, 1.0, 0.0]))
    fallback = np.where(np.linalg.norm(fallback, axis=-1, keepdims=True) < 1e-6,
                        np.cross(n_hat, np.array([1.0, 0.0, 0.0])), fallback)
    e1 = np.where(e1_norm > 0, e1 / np.where(e1_norm > 0, e1_norm, 1.0), fallback)
    e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    return e1, np.cross(n_hat, e1)


def _circle_directions(e1: np.ndarray, e2: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos_s = np.cos(angles)[..., None]
    sin_s = np.sin(angles)[..., None]
    return cos_s * e1[..., None, :] + sin_s * e2[..., None, :]


def sample_directions(rel: RelativePose, query_dirs: np.ndarray, k: int,
                      baseline_eps: float = DEFAULT_BASELINE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Batched curve sampling for (M, 3) query directions.

    Returns the (M, K, 3) sample directions in camera j and the (M, 3) plane normals.
    """
    query_dirs = np.asarray(query_dirs, dtype=np.float64).reshape(-1, 3)
    rotated = rel.rotation.apply(query_dirs)
    normals = np.cross(rel.translation, rotated + rel.translation)
    if rel.baseline_norm < baseline_eps:
        return np.repeat(rotated[:, None, :], k, axis=1), normals

    out = np.empty((len(query_dirs), k, 3))
    degenerate = np.linalg.norm(normals, axis=-1) < NORMAL_EPS
    if degenerate.any():
        toward_epipole = rel.translation / rel.baseline_norm
        out[degenerate] = toward_epipole
    live = ~degenerate
    if live.any():
        e1, e2 = _plane_basis(normals[live], rel.translation)
        angles = 2.0 * np.pi * np.arange(k) / k
        out[live] = _circle_directions(e1, e2, angles)
    return out, normals


def sample_epipolar(plane: EpipolarPlane, k: int, g: GridSpec, rel: RelativePose,
                    baseline_eps: float = DEFAULT_BASELINE_EPS) -> EpipolarSamples:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if plane.source is None or plane.source[1] is None:
        raise ValueError("epipolar plane has no query provenance to sample from")
    query_dir = pixel_to_direction(plane.source[1], g)
    directions, _ = sample_directions(rel, query_dir[None, :], k, baseline_eps)
    return EpipolarSamples(direction_to_pixel(directions[0], g), k)


def min_distance(p: PixelCoord, samples: EpipolarSamples, g: GridSpec, wrap_u: bool = True) -> float:
    if samples.k < 1:
        raise ValueError("samples must not be empty")
    return float(np.min(pixel_distance(p, samples.points, g, wrap_u)))


def densify_curve(e1: np.ndarray, e2: np.ndarray, g: GridSpec, base_count: int = 4096,
                  max_gap: float = 0.05, wrap_u: bool = True, max_rounds: int = 8) -> PixelCoord:
    """Pixel trace of one great circle with consecutive points at most ``max_gap`` apart.

    Near the poles equirectangular longitude sweeps fast, so uniform arc steps are
    refined wherever the pixel-space gap is too large.
    """
    angles = 2.0 * np.pi * np.arange(base_count) / base_count
    for _ in range(max_rounds):
        pixels = direction_to_pixel(_circle_directions(e1, e2, angles), g)
        nxt = PixelCoord(np.roll(pixels.u, -1), np.roll(pixels.v, -1))
        gaps = pixel_distance(pixels, nxt, g, wrap_u)
        if gaps.max() <= max_gap:
            return pixels
        steps = np.diff(np.append(angles, angles[0] + 2.0 * np.pi))
        pieces = np.maximum(np.ceil(gaps / max_gap).astype(np.int64), 1)
        offsets = np.arange(pieces.sum()) - np.repeat(np.cumsum(pieces) - pieces, pieces)
        angles = np.repeat(angles, pieces) + np.repeat(steps / pieces, pieces) * offsets
    return direction_to_pixel(_circle_directions(e1, e2, angles), g)


def curve_distance(p: PixelCoord, rel: RelativePose, query_dir: np.ndarray, g: GridSpec,
                   wrap_u: bool = True, max_gap: float = 0.05) -> np.ndarray:
    """Distance from pixels to the continuous epipolar great circle of one query direction.

    Accurate to ``max_gap / 2``. Degenerate geometry falls back to the single
    correspondence point, as in :func:`sample_directions`.
    """
    directions, normals = sample_directions(rel, np.asarray(query_dir)[None, :], 1)
    if rel.baseline_norm < DEFAULT_BASELINE_EPS or np.linalg.norm(normals[0]) < NORMAL_EPS:
        curve = direction_to_pixel(directions[0], g)
    else:
        e1, e2 = _plane_basis(normals[0], rel.translation)
        curve = densify_curve(e1, e2, g, max_gap=max_gap, wrap_u=wrap_u)
    pu = np.atleast_1d(np.asarray(p.u, dtype=np.float64))
    pv = np.atleast_1d(np.asarray(p.v, dtype=np.float64))
    best = np.full(pu.shape, np.inf)
    for start in range(0, len(curve.u), 4096):
        chunk = PixelCoord(curve.u[start:start + 4096], curve.v[start:start + 4096])
        d = pixel_distance(PixelCoord(pu[:, None], pv[:, None]),
                           PixelCoord(chunk.u[None, :], chunk.v[None, :]), g, wrap_u)
        best = np.minimum(best, d.min(axis=1))
    return best


def distance_to_curves(rel: RelativePose, query_dirs: np.ndarray, targets: PixelCoord, g: GridSpec,
                       k: int = 2048, wrap_u: bool = True,
                       baseline_eps: float = DEFAULT_BASELINE_EPS) -> np.ndarray:
    """Batched distance from target i to the densely sampled curve of query i."""
    directions, _ = sample_directions(rel, query_dirs, k, baseline_eps)
    samples = direction_to_pixel(directions, g)
    tu = np.asarray(targets.u, dtype=np.float64).reshape(-1, 1)
    tv = np.asarray(targets.v, dtype=np.float64).reshape(-1, 1)
    return pixel_distance(PixelCoord(tu, tv), samples, g, wrap_u).min(axis=1)


def mask_rows(rel: RelativePose, query_dirs: np.ndarray, params: MaskParams, chunk: int = 512) -> np.ndarray:
    """(M, h*w) boolean rows: key pixels within tau of each query's sampled curve."""
    query_dirs = np.asarray(query_dirs, dtype=np.float64).reshape(-1, 3)
    rows = np.zeros((len(query_dirs), params.grid.n_pixels), dtype=bool)
    for start in range(0, len(query_dirs), chunk):
        directions, _ = sample_directions(rel, query_dirs[start:start + chunk], params.k, params.baseline_eps)
        samples = direction_to_pixel(directions, params.grid)
        rows[start:start + chunk] = rasterize_disks(samples.u, samples.v, params.grid, params.tau, params.wrap_u)
    return rows


def estimate_mask_bytes(n_frames: int, grid: GridSpec, query_count: int) -> int:
    """Peak bytes: one dense boolean working slice plus every packed output."""
    slice_bits = grid.n_pixels * n_frames * grid.n_pixels
    return slice_bits + query_count * ((slice_bits + 7) // 8)


def build_mask(poses: Sequence[CameraPose], params: MaskParams, query_frame: int,
               workers: int = 1) -> EpipolarMaskTensor:
    n = len(poses)
    if n < 1:
        raise ValueError("build_mask needs at least one pose")
    if not 0 <= query_frame < n:
        raise IndexError(f"query frame {query_frame} outside 0..{n - 1}")
    grid = params.grid
    query_dirs = grid_directions(grid).reshape(-1, 3)
    dense = np.zeros((grid.n_pixels, n, grid.n_pixels), dtype=bool)

    def fill(j: int) -> None:
        rel = relative_pose(poses[query_frame], poses[j])
        dense[:, j, :] = mask_rows(rel, query_dirs, params)
        logger.debug("mask i=%d j=%d baseline=%.3e", query_frame, j, rel.baseline_norm)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    else:
        for j in range(n):
            fill(j)

    empty = ~dense.any(axis=2)
    if empty.any():
        logger.warning("query frame %d: %d (query pixel, key frame) slices are empty",
                       query_frame, int(empty.sum()))
    return EpipolarMaskTensor.from_dense(query_frame, dense, params)


def mask_jaccard(a: EpipolarMaskTensor, b: EpipolarMaskTensor) -> float:
    if a.shape != b.shape or a.query_frame != b.query_frame:
        raise ShapeMismatchError(f"cannot compare mask {a.shape} (frame {a.query_frame}) "
                                 f"with {b.shape} (frame {b.query_frame})")
    union = int(np.bitwise_count(a.bits | b.bits).sum())
    if union == 0:
        return 1.0
    return int(np.bitwise_count(a.bits & b.bits).sum()) / union


class EpipolarMaskBuilder:
    """Configured mask factory: holds K, tau and the resource limits of a run."""

    def __init__(self, k: int = DEFAULT_K, tau: float = DEFAULT_TAU, wrap_u: bool = True,
                 baseline_eps: float = DEFAULT_BASELINE_EPS, workers: int = 1,
                 mem_budget: int = 2 * 1024 ** 3):
        self.k = int(k)
        self.tau = float(tau)
        self.wrap_u = bool(wrap_u)
        self.baseline_eps = float(baseline_eps)
        self.workers = max(1, int(workers))
        self.mem_budget = int(mem_budget)

    def params(self, grid: GridSpec) -> MaskParams:
        return MaskParams(grid, self.k, self.tau, self.baseline_eps, self.wrap_u)

    def check_budget(self, n_frames: int, grid: GridSpec, query_count: int) -> int:
        needed = estimate_mask_bytes(n_frames, grid, query_count)
        if needed > self.mem_budget:
            raise MemoryBudgetError(f"masks for N={n_frames} at {grid.height}x{grid.width} "
                                    f"need {needed:,} bytes, budget is {self.mem_budget:,}")
        return needed

    def build(self, poses: Sequence[CameraPose], grid: GridSpec,
              query_frames: Sequence[int] | None = None) -> list[EpipolarMaskTensor]:
        frames = sorted(set(range(len(poses)) if query_frames is None else query_frames))
        self.check_budget(len(poses), grid, len(frames))
        params = self.params(grid)
        masks = []
        for i in frames:
            mask = build_mask(poses, params, i, self.workers)
            logger.info("built mask for query frame %d: density %.6f", i, mask.density())
            masks.append(mask)
        return masks
