"""Brute-force checks of the analytic epipolar machinery.

The oracle side only pushes points along the query ray through the relative pose and
projects them with the pixel conventions of ``geometry``. It never asks the epipolar
module where the curve is; analytic results are only consulted to be compared.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import pandas as pd

from pano_epipolar.core.epipolar import (
    DEFAULT_BASELINE_EPS,
    NORMAL_EPS,
    EpipolarMaskTensor,
    MaskParams,
    curve_distance,
    epipolar_plane,
    mask_rows,
    min_distance,
    sample_directions,
    sample_epipolar,
)
from pano_epipolar.core.errors import DegenerateGeometryError
from pano_epipolar.core.geometry import (
    TIE_EPS,
    CameraPose,
    GridSpec,
    PixelCoord,
    RelativePose,
    Rotation3,
    direction_to_pixel,
    pixel_distance,
    pixel_to_direction,
    rasterize_disks,
    relative_pose,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9
CURVE_GAP = 0.05
DEPTH_LIMITS = (1e-7, 1e7)


@dataclass(frozen=True)
class DepthSweep:
    lambda_min: float = 1e-2
    lambda_max: float = 1e3
    count: int = 10_000

    def __post_init__(self):
        if not 0 < self.lambda_min < self.lambda_max:
            raise ValueError(f"need 0 < lambda_min < lambda_max, got {self.lambda_min}, {self.lambda_max}")
        if self.lambda_min < DEPTH_LIMITS[0] or self.lambda_max > DEPTH_LIMITS[1]:
            raise ValueError(f"depths must stay within [{DEPTH_LIMITS[0]:g}, {DEPTH_LIMITS[1]:g}], "
                             f"got [{self.lambda_min:g}, {self.lambda_max:g}]")
        if self.count < 2:
            raise ValueError(f"depth sweep needs at least 2 samples, got {self.count}")

    def depths(self) -> np.ndarray:
        return np.geomspace(self.lambda_min, self.lambda_max, self.count)


@dataclass(frozen=True)
class OracleViolation:
    query_frame: int
    key_frame: int
    query_u: float
    query_v: float
    key_u: int
    key_v: int
    distance: float
    depth: float
    translation: tuple[float, float, float]

    @property
    def key(self) -> tuple:
        return self.query_frame, self.key_frame, self.query_v, self.query_u, self.key_v, self.key_u


@dataclass
class OracleReport:
    cases: int = 0
    max_plane_residual: float = 0.0
    max_curve_distance: float = 0.0
    max_sample_distance: float = 0.0
    oracle_bits: int = 0
    sampling_misses: int = 0
    violations: list[OracleViolation] = field(default_factory=list)
    runtime: float = 0.0
    residual_tol: float = RESIDUAL_TOL

    @property
    def passed(self) -> bool:
        return not self.violations and self.max_plane_residual <= self.residual_tol

    @property
    def miss_rate(self) -> float:
        """Share of oracle bits that fell between curve samples."""
        return self.sampling_misses / self.oracle_bits if self.oracle_bits else 0.0

    def merge(self, other: "OracleReport") -> "OracleReport":
        return OracleReport(
            cases=self.cases + other.cases,
            max_plane_residual=max(self.max_plane_residual, other.max_plane_residual),
            max_curve_distance=max(self.max_curve_distance, other.max_curve_distance),
            max_sample_distance=max(self.max_sample_distance, other.max_sample_distance),
            oracle_bits=self.oracle_bits + other.oracle_bits,
            sampling_misses=self.sampling_misses + other.sampling_misses,
            violations=sorted(self.violations + other.violations, key=lambda v: v.key),
            runtime=self.runtime + other.runtime,
            residual_tol=self.residual_tol,
        )

    def summary(self) -> dict:
        return {
            "cases": self.cases,
            "max_plane_residual": self.max_plane_residual,
            "max_curve_distance": self.max_curve_distance,
            "max_sample_distance": self.max_sample_distance,
            "oracle_bits": self.oracle_bits,
            "sampling_misses": self.sampling_misses,
            "sampling_miss_rate": self.miss_rate,
            "violations": len(self.violations),
            "runtime_s": round(self.runtime, 3),
            "passed": self.passed,
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per violation, sorted by case key."""
        rows = [asdict(v) for v in sorted(self.violations, key=lambda v: v.key)]
        return pd.DataFrame(rows, columns=[f.name for f in fields(OracleViolation)])

    def to_records(self) -> list[str]:
        records = [json.dumps({"record": "summary", **self.summary()})]
        for violation in sorted(self.violations, key=lambda v: v.key):
            records.append(json.dumps({"record": "violation", **asdict(violation)}))
        return records


def _require_baseline(rel: RelativePose, baseline_eps: float) -> None:
    if rel.baseline_norm < baseline_eps:
        raise DegenerateGeometryError(
            f"baseline {rel.baseline_norm:.3e} is below {baseline_eps:.1e}; the ray oracle needs a translation")


def _project_sweep(rel: RelativePose, query_dirs: np.ndarray, depths: np.ndarray,
                   g: GridSpec) -> tuple[PixelCoord, np.ndarray]:
    """Pixels (M, D) in view j of the points lambda * dir pushed through the pose, and their directions."""
    rotated = rel.rotation.apply(np.asarray(query_dirs, dtype=np.float64).reshape(-1, 3))
    points = depths[None, :, None] * rotated[:, None, :] + rel.translation
    directions = points / np.linalg.norm(points, axis=-1, keepdims=True)
    return direction_to_pixel(directions, g), directions


def ray_projection_oracle(rel: RelativePose, query: PixelCoord, g: GridSpec, sweep: DepthSweep = DepthSweep(),
                          baseline_eps: float = DEFAULT_BASELINE_EPS) -> PixelCoord:
    """Ground-truth locus: where every depth along the query ray lands in view j."""
    _require_baseline(rel, baseline_eps)
    pixels, _ = _project_sweep(rel, pixel_to_direction(query, g), sweep.depths(), g)
    return PixelCoord(pixels.u[0], pixels.v[0])


@dataclass(frozen=True)
class CurveResidual:
    plane_residual: float  # max |n_hat . dir(oracle pixel)|
    curve_distance: float  # feature px to the continuous great circle
    sample_distance: float  # feature px to the nearest of the K samples


def verify_curve(rel: RelativePose, query: PixelCoord, g: GridSpec, sweep: DepthSweep = DepthSweep(),
                 k: int = 250, wrap_u: bool = True, distance_samples: int = 256,
                 baseline_eps: float = DEFAULT_BASELINE_EPS) -> CurveResidual:
    _require_baseline(rel, baseline_eps)
    plane = epipolar_plane(rel, query, g)
    if plane.degenerate:
        raise DegenerateGeometryError("query ray passes through the epipole; the epipolar plane is undefined")
    oracle = ray_projection_oracle(rel, query, g, sweep, baseline_eps)
    n_hat = plane.normal / np.linalg.norm(plane.normal)
    residual = float(np.max(np.abs(pixel_to_direction(oracle, g) @ n_hat)))

    pick = np.unique(np.linspace(0, sweep.count - 1, min(distance_samples, sweep.count)).astype(np.int64))
    subset = PixelCoord(oracle.u[pick], oracle.v[pick])
    to_curve = curve_distance(subset, rel, pixel_to_direction(query, g), g, wrap_u, CURVE_GAP)
    samples = sample_epipolar(plane, k, g, rel, baseline_eps)
    to_samples = max(min_distance(PixelCoord(u, v), samples, g, wrap_u) for u, v in zip(subset.u, subset.v))
    return CurveResidual(residual, float(to_curve.max()), float(to_samples))


def oracle_rows(rel: RelativePose, query_dirs: np.ndarray, params: MaskParams, sweep: DepthSweep,
                chunk: int = 32) -> np.ndarray:
    """(M, h*w) oracle mask rows: pixels within tau of a projected ray point."""
    g = params.grid
    query_dirs = np.asarray(query_dirs, dtype=np.float64).reshape(-1, 3)
    if rel.baseline_norm < params.baseline_eps:
        point = direction_to_pixel(rel.rotation.apply(query_dirs), g)
        return rasterize_disks(point.u[:, None], point.v[:, None], g, params.tau, params.wrap_u)
    rows = np.zeros((len(query_dirs), g.n_pixels), dtype=bool)
    depths = sweep.depths()
    for start in range(0, len(query_dirs), chunk):
        pixels, _ = _project_sweep(rel, query_dirs[start:start + chunk], depths, g)
        rows[start:start + chunk] = rasterize_disks(pixels.u, pixels.v, g, params.tau, params.wrap_u)
    return rows


def _plane_residual(rel: RelativePose, query_dirs: np.ndarray, sweep: DepthSweep, g: GridSpec,
                    chunk: int = 32) -> float:
    _, normals = sample_directions(rel, query_dirs, 1)
    lengths = np.linalg.norm(normals, axis=-1)
    live = lengths >= NORMAL_EPS
    worst = 0.0
    dirs, n_hat = query_dirs[live], normals[live] / lengths[live, None]
    for start in range(0, len(dirs), chunk):
        pixels, _ = _project_sweep(rel, dirs[start:start + chunk], sweep.depths(), g)
        back = pixel_to_direction(pixels, g)
        residual = np.abs(np.einsum("mdi,mi->md", back, n_hat[start:start + chunk]))
        worst = max(worst, float(residual.max(initial=0.0)))
    return worst


def _classify(rel: RelativePose, frames: tuple[int, int], queries: PixelCoord, query_dirs: np.ndarray,
              oracle: np.ndarray, analytic: np.ndarray, params: MaskParams,
              sweep: DepthSweep) -> tuple[list[OracleViolation], int]:
    """Sort oracle bits missing from the analytic rows into violations and sampling misses."""
    g = params.grid
    missing = oracle & ~analytic
    rotation_only = rel.baseline_norm < params.baseline_eps
    if rotation_only:
        # the fallback disk must match exactly
        missing = oracle ^ analytic
    violations, misses = [], 0
    translation = tuple(float(x) for x in rel.translation)
    for m in np.flatnonzero(missing.any(axis=1)):
        cols = np.flatnonzero(missing[m])
        key = PixelCoord((cols % g.width).astype(np.float64), (cols // g.width).astype(np.float64))
        if rotation_only:
            far = np.ones(len(cols), dtype=bool)
            distance = np.full(len(cols), np.nan)
            depth = np.full(len(cols), np.inf)
        else:
            distance = curve_distance(key, rel, query_dirs[m], g, params.wrap_u, CURVE_GAP)
            directions, _ = sample_directions(rel, query_dirs[m][None, :], params.k, params.baseline_eps)
            samples = direction_to_pixel(directions[0], g)
            to_samples = pixel_distance(PixelCoord(key.u[:, None], key.v[:, None]),
                                        PixelCoord(samples.u[None, :], samples.v[None, :]), g,
                                        params.wrap_u).min(axis=1)
            # a miss is only excused when no curve sample is within tau
            far = (distance > params.tau + CURVE_GAP / 2 + TIE_EPS) | (to_samples <= params.tau + TIE_EPS)
            points, _ = _project_sweep(rel, query_dirs[m], sweep.depths(), g)
            nearest = pixel_distance(PixelCoord(key.u[:, None], key.v[:, None]),
                                     PixelCoord(points.u, points.v), g, params.wrap_u).argmin(axis=1)
            depth = sweep.depths()[nearest]
        misses += int((~far).sum())
        for c in np.flatnonzero(far):
            violation = OracleViolation(frames[0], frames[1], float(np.ravel(queries.u)[m]),
                                        float(np.ravel(queries.v)[m]), int(key.u[c]), int(key.v[c]),
                                        float(distance[c]), float(depth[c]), translation)
            logger.error("subset violation: %s", violation)
            violations.append(violation)
    return violations, misses


def check_pair(rel: RelativePose, queries: PixelCoord, params: MaskParams, sweep: DepthSweep,
               frames: tuple[int, int] = (0, 1), analytic: np.ndarray | None = None) -> OracleReport:
    """Subset check of one pose pair for a set of query pixels."""
    started = time.perf_counter()
    g = params.grid
    query_dirs = pixel_to_direction(queries, g).reshape(-1, 3)
    if analytic is None:
        analytic = mask_rows(rel, query_dirs, params)
    oracle = oracle_rows(rel, query_dirs, params, sweep)
    violations, misses = _classify(rel, frames, queries, query_dirs, oracle, analytic, params, sweep)
    residual = 0.0 if rel.baseline_norm < params.baseline_eps else _plane_residual(rel, query_dirs, sweep, g)
    return OracleReport(cases=len(query_dirs), max_plane_residual=residual, oracle_bits=int(oracle.sum()),
                        sampling_misses=misses, violations=violations,
                        runtime=time.perf_counter() - started)


def verify_mask_subset(poses: Sequence[CameraPose], params: MaskParams, i: int,
                       sweep: DepthSweep = DepthSweep(), query_pixels: PixelCoord | None = None,
                       mask: EpipolarMaskTensor | None = None) -> OracleReport:
    """Check oracle bits of query frame ``i`` against every key frame of the analytic mask.

    ``mask`` is a previously built mask of frame ``i``; without it the analytic rows are
    recomputed only for ``query_pixels`` (all pixel centers by default).
    """
    g = params.grid
    queries = query_pixels if query_pixels is not None else g.pixel_centers()
    queries = PixelCoord(np.ravel(queries.u).astype(np.float64), np.ravel(queries.v).astype(np.float64))
    flat = queries.flat_index(g)
    dense = mask.to_dense() if mask is not None else None
    report = OracleReport()
    for j in range(len(poses)):
        rel = relative_pose(poses[i], poses[j])
        analytic = dense[flat, j, :] if dense is not None else None
        report = report.merge(check_pair(rel, queries, params, sweep, (i, j), analytic))
    if report.sampling_misses:
        logger.warning("query frame %d: %d oracle bits (%.2f%%) fall between curve samples", i,
                       report.sampling_misses, 100.0 * report.miss_rate)
    logger.info("query frame %d: %d oracle bits, %d violations", i, report.oracle_bits, len(report.violations))
    return report


def random_relative_pose(rng: np.random.Generator, min_baseline: float = 0.1,
                         max_baseline: float = 2.0) -> RelativePose:
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return RelativePose.from_parts(Rotation3.random(rng), direction * rng.uniform(min_baseline, max_baseline))


class RayProjectionOracle:
    """Runs random (pose pair, query pixel) cases through the curve and subset checks."""

    def __init__(self, lambda_min: float = 1e-2, lambda_max: float = 1e3, count: int = 10_000,
                 residual_tol: float = RESIDUAL_TOL, workers: int = 1):
        self.sweep = DepthSweep(lambda_min, lambda_max, count)
        self.residual_tol = float(residual_tol)
        self.workers = max(1, int(workers))

    def random_cases(self, n: int, g: GridSpec, seed: int = 0) -> list[tuple[RelativePose, PixelCoord]]:
        rng = np.random.default_rng(seed)
        cases = []
        while len(cases) < n:
            rel = random_relative_pose(rng)
            query = PixelCoord(float(rng.integers(g.width)), float(rng.integers(g.height)))
            if epipolar_plane(rel, query, g).degenerate:
                continue
            cases.append((rel, query))
        return cases

    def run_case(self, index: int, rel: RelativePose, query: PixelCoord, params: MaskParams) -> OracleReport:
        curve = verify_curve(rel, query, params.grid, self.sweep, params.k, params.wrap_u,
                             baseline_eps=params.baseline_eps)
        report = check_pair(rel, PixelCoord(np.array([query.u]), np.array([query.v])), params, self.sweep,
                            (index, index))
        report.max_plane_residual = max(report.max_plane_residual, curve.plane_residual)
        report.max_curve_distance = curve.curve_distance
        report.max_sample_distance = curve.sample_distance
        report.residual_tol = self.residual_tol
        return report

    def run(self, params: MaskParams, cases: int = 1000, seed: int = 0) -> OracleReport:
        started = time.perf_counter()
        work = self.random_cases(cases, params.grid, seed)

        def one(item):
            index, (rel, query) = item
            return self.run_case(index, rel, query, params)

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                reports = list(pool.map(one, enumerate(work)))
        else:
            reports = [one(item) for item in enumerate(work)]
        report = OracleReport(residual_tol=self.residual_tol)
        for part in reports:
            report = report.merge(part)
        report.runtime = time.perf_counter() - started
        logger.info("oracle: %d cases, max residual %.3e, %d violations, "
                    "%d sampling misses (%.2f%% of oracle bits) in %.1fs",
                    report.cases, report.max_plane_residual, len(report.violations),
                    report.sampling_misses, 100.0 * report.miss_rate, report.runtime)
        return report
