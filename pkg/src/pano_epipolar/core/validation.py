"""Validation suites run by ``pano_epipolar.main validate``.

Every suite returns a :class:`SuiteResult`: a pandas table of what was measured, a
one-row summary and a pass flag. Failures are report content, never exceptions.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from pano_epipolar.core.attention import (
    AttnTensors,
    MaskSemantics,
    attention_weights,
    attn_grad_check,
    spheric_epi_attn,
)
from pano_epipolar.core.epipolar import (
    EpipolarMaskBuilder,
    build_mask,
    distance_to_curves,
    epipolar_plane,
    epipolar_v_of_u,
    mask_jaccard,
    plane_coeffs_literal,
    sample_directions,
)
from pano_epipolar.core.geometry import (
    ConventionMode,
    GridSpec,
    PixelCoord,
    direction_to_pixel,
    grid_directions,
    pixel_to_direction,
    plucker_trajectory,
    relative_pose,
)
from pano_epipolar.core.oracle import RayProjectionOracle, random_relative_pose
from pano_epipolar.core.scene_forge import SceneForge, extract_correspondences, renderer_difference

logger = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    table: pd.DataFrame
    summary: dict = field(default_factory=dict)
    extra: dict[str, pd.DataFrame] = field(default_factory=dict)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"suite": self.name, **self.summary, "passed": self.passed}])


def _finish(name: str, passed: bool, table: pd.DataFrame, started: float, **summary) -> SuiteResult:
    summary["runtime_s"] = round(time.perf_counter() - started, 3)
    result = SuiteResult(name, bool(passed), table, summary)
    logger.info("suite %s: %s", name, "PASS" if result.passed else "FAIL")
    return result


def roundtrip_suite(grids: Sequence[Sequence[int]] = ((64, 128), (256, 512)), tol: float = 1e-9) -> SuiteResult:
    """pixel -> direction -> pixel over every pixel center; grids are (height, width)."""
    started = time.perf_counter()
    rows = []
    for height, width in grids:
        g = GridSpec(width, height)
        centers = g.pixel_centers()
        back = direction_to_pixel(grid_directions(g), g)
        du = np.abs(back.u - centers.u)
        du = np.minimum(du, g.width - du)
        dv = np.abs(back.v - centers.v)
        rows.append({"height": height, "width": width, "max_u_err": float(du.max()), "max_v_err": float(dv.max())})
    table = pd.DataFrame(rows)
    worst = float(table[["max_u_err", "max_v_err"]].to_numpy().max())
    return _finish("roundtrip", worst <= tol, table, started, max_err=worst)


def plucker_suite(forge: SceneForge, scene_seed: int = 0, traj_seed: int = 0, height: int = 256,
                  width: int = 512, tol: float = 1e-9) -> SuiteResult:
    started = time.perf_counter()
    g = GridSpec(width, height)
    poses = _trajectory_poses(forge, scene_seed, traj_seed)
    field_started = time.perf_counter()
    fields = plucker_trajectory(poses, g)
    elapsed = time.perf_counter() - field_started
    dot = np.abs(np.einsum("nhwi,nhwi->nhw", fields[..., :3], fields[..., 3:])).max(axis=(1, 2))
    norm = np.abs(np.linalg.norm(fields[..., 3:], axis=-1) - 1.0).max(axis=(1, 2))
    table = pd.DataFrame({"frame": np.arange(len(poses)), "max_m_dot_d": dot, "max_norm_err": norm})
    passed = dot.max() <= tol and norm.max() <= tol
    return _finish("plucker", passed, table, started, rays=int(fields[..., 0].size),
                   field_seconds=round(elapsed, 3))


def concordance_suite(pairs: int = 100, height: int = 32, width: int = 64, k: int = 250, seed: int = 0,
                      min_coeff: float = 1e-3, tol: float = 1e-9) -> SuiteResult:
    """Printed ratio-form curve and arc sampling against the plane normal, in the literal convention."""
    started = time.perf_counter()
    g = GridSpec(width, height)
    rng = np.random.default_rng(seed)
    columns = np.arange(width, dtype=np.float64)
    rows = []
    while len(rows) < pairs:
        rel = random_relative_pose(rng)
        query = PixelCoord(float(rng.integers(width)), float(rng.integers(height)))
        plane = epipolar_plane(rel, query, g)
        n_hat = plane.normal / np.linalg.norm(plane.normal)
        if plane.degenerate or abs(n_hat[2]) < min_coeff:
            continue
        a_prime, b_prime = plane_coeffs_literal(plane)
        if abs(b_prime) < min_coeff:
            continue
        v = epipolar_v_of_u(a_prime, b_prime, columns, g)
        literal = pixel_to_direction(PixelCoord(columns, v), g, ConventionMode.ELEVATION_LITERAL)
        arc, _ = sample_directions(rel, pixel_to_direction(query, g)[None, :], k)
        rows.append({"pair": len(rows), "a_prime": a_prime, "b_prime": b_prime,
                     "literal_residual": float(np.abs(literal @ n_hat).max()),
                     "arc_residual": float(np.abs(arc[0] @ n_hat).max())})
    table = pd.DataFrame(rows)
    worst = float(table[["literal_residual", "arc_residual"]].to_numpy().max())
    return _finish("concordance", worst <= tol, table, started, max_residual=worst)


def oracle_suite(builder: EpipolarMaskBuilder, oracle: RayProjectionOracle, cases: int = 1000,
                 feat_h: int = 32, feat_w: int = 64, seed: int = 0) -> SuiteResult:
    started = time.perf_counter()
    report = oracle.run(builder.params(GridSpec(feat_w, feat_h)), cases, seed)
    table = report.to_frame()
    return _finish("oracle", report.passed, table, started, **{k: v for k, v in report.summary().items()
                                                               if k not in ("passed", "runtime_s")})


def correspondence_suite(forge: SceneForge, builder: EpipolarMaskBuilder, scene_seed: int = 0, traj_seed: int = 0,
                         height: int = 256, width: int = 512, feat_h: int = 32, feat_w: int = 64,
                         count: int = 500, max_distance: float = 1.0, min_fraction: float = 0.99,
                         dense_k: int = 2048, reprojection_tol: float = 1e-6) -> SuiteResult:
    """Visible scene points must land near the epipolar curve of their partner pixel."""
    started = time.perf_counter()
    g = GridSpec(width, height)
    feat = GridSpec(feat_w, feat_h)
    scene = forge.scene(scene_seed)
    traj = forge.trajectory(scene, traj_seed)
    correspondences = extract_correspondences(scene, traj, g, count)
    poses = traj.sampled_poses()
    u = np.stack([c.pixels.u for c in correspondences])
    v = np.stack([c.pixels.v for c in correspondences])
    visible = np.stack([c.visible for c in correspondences])
    # image pixels to feature pixels; the longitude/latitude of a point is unchanged
    fu = (u + 0.5) * feat_w / width - 0.5
    fv = (v + 0.5) * feat_h / height - 0.5

    rows = []
    for i in range(len(poses)):
        for j in range(len(poses)):
            both = visible[:, i] & visible[:, j]
            if i == j or not both.any():
                continue
            rel = relative_pose(poses[i], poses[j])
            dirs = pixel_to_direction(PixelCoord(fu[both, i], fv[both, i]), feat)
            dist = distance_to_curves(rel, dirs, PixelCoord(fu[both, j], fv[both, j]), feat, dense_k,
                                      builder.wrap_u, builder.baseline_eps)
            rows.append({"frame_i": traj.sampled_indices[i], "frame_j": traj.sampled_indices[j],
                         "pairs": int(both.sum()), "within": int((dist <= max_distance).sum()),
                         "max_distance": float(dist.max())})
    table = pd.DataFrame(rows, columns=["frame_i", "frame_j", "pairs", "within", "max_distance"])
    total = int(table["pairs"].sum())
    fraction = float(table["within"].sum() / total) if total else 0.0

    reprojection = 0.0
    for corr in correspondences:
        for col, pose in enumerate(poses):
            if corr.visible[col]:
                again = direction_to_pixel(pose.rotation.inverse().apply(
                    (corr.point - pose.center) / np.linalg.norm(corr.point - pose.center)), g)
                du = abs(again.u - corr.pixels.u[col])
                reprojection = max(reprojection, float(np.hypot(min(du, width - du), again.v - corr.pixels.v[col])))
    passed = total > 0 and fraction >= min_fraction and reprojection <= reprojection_tol
    return _finish("correspondence", passed, table, started, correspondences=len(correspondences),
                   observed_pairs=total, fraction_within=fraction, max_reprojection=reprojection)


def _trajectory_poses(forge: SceneForge, scene_seed: int, traj_seed: int):
    scene = forge.scene(scene_seed)
    return forge.trajectory(scene, traj_seed).sampled_poses()


def k_stability_suite(forge: SceneForge, builder: EpipolarMaskBuilder, trajectories: int = 5, scene_seed: int = 0,
                      traj_seed: int = 0, feat_h: int = 32, feat_w: int = 64,
                      ks: Sequence[int] = (100, 150, 200, 250, 300), k_ref: int = 2000, target_k: int = 250,
                      min_jaccard: float = 0.95, query_frames: Sequence[int] | None = None) -> SuiteResult:
    """Jaccard of masks at each K against K_ref, per trajectory and query frame."""
    started = time.perf_counter()
    base = builder.params(GridSpec(feat_w, feat_h))
    ks = sorted(set(ks) | {target_k})
    rows = []
    empty_slices = 0
    for t in range(trajectories):
        poses = _trajectory_poses(forge, scene_seed, traj_seed + t)
        n = len(poses)
        frames = sorted(set(query_frames if query_frames is not None else (0, n // 2, n - 1)))
        for i in frames:
            reference = build_mask(poses, replace(base, k=k_ref), i, builder.workers)
            empty_slices += int((~reference.to_dense().any(axis=2)).sum())
            for k in ks:
                candidate = build_mask(poses, replace(base, k=k), i, builder.workers)
                empty_slices += int((~candidate.to_dense().any(axis=2)).sum())
                rows.append({"trajectory": traj_seed + t, "query_frame": i, "k": k,
                             "jaccard": mask_jaccard(candidate, reference)})
    table = pd.DataFrame(rows)
    sweep = table.groupby("k", as_index=False)["jaccard"].mean().rename(columns={"jaccard": "mean_jaccard"})
    target = float(sweep.loc[sweep["k"] == target_k, "mean_jaccard"].iloc[0])
    passed = target >= min_jaccard and empty_slices == 0
    result = _finish("k-stability", passed, table, started, k_ref=k_ref, target_k=target_k,
                     mean_jaccard=target, empty_slices=empty_slices)
    result.extra["sweep"] = sweep
    return result


def grad_suite(builder: EpipolarMaskBuilder, frames: int = 4, feat_h: int = 8, feat_w: int = 16, channels: int = 8,
               seed: int = 0, eps_fd: float = 1e-6, tol: float = 1e-5, probes: int | None = None,
               row_sum_tol: float = 1e-6) -> SuiteResult:
    """Attention kernel properties and gradient check on a small random clip."""
    started = time.perf_counter()
    feat = GridSpec(feat_w, feat_h)
    forge = SceneForge(frame_count=max(frames, 2), sample=frames)
    poses = _trajectory_poses(forge, seed, seed)
    mask = build_mask(poses, builder.params(feat), 0, builder.workers)
    dense = mask.to_dense().reshape(feat.n_pixels, -1)
    rng = np.random.default_rng(seed)
    hw = feat.n_pixels
    tensors = AttnTensors(rng.normal(size=(hw, channels)), rng.normal(size=(frames * hw, channels)),
                          rng.normal(size=(frames * hw, channels)))

    # keys hidden from query row 0 get new values; only that output row is compared
    hidden = ~dense[0]
    bumped_v = tensors.v.copy()
    bumped_v[hidden] += 1.0

    rows = []
    for mode in MaskSemantics:
        weights = attention_weights(tensors, dense, mode)
        masked_weight = float(np.abs(weights[~dense]).max(initial=0.0))
        shift = np.abs(spheric_epi_attn(tensors.replace(v=bumped_v), dense, mode)[0]
                       - spheric_epi_attn(tensors, dense, mode)[0]).max()
        rows.append({
            "mode": mode.value,
            "max_row_sum_err": float(np.abs(weights.sum(axis=1) - 1.0).max()),
            "max_masked_weight": masked_weight,
            "masked_v_sensitivity": float(shift),
            "grad_rel_err": attn_grad_check(tensors, dense, mode, eps_fd, probes, seed),
        })
    table = pd.DataFrame(rows).set_index("mode", drop=False)
    additive = table.loc[MaskSemantics.ADDITIVE_NEG_INF.value]
    literal = table.loc[MaskSemantics.MULTIPLICATIVE_LITERAL.value]
    passed = (table["max_row_sum_err"].max() <= row_sum_tol
              and additive["max_masked_weight"] == 0.0
              and table["grad_rel_err"].max() <= tol
              and additive["masked_v_sensitivity"] == 0.0
              and (not hidden.any() or literal["masked_v_sensitivity"] > 0.0))
    return _finish("grad", passed, table.reset_index(drop=True), started, hidden_keys=int(hidden.sum()),
                   max_grad_rel_err=float(table["grad_rel_err"].max()))


def render_suite(forge: SceneForge, scene_seed: int = 0, traj_seed: int = 0, height: int = 256, width: int = 512,
                 frames: int = 1, band: int = 2, tol: float = 3.0 / 255.0) -> SuiteResult:
    started = time.perf_counter()
    g = GridSpec(width, height)
    scene = forge.scene(scene_seed)
    traj = forge.trajectory(scene, traj_seed)
    rows = []
    for index, pose in list(zip(traj.sampled_indices, traj.sampled_poses()))[:frames]:
        rows.append({"frame": index, "mean_abs_diff": renderer_difference(scene, pose, g, forge.face_size, band)})
    table = pd.DataFrame(rows)
    worst = float(table["mean_abs_diff"].max())
    return _finish("render", worst <= tol, table, started, face_size=forge.face_size, max_mean_abs_diff=worst)


def scale_suite(forge: SceneForge, builder: EpipolarMaskBuilder, scene_seed: int = 0, traj_seed: int = 0,
                feat_h: int = 32, feat_w: int = 64, factor: float = 17.3,
                query_frames: Sequence[int] | None = None) -> SuiteResult:
    """Masks must not change, bit for bit, when every translation is scaled."""
    started = time.perf_counter()
    feat = GridSpec(feat_w, feat_h)
    poses = _trajectory_poses(forge, scene_seed, traj_seed)
    scaled = [pose.scaled(factor) for pose in poses]
    frames = query_frames if query_frames is not None else (0, len(poses) // 2, len(poses) - 1)
    rows = []
    for a, b in zip(builder.build(poses, feat, frames), builder.build(scaled, feat, frames)):
        rows.append({"query_frame": a.query_frame, "identical": bool(np.array_equal(a.bits, b.bits)),
                     "differing_bytes": int(np.count_nonzero(a.bits != b.bits))})
    table = pd.DataFrame(rows)
    return _finish("scale", bool(table["identical"].all()), table, started, factor=factor)


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "roundtrip": roundtrip_suite,
    "plucker": plucker_suite,
    "concordance": concordance_suite,
    "oracle": oracle_suite,
    "correspondence": correspondence_suite,
    "k-stability": k_stability_suite,
    "grad": grad_suite,
    "render": render_suite,
    "scale": scale_suite,
}
