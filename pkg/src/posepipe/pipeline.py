"""End-to-end streaming pipeline and evaluation harness.

Frames flow through the online partitioner; every sealed block is
solved locally and folded into the global rotation graph, and the
final trajectory is composed from the per-block solutions.  A baseline
mode (fixed-size partitioning, fixed-scaling LM, full-problem global
refinement) shares all remaining code paths for like-for-like
comparisons.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import (BlockRotationGraph, SharedCameraSet, collect_shared,
                    compose_trajectory, global_update)
from .geom import Pose, Rotation3
from .local_ba import (DEFAULT_COV_THR, LocalSolution, build_msf,
                       build_pose_graph, initial_relative_poses, solve_local,
                       triangulate_midpoint, BlockBundleProblem)
from .partition import Block, OnlinePartitioner, PartitionConfig
from .problem_io import load_problem
from .scene import SceneProblem, SynthConfig, generate_synthetic
from .solver import SolverConfig, SolverDiverged, solve, write_trace_csv


class TooFewFrames(ValueError):
    """Trajectory comparison needs at least 3 frames."""


class PipelineError(RuntimeError):
    """Module error tagged with the block that raised it."""

    def __init__(self, block_id, stage, cause):
        super().__init__(f"block {block_id} ({stage}): {cause}")
        self.block_id = block_id
        self.stage = stage


@dataclass
class RunConfig:
    """Everything that determines one pipeline run."""

    synthetic: SynthConfig | None = None
    input_path: str | None = None
    input_format: str = "bal"
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    # xi = 0.25 keeps the update factor sane on noisy blocks (the savage
    # 1e-8 factor only suits near-zero-residual solves) while the tiny
    # absolute floor pins the damping against null-direction drift
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(
        xi=0.25, alpha_floor=1e-8, max_iterations=120, gradient_tol=1e-10,
        cost_tol=1e-10))
    cov_thr: int = DEFAULT_COV_THR
    msf_mode: str = "star"
    baseline: bool = False
    seed: int | None = None
    out_dir: str | None = None
    traj_format: str = "tum"
    single_thread: bool = False
    parallel: bool = False
    average_shared: bool = False
    full_resolve: bool = False
    freeze_scale: bool = True
    baseline_global_iterations: int = 1


@dataclass
class BlockRecord:
    block_id: int
    size: int
    n_temporal: int
    gamma: float
    added: int
    iterations: int
    cost: float
    wall_ms: float


@dataclass
class GlobalRecord:
    update_id: int
    frames_so_far: int
    align_ms: float
    total_reprojection_error: float


@dataclass
class RunReport:
    config_echo: dict
    blocks: list[BlockRecord]
    global_updates: list[GlobalRecord]
    trajectory: list  # (frame_id, Pose), every input frame exactly once
    ate_rmse: float | None
    total_wall_ms: float
    traces: dict = field(default_factory=dict)

    def totals(self) -> dict:
        return {
            "n_blocks": len(self.blocks),
            "total_iterations": sum(b.iterations for b in self.blocks),
            "total_block_ms": sum(b.wall_ms for b in self.blocks),
            "total_align_ms": sum(g.align_ms for g in self.global_updates),
        }

    def to_json(self) -> str:
        payload = {
            "config": self.config_echo,
            "blocks": [dataclasses.asdict(b) for b in self.blocks],
            "global_updates": [dataclasses.asdict(g)
                               for g in self.global_updates],
            "trajectory": [
                [fid, [float(v) for v in pose.translation],
                 [float(v) for v in pose.rotation.q]]
                for fid, pose in self.trajectory],
            "ate_rmse": self.ate_rmse,
            "total_wall_ms": self.total_wall_ms,
            "totals": self.totals(),
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def _effective_configs(config: RunConfig):
    part = config.partition
    solver = config.solver
    if config.baseline:
        # fixed-size partitioning with single-frame overlap: an
        # unattainable covisibility threshold plus no added-in cameras
        part = dataclasses.replace(part, gamma_thr=math.inf, n_alpha=0)
        solver = dataclasses.replace(solver, adaptive=False)
    return part, solver


def _load_scene(config: RunConfig) -> SceneProblem:
    if config.synthetic is not None:
        synth = config.synthetic
        if config.seed is not None:
            synth = dataclasses.replace(synth, seed=config.seed)
        return generate_synthetic(synth)
    if config.input_path is None:
        raise ValueError("config needs either a synthetic config or an input path")
    return load_problem(config.input_path, config.input_format)


class _PipelineState:
    """Mutable state threaded through block processing."""

    def __init__(self, scene: SceneProblem):
        self.scene = scene
        self.snapshots: dict[int, Pose] = {}       # absolute pose estimates
        self.landmark_est = scene.landmark_positions.copy()
        self.solutions: dict[int, LocalSolution] = {}
        self.graph = BlockRotationGraph()
        self.processed_frames: list[int] = []


def _solve_block(state: _PipelineState, block: Block, config: RunConfig,
                 solver_cfg: SolverConfig) -> tuple[LocalSolution, Pose, float]:
    t0 = time.perf_counter()
    scene = state.scene
    ref_abs = state.snapshots.get(block.reference_frame_id)
    if ref_abs is None:
        # constant-position motion model: in parallel mode the previous
        # block may not have published yet, so fall back to the latest
        # known estimate before this block
        earlier = [f for f in state.snapshots
                   if f < block.reference_frame_id]
        ref_abs = (state.snapshots[max(earlier)] if earlier
                   else Pose.identity())
    try:
        graph = build_pose_graph(block, scene)
        forest = build_msf(graph, block, scene, cov_thr=config.cov_thr,
                           mode=config.msf_mode)
        init_poses = initial_relative_poses(block, forest, ref_abs,
                                            state.snapshots)
        init_lms = {int(lm): ref_abs.transform(state.landmark_est[lm])
                    for lm in block.landmark_ids}
        # the camera-baseline anchor needs a trustworthy baseline: only
        # when the second temporal frame carries its own propagated
        # estimate; otherwise a landmark anchors the scale
        trusted_baseline = (block.n_temporal >= 2
                            and block.camera_ids[1] in state.snapshots)
        sol = solve_local(scene, block, init_poses, init_lms,
                          solver_config=solver_cfg,
                          freeze_scale=config.freeze_scale,
                          freeze_scale_camera=trusted_baseline)
    except Exception as e:
        raise PipelineError(block.id, "local solve", e) from e
    return sol, ref_abs, (time.perf_counter() - t0) * 1e3


def _publish(state: _PipelineState, block: Block, sol: LocalSolution,
             ref_abs: Pose) -> None:
    ref_inv = ref_abs.inverse()
    for cam, rel in sol.relative_poses.items():
        state.snapshots[cam] = rel.compose(ref_abs)
    for lm, p_blk in sol.landmark_positions.items():
        state.landmark_est[lm] = ref_inv.transform(p_blk)
    # landmarks dropped by the two-view rule: re-triangulate from the
    # two most separated frames with published poses
    for lm in sol.excluded_landmarks:
        fids = [f for f in state.scene.frames_seeing(lm)
                if f in state.snapshots]
        if len(fids) < 2:
            continue
        fa, fb = fids[0], fids[-1]
        uv_a = _pixel_of(state.scene, fa, lm)
        uv_b = _pixel_of(state.scene, fb, lm)
        p = triangulate_midpoint(state.snapshots[fa], uv_a,
                                 state.snapshots[fb], uv_b,
                                 state.scene.intrinsics)
        if p is not None:
            state.landmark_est[lm] = p


def _pixel_of(scene: SceneProblem, frame_id: int, lm: int) -> np.ndarray:
    fr = scene.frame_by_id(frame_id)
    i = int(np.searchsorted(fr.landmark_ids, lm)) \
        if np.all(np.diff(fr.landmark_ids) >= 0) else None
    if i is not None and i < fr.landmark_ids.size and fr.landmark_ids[i] == lm:
        return fr.pixels[i]
    idx = np.nonzero(fr.landmark_ids == lm)[0]
    return fr.pixels[idx[0]]


def _incident_shared(state: _PipelineState, block_id: int) -> list[SharedCameraSet]:
    sol = state.solutions[block_id]
    out = []
    for other_id in sorted(state.solutions):
        if other_id == block_id:
            continue
        other = state.solutions[other_id]
        cams = sorted(set(sol.relative_poses) & set(other.relative_poses))
        if cams:
            a, b = min(other_id, block_id), max(other_id, block_id)
            sol_a = state.solutions[a]
            sol_b = state.solutions[b]
            out.append(SharedCameraSet(
                a, b, tuple(cams),
                tuple(sol_a.relative_poses[c] for c in cams),
                tuple(sol_b.relative_poses[c] for c in cams)))
    return out


def _baseline_global_step(state: _PipelineState, config: RunConfig,
                          solver_cfg: SolverConfig) -> None:
    """Conventional global step: LM iterations of the full reprojection
    problem over every processed frame (first frame fixed).

    This is the point-camera global BA whose per-update cost the
    progressive alignment is compared against; the conventional error
    reference is the incremental chain itself, so the refinement is
    timed but not folded back into the running estimates."""
    scene = state.scene
    fids = state.processed_frames
    if len(fids) < 2:
        return
    pseudo = Block(
        id=0, camera_ids=tuple(fids), n_temporal=len(fids),
        landmark_ids=frozenset(
            int(l) for f in fids for l in scene.frame_by_id(f).landmark_ids),
        added_in_ids=(), reference_frame_id=fids[0], gamma_at_seal=0.0)
    anchor = state.snapshots[fids[0]]
    anchor_inv = anchor.inverse()
    init_poses = {f: state.snapshots[f].compose(anchor_inv) for f in fids}
    init_lms = {int(lm): anchor.transform(state.landmark_est[lm])
                for lm in pseudo.landmark_ids}
    try:
        problem = BlockBundleProblem(scene, pseudo, init_poses, init_lms,
                                     freeze_scale=False)
    except Exception:
        return
    cfg = dataclasses.replace(
        solver_cfg, adaptive=False, eta=max(2, len(fids)),
        max_iterations=config.baseline_global_iterations)
    solve(problem, problem.initial_x(), cfg)


def _current_trajectory(state: _PipelineState, config: RunConfig) -> dict[int, Pose]:
    if config.baseline:
        return {f: state.snapshots[f] for f in state.processed_frames}
    return compose_trajectory(state.solutions, state.graph,
                              average_shared=config.average_shared)


def run_pipeline(config: RunConfig) -> RunReport:
    """Partition, solve and align a whole sequence; returns the report.

    Deterministic for a fixed seed when not running parallel solves;
    ``single_thread`` additionally zeroes the wall-time fields so that
    emitted files are byte-identical across runs.
    """
    t_start = time.perf_counter()
    scene = _load_scene(config)
    part_cfg, solver_cfg = _effective_configs(config)
    state = _PipelineState(scene)
    partitioner = OnlinePartitioner(part_cfg)

    block_records: list[BlockRecord] = []
    global_records: list[GlobalRecord] = []
    traces: dict[int, list] = {}

    parallel = config.parallel and not config.single_thread
    executor = ThreadPoolExecutor(max_workers=4) if parallel else None
    pending: list[tuple[Block, object]] = []

    def integrate(block: Block, sol: LocalSolution, ref_abs: Pose,
                  wall_ms: float) -> None:
        state.processed_frames.extend(
            f for f in block.temporal_ids if f not in state.processed_frames)
        _publish(state, block, sol, ref_abs)
        state.solutions[block.id] = sol
        traces[block.id] = sol.trace

        t0 = time.perf_counter()
        try:
            if config.baseline:
                state.graph.absolute.setdefault(block.id, Rotation3.identity())
                if state.graph.anchor is None:
                    state.graph.anchor = block.id
                _baseline_global_step(state, config, solver_cfg)
            else:
                incident = _incident_shared(state, block.id)
                global_update(
                    state.graph, block.id, incident,
                    full_resolve=config.full_resolve,
                    all_shared=collect_shared(state.solutions)
                    if config.full_resolve else None)
        except Exception as e:
            raise PipelineError(block.id, "global alignment", e) from e
        align_ms = (time.perf_counter() - t0) * 1e3

        # running error metric: each mode's working state (snapshots +
        # landmark estimates), the gauge-consistent pair the system
        # actually maintains online.  The similarity-composed trajectory
        # is an output view only; mixing its poses with chain landmarks
        # (or later initializations) is cross-gauge and misleading.
        work_poses = {f: state.snapshots[f] for f in state.processed_frames}
        total_err = scene.reprojection_cost(
            work_poses, state.landmark_est, frame_ids=state.processed_frames)
        block_records.append(BlockRecord(
            block.id, block.size, block.n_temporal, block.gamma_at_seal,
            len(block.added_in_ids), sol.iterations, sol.cost, wall_ms))
        global_records.append(GlobalRecord(
            len(global_records) + 1, len(state.processed_frames),
            align_ms, total_err))

    def drain(wait_all: bool) -> None:
        while pending:
            block, fut = pending[0]
            if not wait_all and not fut.done():
                break
            sol, ref_abs, wall_ms = fut.result()
            integrate(block, sol, ref_abs, wall_ms)
            pending.pop(0)

    def handle(block: Block) -> None:
        if executor is None:
            sol, ref_abs, wall_ms = _solve_block(state, block, config,
                                                 solver_cfg)
            integrate(block, sol, ref_abs, wall_ms)
        else:
            # consecutive blocks chain through the shared reference
            # frame, so wait for its snapshot; the solve then overlaps
            # with the previous blocks' alignment and bookkeeping
            while pending and block.reference_frame_id not in state.snapshots:
                drain(wait_all=True)
            fut = executor.submit(_solve_block, state, block, config,
                                  solver_cfg)
            pending.append((block, fut))
            drain(wait_all=False)

    for frame in scene.frames:
        sealed = partitioner.ingest_frame(frame)
        if sealed is not None:
            handle(sealed)
    tail = partitioner.flush()
    if tail is not None:
        handle(tail)
    if executor is not None:
        drain(wait_all=True)
        executor.shutdown()

    trajectory_map = _current_trajectory(state, config)
    all_ids = [fr.id for fr in scene.frames]
    missing = [f for f in all_ids if f not in trajectory_map]
    assert not missing, f"frames missing from the trajectory: {missing[:5]}"
    trajectory = [(fid, trajectory_map[fid]) for fid in all_ids]

    ate = None
    if scene.ground_truth is not None:
        est = [p for _, p in trajectory]
        ate = ate_rmse(est, list(scene.ground_truth.poses))

    total_ms = (time.perf_counter() - t_start) * 1e3
    if config.single_thread:
        # timings are suppressed so emitted files are byte-identical
        for b in block_records:
            b.wall_ms = 0.0
        for g in global_records:
            g.align_ms = 0.0
        total_ms = 0.0

    report = RunReport(
        config_echo=_config_echo(config, part_cfg, solver_cfg),
        blocks=block_records,
        global_updates=global_records,
        trajectory=trajectory,
        ate_rmse=ate,
        total_wall_ms=total_ms,
        traces=traces,
    )
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        emit_metrics_csv(report, out)
        export_trajectory(report.trajectory,
                          out / f"trajectory.{_ext(config.traj_format)}",
                          config.traj_format)
        (out / "report.json").write_text(report.to_json())
    return report


def _config_echo(config: RunConfig, part_cfg: PartitionConfig,
                 solver_cfg: SolverConfig) -> dict:
    return {
        "mode": "baseline" if config.baseline else "hybrid",
        "partition": dataclasses.asdict(part_cfg),
        "solver_adaptive": solver_cfg.adaptive,
        "solver": {k: v for k, v in dataclasses.asdict(solver_cfg).items()
                   if k != "adaptive"},
        "cov_thr": config.cov_thr,
        "msf_mode": config.msf_mode,
        "seed": config.seed,
        "single_thread": config.single_thread,
        "freeze_scale": config.freeze_scale,
    }


def _ext(fmt: str) -> str:
    return {"tum": "tum.txt", "kitti": "kitti.txt"}[fmt]


# ---------------------------------------------------------------------------
# evaluation and exporters


def ate_rmse(estimated, ground_truth) -> float:
    """RMSE of camera positions after closed-form similarity alignment.

    Accepts sequences of Pose or of 3-vectors; a scale + rotation +
    translation (Umeyama) fit removes the gauge before comparing.
    """
    def centers(seq):
        out = []
        for p in seq:
            out.append(p.center() if isinstance(p, Pose) else np.asarray(p, float))
        return np.array(out).reshape(-1, 3)

    x = centers(estimated)
    y = centers(ground_truth)
    if x.shape[0] != y.shape[0]:
        raise ValueError("trajectories must have equal frame counts")
    n = x.shape[0]
    if n < 3:
        raise TooFewFrames(f"need >= 3 frames, got {n}")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[2, 2] = -1.0
    rot = u @ s_mat @ vt
    var_x = float(np.sum(xc * xc)) / n
    scale = float(np.trace(np.diag(d) @ s_mat)) / var_x if var_x > 0 else 1.0
    t = my - scale * rot @ mx
    err = (scale * (rot @ x.T).T + t) - y
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def export_trajectory(trajectory, path, format: str = "tum") -> None:
    """Write per-frame absolute poses.

    ``tum``: one line per frame ``timestamp tx ty tz qx qy qz qw`` with
    the camera-to-world transform (camera center + orientation).
    ``kitti``: 12 reals per line, the row-major upper 3x4 of the
    camera-to-world matrix.
    """
    path = Path(path)
    lines = []
    for fid, pose in trajectory:
        c = pose.center() + 0.0  # normalizes negative zeros
        if format == "tum":
            q = pose.rotation.inverse().q
            if q[0] < 0:
                q = -q
            q = q + 0.0
            lines.append(f"{float(fid):.1f} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g} "
                         f"{q[1]:.17g} {q[2]:.17g} {q[3]:.17g} {q[0]:.17g}")
        elif format == "kitti":
            m = np.hstack([pose.rotation.inverse().matrix, c[:, None]]) + 0.0
            lines.append(" ".join(f"{v:.17g}" for v in m.ravel()))
        else:
            raise ValueError(f"unknown trajectory format {format!r}")
    path.write_text("\n".join(lines) + "\n")


def load_trajectory(path, format: str = "tum"):
    """Inverse of export_trajectory; returns [(frame_id, Pose)]."""
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        vals = [float(v) for v in line.split()]
        if format == "tum":
            if len(vals) != 8:
                raise ValueError(f"line {ln + 1}: expected 8 fields")
            t, x, y, z, qx, qy, qz, qw = vals
            rot = Rotation3.from_quaternion([qw, qx, qy, qz]).inverse()
            out.append((int(t), Pose(rot, -rot.apply([x, y, z]))))
        elif format == "kitti":
            if len(vals) != 12:
                raise ValueError(f"line {ln + 1}: expected 12 fields")
            m = np.array(vals).reshape(3, 4)
            rot = Rotation3.from_matrix(m[:, :3]).inverse()
            out.append((ln, Pose(rot, -rot.apply(m[:, 3]))))
        else:
            raise ValueError(f"unknown trajectory format {format!r}")
    return out


def emit_metrics_csv(report: RunReport, out_dir) -> None:
    """Write blocks.csv, global.csv and one trace CSV per block."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "blocks.csv", "w") as fh:
        fh.write("block_id,size,gamma,added,iters,cost,ms\n")
        for b in report.blocks:
            gamma = "inf" if math.isinf(b.gamma) else f"{b.gamma:.17g}"
            fh.write(f"{b.block_id},{b.size},{gamma},{b.added},"
                     f"{b.iterations},{b.cost:.17g},{b.wall_ms:.17g}\n")
    with open(out / "global.csv", "w") as fh:
        fh.write("update_id,frames_so_far,align_ms,total_reprojection_error\n")
        for g in report.global_updates:
            fh.write(f"{g.update_id},{g.frames_so_far},{g.align_ms:.17g},"
                     f"{g.total_reprojection_error:.17g}\n")
    for bid, trace in report.traces.items():
        write_trace_csv(trace, out / f"trace_block_{bid}.csv")
