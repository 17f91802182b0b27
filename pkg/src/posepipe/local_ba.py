"""Per-block bundle adjustment.

A sealed block is refined by minimizing the reprojection objective over
its cameras and landmarks, with all poses expressed relative to the
block's reference frame (the first temporal member, frozen at the
identity).  Initialization is broadcast over a maximum spanning forest
rooted at the added-in cameras, which carry solved parameters from
earlier blocks; iterations are delegated to the self-adaptive solver.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geom import (EPS_DEPTH, Intrinsics, Pose, Rotation3, exp_map, skew,
                   so3_right_jacobian)
from .partition import Block
from .scene import SceneProblem
from .solver import ResidualSystem, SolveResult, SolverConfig, solve

log = logging.getLogger(__name__)

DEFAULT_COV_THR = 15     # minimum covisible landmarks for a broadcast edge
_SCALE_FREEZE_MIN = 1e-9  # baselines below this leave the scale to damping


class MissingSnapshot(RuntimeError):
    """A forest root has no published solution to propagate."""


class InsufficientConstraints(RuntimeError):
    """Too few usable observations to determine the block parameters."""


@dataclass(frozen=True)
class PoseGraph:
    """Intra-block covisibility graph; an edge means >= 1 shared landmark."""

    vertices: tuple[int, ...]
    edges: frozenset  # of 2-tuples (u, v) with u < v

    def neighbors(self, v: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == v:
                out.append(b)
            elif b == v:
                out.append(a)
        return sorted(out)


def build_pose_graph(block: Block, scene: SceneProblem) -> PoseGraph:
    cams = block.camera_ids
    sets = {c: frozenset(int(i) for i in scene.frame_by_id(c).landmark_ids)
            for c in cams}
    edges = set()
    for i, u in enumerate(cams):
        for v in cams[i + 1:]:
            if sets[u] & sets[v]:
                edges.add((min(u, v), max(u, v)))
    return PoseGraph(tuple(cams), frozenset(edges))


@dataclass(frozen=True)
class SpanningForest:
    """Vertex-disjoint trees covering the block cameras.

    One tree per added-in root plus the reference-frame tree; the
    parent map sends each root to itself.
    """

    roots: tuple[int, ...]
    reference_root: int
    tree_of: dict[int, int]
    parent: dict[int, int]
    edge_weight: dict[int, float]

    def members(self, root: int) -> list[int]:
        return sorted(v for v, r in self.tree_of.items() if r == root)


def build_msf(graph: PoseGraph, block: Block, scene: SceneProblem,
              cov_thr: int = DEFAULT_COV_THR, mode: str = "star") -> SpanningForest:
    """Maximum-weight spanning forest used to broadcast initial values.

    ``star`` weights only root-to-vertex pairs (covisible count when it
    clears cov_thr, else 0), producing depth-1 trees; ``kruskal``
    additionally allows vertex-to-vertex edges and grows full trees.
    Cameras reachable from no added-in root attach to the reference
    tree.  Ties break toward (lower root id, lower vertex id).
    """
    ref = block.reference_frame_id
    added = tuple(block.added_in_ids)
    roots = added + (ref,)
    sets = {c: frozenset(int(i) for i in scene.frame_by_id(c).landmark_ids)
            for c in graph.vertices}
    tree_of = {r: r for r in roots}
    parent = {r: r for r in roots}
    weight = {r: 0.0 for r in roots}

    others = [v for v in graph.vertices if v not in roots]
    if mode == "star":
        for v in others:
            best = None
            for r in added:
                w = len(sets[r] & sets[v])
                if w >= cov_thr and (best is None or (-w, r) < best[:2]):
                    best = (-w, r, w)
            if best is None:
                tree_of[v], parent[v], weight[v] = ref, ref, 0.0
            else:
                tree_of[v], parent[v], weight[v] = best[1], best[1], best[2]
        return SpanningForest(roots, ref, tree_of, parent, weight)

    if mode != "kruskal":
        raise ValueError(f"unknown msf mode {mode!r}")

    # Kruskal over all covisibility edges with pre-seeded root components
    # that are never merged with each other.
    comp = {v: v for v in graph.vertices}

    def find(v):
        while comp[v] != v:
            comp[v] = comp[comp[v]]
            v = comp[v]
        return v

    root_tag = {r: r for r in roots}
    edges = []
    for (u, v) in graph.edges:
        w = len(sets[u] & sets[v])
        if w >= cov_thr:
            edges.append((-w, u, v))
    edges.sort()
    adjacency: dict[int, list[tuple[int, float]]] = {v: [] for v in graph.vertices}
    for negw, u, v in edges:
        fu, fv = find(u), find(v)
        if fu == fv:
            continue
        tu, tv = root_tag.get(fu), root_tag.get(fv)
        if tu is not None and tv is not None:
            continue  # would merge two fixed roots
        comp[fu] = fv
        if tu is not None:
            root_tag[fv] = tu
        adjacency[u].append((v, -negw))
        adjacency[v].append((u, -negw))

    for r in roots:  # breadth-first orientation away from each root
        queue = [r]
        while queue:
            u = queue.pop(0)
            for v, w in sorted(adjacency[u]):
                if v in tree_of:
                    continue
                tree_of[v], parent[v], weight[v] = tree_of[u], u, w
                queue.append(v)
    for v in others:
        if v not in tree_of:
            tree_of[v], parent[v], weight[v] = ref, ref, 0.0
    return SpanningForest(roots, ref, tree_of, parent, weight)


def initial_relative_poses(block: Block, forest: SpanningForest,
                           reference_absolute: Pose,
                           snapshots: dict[int, Pose],
                           strict: bool = False) -> dict[int, Pose]:
    """Initial pose of every block camera relative to the reference.

    Cameras with their own published snapshot reuse it; other members
    of an added-in tree take their root's propagated pose; everything
    else starts at the reference (constant-position motion model).
    Snapshots are absolute poses in the running trajectory frame and
    are converted through the shared-frame chain.
    """
    ref_inv = reference_absolute.inverse()
    out: dict[int, Pose] = {}
    for cam in block.camera_ids:
        if cam == block.reference_frame_id:
            out[cam] = Pose.identity()
            continue
        if cam in snapshots:
            out[cam] = snapshots[cam].compose(ref_inv)
            continue
        root = forest.tree_of.get(cam, forest.reference_root)
        if root != forest.reference_root:
            if root in snapshots:
                out[cam] = snapshots[root].compose(ref_inv)
                continue
            if strict:
                raise MissingSnapshot(f"root {root} of block {block.id} "
                                      f"has no published solution")
            log.warning("block %d: root %d has no snapshot; camera %d falls "
                        "back to reference initialization", block.id, root, cam)
        out[cam] = Pose.identity()
    return out


# ---------------------------------------------------------------------------
# block residual system


def _sphere_chart(d0: np.ndarray):
    """Orthonormal tangent basis at a unit direction (3,) -> (3, 2)."""
    a = np.array([1.0, 0.0, 0.0])
    if abs(d0[0]) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    b1 = np.cross(d0, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(d0, b1)
    return d0, np.stack([b1, b2], axis=1)


class BlockBundleProblem(ResidualSystem):
    """Reprojection residuals of one block as a residual system.

    Parameters are, per non-reference camera, a 3-vector rotation
    increment applied on the right of the initial rotation plus either
    the free translation (3) or, for the scale-anchor camera, 2
    coordinates moving its translation on the sphere of radius equal to
    its initial distance from the reference.  Landmark positions (block
    frame) follow, 3 each.

    The monocular scale direction (scaling all centers and points about
    the reference) leaves every residual exactly unchanged, so it must
    be pinned or iterates drift along it freely.  With
    ``freeze_scale_camera`` the second temporal camera's distance to
    the reference is frozen at its initial value (only sane when that
    initial value is a propagated estimate); otherwise the most
    observed landmark's distance to the reference is frozen instead,
    which is always consistent with the initial structure.
    """

    def __init__(self, scene: SceneProblem, block: Block,
                 init_poses: dict[int, Pose],
                 init_landmarks: dict[int, np.ndarray],
                 freeze_scale: bool = True,
                 freeze_scale_camera: bool = False):
        self.scene = scene
        self.block = block
        self.intrinsics: Intrinsics = scene.intrinsics
        self.camera_ids = list(block.camera_ids)
        self.ref_id = block.reference_frame_id

        # landmarks usable as residuals: seen by >= 2 block cameras
        counts: dict[int, int] = {}
        for cam in self.camera_ids:
            for lm in scene.frame_by_id(cam).landmark_ids:
                lm = int(lm)
                if lm in init_landmarks:
                    counts[lm] = counts.get(lm, 0) + 1
        self.point_ids = sorted(lm for lm, c in counts.items() if c >= 2)
        self.excluded_ids = sorted(lm for lm in block.landmark_ids
                                   if lm not in counts or counts[lm] < 2)
        if not self.point_ids:
            raise InsufficientConstraints(
                f"block {block.id}: no landmark is seen by 2 block cameras")
        pt_index = {lm: i for i, lm in enumerate(self.point_ids)}

        # observations starting at or behind the camera plane are
        # excluded from the residual set (landmarks dropping below two
        # views with them).  The margin is physical: a point at a
        # vanishing initial depth carries a 1/z^2 gradient no damping
        # can step over.
        self._cam_index = {cam: i for i, cam in enumerate(self.camera_ids)}
        depths = []
        for cam in self.camera_ids:
            fr = scene.frame_by_id(cam)
            pose = init_poses[cam]
            for lm in fr.landmark_ids:
                lm = int(lm)
                if lm in pt_index:
                    depths.append(pose.transform(init_landmarks[lm])[2])
        positive = [d for d in depths if d > EPS_DEPTH]
        margin = max(EPS_DEPTH,
                     0.01 * float(np.median(positive)) if positive else 0.0)
        usable: dict[int, list[tuple[int, np.ndarray]]] = {}
        n_dropped = 0
        for cam in self.camera_ids:
            fr = scene.frame_by_id(cam)
            pose = init_poses[cam]
            for lm, uv in zip(fr.landmark_ids, fr.pixels):
                lm = int(lm)
                if lm not in pt_index:
                    continue
                depth = pose.transform(init_landmarks[lm])[2]
                if depth <= margin:
                    n_dropped += 1
                    continue
                usable.setdefault(lm, []).append((self._cam_index[cam], uv))
        if n_dropped:
            log.warning("block %d: %d observations behind their initial "
                        "camera excluded from the residuals",
                        block.id, n_dropped)
        survivors = sorted(lm for lm, rows in usable.items() if len(rows) >= 2)
        if not survivors:
            raise InsufficientConstraints(
                f"block {block.id}: no landmark keeps 2 usable views")
        self.excluded_ids = sorted(set(self.excluded_ids)
                                   | (set(self.point_ids) - set(survivors)))

        # scale anchor: the second temporal camera's baseline when the
        # caller vouches for it, else the most observed landmark
        self.scale_cam: int | None = None
        self.scale_landmark: int | None = None
        self.scale_radius = 0.0
        if freeze_scale:
            if freeze_scale_camera and block.n_temporal >= 2:
                cand = block.camera_ids[1]
                r0 = float(np.linalg.norm(init_poses[cand].translation))
                if r0 > _SCALE_FREEZE_MIN:
                    self.scale_cam = cand
                    self.scale_radius = r0
                    self._sphere_d0, self._sphere_basis = _sphere_chart(
                        init_poses[cand].translation / r0)
            if self.scale_cam is None:
                for lm in sorted(survivors,
                                 key=lambda l: (-len(usable[l]), l)):
                    r0 = float(np.linalg.norm(init_landmarks[lm]))
                    if r0 > _SCALE_FREEZE_MIN:
                        self.scale_landmark = lm
                        self.scale_radius = r0
                        self._sphere_d0, self._sphere_basis = _sphere_chart(
                            np.asarray(init_landmarks[lm]) / r0)
                        break

        # parameter layout: cameras first, free landmarks 3 apiece, the
        # anchor landmark's 2 sphere coordinates at the very end
        self.cam_offset: dict[int, int] = {}
        self.cam_width: dict[int, int] = {}
        off = 0
        for cam in self.camera_ids:
            if cam == self.ref_id:
                continue
            w = 5 if cam == self.scale_cam else 6
            self.cam_offset[cam] = off
            self.cam_width[cam] = w
            off += w
        self.point_ids = ([lm for lm in survivors if lm != self.scale_landmark]
                          + ([self.scale_landmark]
                             if self.scale_landmark is not None else []))
        pt_index = {lm: i for i, lm in enumerate(self.point_ids)}
        self.point_offset = off
        self.n_free_points = len(self.point_ids) - (
            1 if self.scale_landmark is not None else 0)
        self.anchor_offset = off + 3 * self.n_free_points
        self.n_params = self.anchor_offset + (
            2 if self.scale_landmark is not None else 0)

        self._base_rot = {cam: init_poses[cam].rotation.matrix
                          for cam in self.camera_ids}
        self._init_poses = dict(init_poses)

        cam_rows, pt_rows, uv_rows = [], [], []
        for lm in self.point_ids:
            for ci, uv in usable[lm]:
                cam_rows.append(ci)
                pt_rows.append(pt_index[lm])
                uv_rows.append(uv)
        self.obs_cam = np.array(cam_rows, dtype=np.int64)
        self.obs_pt = np.array(pt_rows, dtype=np.int64)
        self.obs_uv = np.array(uv_rows).reshape(-1, 2)
        self.n_obs = self.obs_cam.size
        if 2 * self.n_obs < self.n_params:
            raise InsufficientConstraints(
                f"block {block.id}: {2 * self.n_obs} residual rows for "
                f"{self.n_params} parameters")

        self._init_landmarks = init_landmarks

    # -- packing -----------------------------------------------------------

    def initial_x(self) -> np.ndarray:
        x = np.zeros(self.n_params)
        for cam in self.camera_ids:
            if cam == self.ref_id:
                continue
            o = self.cam_offset[cam]
            # rotation increment starts at zero; translation at its init
            # (sphere coordinates start at the chart origin)
            if cam != self.scale_cam:
                x[o + 3:o + 6] = self._init_poses[cam].translation
        free = self.point_ids[:self.n_free_points]
        pts = np.array([self._init_landmarks[lm] for lm in free]).reshape(-1, 3)
        x[self.point_offset:self.anchor_offset] = pts.ravel()
        return x

    def _sphere_point(self, s, with_jacobian=False):
        v = self._sphere_d0 + self._sphere_basis @ s
        nv = np.linalg.norm(v)
        u = v / nv
        p = self.scale_radius * u
        if not with_jacobian:
            return p, None
        dp_ds = (self.scale_radius / nv) * \
            (np.eye(3) - np.outer(u, u)) @ self._sphere_basis
        return p, dp_ds

    def _unpack(self, x, with_jacobian=False):
        n_cam = len(self.camera_ids)
        rmats = np.empty((n_cam, 3, 3))
        ts = np.empty((n_cam, 3))
        jrs = np.empty((n_cam, 3, 3)) if with_jacobian else None
        sphere = None
        for cam in self.camera_ids:
            ci = self._cam_index[cam]
            if cam == self.ref_id:
                rmats[ci] = np.eye(3)
                ts[ci] = 0.0
                if with_jacobian:
                    jrs[ci] = np.eye(3)
                continue
            o = self.cam_offset[cam]
            w = x[o:o + 3]
            rmats[ci] = self._base_rot[cam] @ exp_map(w).matrix
            if with_jacobian:
                jrs[ci] = so3_right_jacobian(w)
            if cam == self.scale_cam:
                ts[ci], sphere = self._sphere_point(x[o + 3:o + 5],
                                                    with_jacobian)
            else:
                ts[ci] = x[o + 3:o + 6]
        pts = np.empty((len(self.point_ids), 3))
        pts[:self.n_free_points] = \
            x[self.point_offset:self.anchor_offset].reshape(-1, 3)
        if self.scale_landmark is not None:
            pts[-1], sphere = self._sphere_point(x[self.anchor_offset:],
                                                 with_jacobian)
        return rmats, ts, pts, jrs, sphere

    def poses_from_x(self, x) -> dict[int, Pose]:
        rmats, ts, _, _, _ = self._unpack(x)
        out = {}
        for cam in self.camera_ids:
            ci = self._cam_index[cam]
            if cam == self.ref_id:
                out[cam] = Pose.identity()
            else:
                out[cam] = Pose(Rotation3.from_matrix(rmats[ci]), ts[ci])
        return out

    def points_from_x(self, x) -> dict[int, np.ndarray]:
        _, _, pts, _, _ = self._unpack(x)
        return {lm: pts[i].copy() for i, lm in enumerate(self.point_ids)}

    # -- residual system interface ------------------------------------------

    def residual(self, x):
        rmats, ts, pts, _, _ = self._unpack(x)
        p = pts[self.obs_pt]
        pc = np.einsum("oij,oj->oi", rmats[self.obs_cam], p) + ts[self.obs_cam]
        z = pc[:, 2]
        k = self.intrinsics
        r = np.empty((self.n_obs, 2))
        bad = z <= EPS_DEPTH
        zsafe = np.where(bad, 1.0, z)
        r[:, 0] = k.fx * pc[:, 0] / zsafe + k.cx - self.obs_uv[:, 0]
        r[:, 1] = k.fy * pc[:, 1] / zsafe + k.cy - self.obs_uv[:, 1]
        r[bad] = np.inf
        return r.ravel()

    def jacobian(self, x):
        rmats, ts, pts, jrs, sphere = self._unpack(x, with_jacobian=True)
        p = pts[self.obs_pt]
        rm = rmats[self.obs_cam]
        pc = np.einsum("oij,oj->oi", rm, p) + ts[self.obs_cam]
        z = np.where(pc[:, 2] <= EPS_DEPTH, np.inf, pc[:, 2])
        k = self.intrinsics

        # d(pixel)/d(camera-frame point), (n_obs, 2, 3)
        dpi = np.zeros((self.n_obs, 2, 3))
        dpi[:, 0, 0] = k.fx / z
        dpi[:, 0, 2] = -k.fx * pc[:, 0] / (z * z)
        dpi[:, 1, 1] = k.fy / z
        dpi[:, 1, 2] = -k.fy * pc[:, 1] / (z * z)

        # rotation: d(pc)/dw = -R [p]_x J_r(w)
        sk = np.zeros((self.n_obs, 3, 3))
        sk[:, 0, 1] = -p[:, 2]
        sk[:, 0, 2] = p[:, 1]
        sk[:, 1, 0] = p[:, 2]
        sk[:, 1, 2] = -p[:, 0]
        sk[:, 2, 0] = -p[:, 1]
        sk[:, 2, 1] = p[:, 0]
        dpc_dw = -np.einsum("oij,ojk,okl->oil", rm, sk, jrs[self.obs_cam])
        d_rot = np.einsum("oij,ojk->oik", dpi, dpc_dw)        # (n, 2, 3)
        d_pt = np.einsum("oij,ojk->oik", dpi, rm)             # (n, 2, 3)

        data, rows, cols = [], [], []
        obs_rows = 2 * np.arange(self.n_obs)

        for cam in self.camera_ids:
            if cam == self.ref_id:
                continue
            ci = self._cam_index[cam]
            mask = self.obs_cam == ci
            if not mask.any():
                continue
            o = self.cam_offset[cam]
            rr = obs_rows[mask]
            if cam == self.scale_cam:
                d_t = np.einsum("oij,jk->oik", dpi[mask], sphere)  # (m, 2, 2)
                blk = np.concatenate([d_rot[mask], d_t], axis=2)   # (m, 2, 5)
                width = 5
            else:
                blk = np.concatenate([d_rot[mask], dpi[mask]], axis=2)
                width = 6
            m = rr.size
            data.append(blk.ravel())
            rows.append(np.repeat(np.stack([rr, rr + 1], axis=1).ravel(), width))
            cols.append(np.tile(np.arange(o, o + width), 2 * m))

        # landmark columns (the anchor landmark gets its 2 sphere columns)
        if self.scale_landmark is not None:
            anchor_idx = len(self.point_ids) - 1
            free_mask = self.obs_pt != anchor_idx
        else:
            anchor_idx = -1
            free_mask = np.ones(self.n_obs, dtype=bool)
        pcols = self.point_offset + 3 * self.obs_pt[free_mask]
        rr = obs_rows[free_mask]
        data.append(d_pt[free_mask].ravel())
        rows.append(np.repeat(np.stack([rr, rr + 1], axis=1).ravel(), 3))
        cols.append((pcols[:, None, None] + np.tile(np.arange(3), (2, 1))[None]
                     ).ravel())
        if anchor_idx >= 0 and (~free_mask).any():
            d_a = np.einsum("oij,jk->oik", d_pt[~free_mask], sphere)  # (m,2,2)
            rr = obs_rows[~free_mask]
            data.append(d_a.ravel())
            rows.append(np.repeat(np.stack([rr, rr + 1], axis=1).ravel(), 2))
            cols.append(np.tile(np.arange(self.anchor_offset,
                                          self.anchor_offset + 2),
                                2 * rr.size))

        jac = sp.csr_matrix(
            (np.concatenate(data),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * self.n_obs, self.n_params))
        return jac


@dataclass
class LocalSolution:
    """Published result of one block solve (immutable once published)."""

    block_id: int
    relative_poses: dict[int, Pose]
    landmark_positions: dict[int, np.ndarray]   # block frame, residual set
    cost: float
    iterations: int
    status: str
    gauge: str             # frozen-baseline | frozen-landmark | damped
    trace: list = field(default_factory=list)
    excluded_landmarks: tuple = ()


def solve_local(scene: SceneProblem, block: Block,
                init_poses: dict[int, Pose],
                init_landmarks: dict[int, np.ndarray],
                solver_config: SolverConfig | None = None,
                freeze_scale: bool = True,
                freeze_scale_camera: bool = False) -> LocalSolution:
    """Refine one block relative to its reference frame.

    The reference pose is the identity in the returned solution by
    construction; accepted iterations never increase the objective.
    ``freeze_scale_camera`` selects the second-temporal-camera baseline
    as the scale anchor (callers set it when that camera's initial pose
    is its own propagated estimate); otherwise a landmark anchors the
    scale.
    """
    problem = BlockBundleProblem(scene, block, init_poses, init_landmarks,
                                 freeze_scale=freeze_scale,
                                 freeze_scale_camera=freeze_scale_camera)
    if solver_config is None:
        solver_config = SolverConfig()
    # residuals below ~1e-9 px are inside the rounding noise of the
    # projection chain; costs there count as a zero residual
    cfg = dataclasses.replace(
        solver_config, eta=max(2, block.size), keep_iterates=False,
        zero_cost_floor=max(solver_config.zero_cost_floor, 1e-18))
    result: SolveResult = solve(problem, problem.initial_x(), cfg)
    poses = problem.poses_from_x(result.x)
    points = problem.points_from_x(result.x)
    if problem.scale_cam is not None:
        gauge = "frozen-baseline"
    elif problem.scale_landmark is not None:
        gauge = "frozen-landmark"
    else:
        gauge = "damped"
    return LocalSolution(
        block_id=block.id,
        relative_poses=poses,
        landmark_positions=points,
        cost=result.cost,
        iterations=result.iterations,
        status=result.status,
        gauge=gauge,
        trace=result.trace,
        excluded_landmarks=tuple(problem.excluded_ids),
    )


def triangulate_midpoint(pose_a: Pose, uv_a, pose_b: Pose, uv_b,
                         intrinsics: Intrinsics) -> np.ndarray | None:
    """Midpoint of the closest approach of two viewing rays.

    Returns None for (near-)parallel rays.
    """
    def ray(pose, uv):
        k = intrinsics
        d_cam = np.array([(uv[0] - k.cx) / k.fx, (uv[1] - k.cy) / k.fy, 1.0])
        d = pose.rotation.inverse().apply(d_cam)
        return pose.center(), d / np.linalg.norm(d)

    o1, d1 = ray(pose_a, uv_a)
    o2, d2 = ray(pose_b, uv_b)
    a = float(d1 @ d1)
    b = float(d1 @ d2)
    c = float(d2 @ d2)
    det = a * c - b * b
    if abs(det) < 1e-12:
        return None
    w = o2 - o1
    s = (c * (w @ d1) - b * (w @ d2)) / det
    t = (b * (w @ d1) - a * (w @ d2)) / det
    return 0.5 * (o1 + s * d1 + o2 + t * d2)
