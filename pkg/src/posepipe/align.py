"""Progressive global alignment of solved blocks.

Cameras shared between two blocks yield per-camera estimates of the
inter-block relative rotation; their geodesic L2 mean (single rotation
averaging) gives the block-pair rotation, and block-coordinate sweeps
of the same mean over the block graph maintain per-block pseudo
absolute rotations as new blocks arrive.  Translations and the
per-block monocular scale are reconciled afterwards by chaining
least-squares similarity fits over shared camera centers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, Rotation3, exp_map, geodesic_distance, log_map
from .local_ba import LocalSolution

log = logging.getLogger(__name__)


class EmptyMeasurements(ValueError):
    """Rotation average of an empty measurement list."""


class DisconnectedBlock(RuntimeError):
    """A block shares no camera with any earlier block; the consecutive
    reference-frame overlap should make this impossible."""


@dataclass(frozen=True)
class SharedCameraSet:
    """Cameras common to a block pair with both blocks' relative poses."""

    block_a: int
    block_b: int
    camera_ids: tuple[int, ...]
    poses_a: tuple[Pose, ...]
    poses_b: tuple[Pose, ...]


def collect_shared(solutions: dict[int, LocalSolution]) -> list[SharedCameraSet]:
    """One set per unordered block pair with a nonempty camera overlap."""
    out = []
    ids = sorted(solutions)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            cams = sorted(set(solutions[a].relative_poses)
                          & set(solutions[b].relative_poses))
            if cams:
                out.append(SharedCameraSet(
                    a, b, tuple(cams),
                    tuple(solutions[a].relative_poses[c] for c in cams),
                    tuple(solutions[b].relative_poses[c] for c in cams)))
    return out


def rotation_measurements(shared: SharedCameraSet) -> list[Rotation3]:
    """Per-shared-camera estimates of the a-to-b block rotation."""
    return [pb.rotation.inverse().compose(pa.rotation)
            for pa, pb in zip(shared.poses_a, shared.poses_b)]


def chordal_mean(rotations) -> Rotation3:
    """Projected arithmetic mean; closed-form initialization for the
    intrinsic mean."""
    m = np.zeros((3, 3))
    for r in rotations:
        m += r.matrix
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return Rotation3.from_matrix(u @ np.diag([1.0, 1.0, d]) @ vt)


def single_rotation_average(measurements, tol: float = 1e-10,
                            max_iterations: int = 100) -> Rotation3:
    """Geodesic L2 mean of rotations by intrinsic-mean iteration.

    Starts at the chordal mean and repeats
    R <- R exp(mean_i log(R^T M_i)) until the update norm drops below
    ``tol``; returns the best iterate (with a warning) if the iteration
    cap is hit.
    """
    measurements = list(measurements)
    if not measurements:
        raise EmptyMeasurements("no rotations to average")
    if len(measurements) == 1:
        return measurements[0]
    mean = chordal_mean(measurements)
    for _ in range(max_iterations):
        acc = np.zeros(3)
        for m in measurements:
            acc += log_map(mean.inverse().compose(m))
        acc /= len(measurements)
        step = float(np.linalg.norm(acc))
        mean = mean.compose(exp_map(acc))
        if step < tol:
            return mean
    log.warning("rotation averaging did not converge in %d iterations "
                "(last update %.3e)", max_iterations, step)
    return mean


def averaging_objective(mean: Rotation3, measurements) -> float:
    """Sum of squared geodesic distances to the measurements."""
    return sum(geodesic_distance(mean, m) ** 2 for m in measurements)


def align_pair(shared: SharedCameraSet) -> Rotation3:
    """Single rotation average of the per-camera block-pair estimates."""
    return single_rotation_average(rotation_measurements(shared))


class BlockRotationGraph:
    """Solved pair rotations plus per-block pseudo absolute rotations.

    The anchor block (the first inserted) is pinned to the identity,
    and consistency R_ab ~ R_b R_a^T is restored after every update by
    coordinate sweeps of the single rotation average.
    """

    def __init__(self):
        self.absolute: dict[int, Rotation3] = {}
        self.edges: dict[tuple[int, int], Rotation3] = {}
        self.anchor: int | None = None

    def neighbors(self, block_id: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == block_id:
                out.append(b)
            elif b == block_id:
                out.append(a)
        return sorted(out)

    def pair_rotation(self, a: int, b: int) -> Rotation3:
        """Consistent a-to-b rotation from the pseudo absolutes."""
        return self.absolute[b].compose(self.absolute[a].inverse())

    def consistency_error(self) -> float:
        """Sum over edges of squared angle between the solved pair
        rotation and the one implied by the pseudo absolutes."""
        total = 0.0
        for (a, b), r in self.edges.items():
            total += geodesic_distance(r, self.pair_rotation(a, b)) ** 2
        return total


def global_update(graph: BlockRotationGraph, new_block_id: int,
                  incident_shared: list[SharedCameraSet],
                  tol: float = 1e-8, max_sweeps: int = 20,
                  full_resolve: bool = False,
                  all_shared: list[SharedCameraSet] | None = None) -> int:
    """Fold a newly solved block into the graph.

    Edges incident to the new block are (re)solved by pair averaging,
    the new block's pseudo absolute rotation is seeded from a chain
    neighbor and all pseudo absolutes are then refreshed by block
    coordinate sweeps, each step being a single rotation average of the
    neighbor predictions.  Returns the number of sweeps run.
    """
    if graph.anchor is None:
        graph.anchor = new_block_id
        graph.absolute[new_block_id] = Rotation3.identity()
        return 0

    if full_resolve and all_shared is not None:
        to_solve = all_shared
    else:
        to_solve = incident_shared
    for shared in to_solve:
        key = (shared.block_a, shared.block_b)
        graph.edges[key] = align_pair(shared)

    incident = [s for s in incident_shared
                if new_block_id in (s.block_a, s.block_b)]
    if not incident:
        raise DisconnectedBlock(
            f"block {new_block_id} shares no cameras with earlier blocks")

    # seed from the highest-id earlier neighbor (the chain predecessor)
    seed = max(s.block_a if s.block_b == new_block_id else s.block_b
               for s in incident)
    edge = (min(seed, new_block_id), max(seed, new_block_id))
    r = graph.edges[edge]
    if edge[0] == seed:
        graph.absolute[new_block_id] = r.compose(graph.absolute[seed])
    else:
        graph.absolute[new_block_id] = r.inverse().compose(graph.absolute[seed])

    # block-coordinate sweeps over the whole graph
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        if sweep_once(graph) < tol:
            break
    return sweeps


def sweep_once(graph: BlockRotationGraph) -> float:
    """One block-coordinate sweep: every non-anchor pseudo absolute is
    replaced by the single rotation average of its neighbor predictions.
    Returns the largest per-block update angle."""
    max_update = 0.0
    for blk in sorted(graph.absolute):
        if blk == graph.anchor:
            continue
        preds = []
        for (a, b), r in graph.edges.items():
            if a == blk and b in graph.absolute:
                preds.append(r.inverse().compose(graph.absolute[b]))
            elif b == blk and a in graph.absolute:
                preds.append(r.compose(graph.absolute[a]))
        if not preds:
            raise DisconnectedBlock(f"block {blk} has no solved edges")
        new_rot = single_rotation_average(preds)
        max_update = max(max_update,
                         geodesic_distance(new_rot, graph.absolute[blk]))
        graph.absolute[blk] = new_rot
    return max_update


def compose_trajectory(solutions: dict[int, LocalSolution],
                       graph: BlockRotationGraph,
                       average_shared: bool = False,
                       return_landmarks: bool = False):
    """Stitch per-block relative solutions into one absolute trajectory.

    Rotations come from the pseudo absolutes; translations and the
    per-block monocular scale are fixed by chaining similarity fits
    (rotation held fixed) over camera centers shared with earlier
    blocks.  A frame appearing in several blocks takes its pose from
    the lowest block id unless ``average_shared`` is set.  With
    ``return_landmarks`` the per-block landmark solutions are mapped
    through the same block similarities (lowest block id wins) and the
    pair (trajectory, landmark positions) is returned.
    """
    ids = sorted(solutions)
    scale: dict[int, float] = {}
    offset: dict[int, np.ndarray] = {}

    def block_center_map(bid: int, center: np.ndarray) -> np.ndarray:
        rt = graph.absolute[bid].inverse()
        return scale[bid] * rt.apply(center) + offset[bid]

    for idx, bid in enumerate(ids):
        sol = solutions[bid]
        if idx == 0:
            scale[bid] = 1.0
            offset[bid] = np.zeros(3)
            continue
        rt = graph.absolute[bid].inverse()
        rotated, targets = [], []
        for prev in ids[:idx]:
            prev_sol = solutions[prev]
            common = set(sol.relative_poses) & set(prev_sol.relative_poses)
            for cam in sorted(common):
                rotated.append(rt.apply(sol.relative_poses[cam].center()))
                targets.append(block_center_map(
                    prev, prev_sol.relative_poses[cam].center()))
        if not rotated:
            raise DisconnectedBlock(
                f"block {bid} shares no cameras with earlier blocks")
        a = np.array(rotated)
        g = np.array(targets)
        am = a.mean(axis=0)
        gm = g.mean(axis=0)
        denom = float(np.sum((a - am) * (a - am)))
        if denom > 1e-12:
            s = float(np.sum((a - am) * (g - gm))) / denom
        else:
            s = scale[ids[idx - 1]]  # single shared center: inherit the scale
        scale[bid] = s
        offset[bid] = gm - s * am

    trajectory: dict[int, Pose] = {}
    owners: dict[int, list[int]] = {}
    for bid in ids:
        for cam in solutions[bid].relative_poses:
            owners.setdefault(cam, []).append(bid)

    for cam, blocks in owners.items():
        blocks.sort()
        if average_shared and len(blocks) > 1:
            rots = [solutions[b].relative_poses[cam].rotation
                    .compose(graph.absolute[b]) for b in blocks]
            rot = single_rotation_average(rots)
            centers = [block_center_map(
                b, solutions[b].relative_poses[cam].center()) for b in blocks]
            center = np.mean(centers, axis=0)
        else:
            b = blocks[0]
            rel = solutions[b].relative_poses[cam]
            rot = rel.rotation.compose(graph.absolute[b])
            center = block_center_map(b, rel.center())
        trajectory[cam] = Pose(rot, -rot.apply(center))

    if not return_landmarks:
        return trajectory
    landmarks: dict[int, np.ndarray] = {}
    for bid in ids:  # ascending, so the lowest block id wins
        for lm, p_blk in solutions[bid].landmark_positions.items():
            if lm not in landmarks:
                landmarks[lm] = block_center_map(bid, p_blk)
    return trajectory, landmarks
