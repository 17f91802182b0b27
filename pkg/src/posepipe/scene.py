"""World model: frames, landmarks, observations, plus synthetic scenes.

Observations are stored per frame (row access of the visibility
structure); a per-landmark inverted index is built lazily for column
access.  A SceneProblem is immutable after construction and safe for
concurrent readers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (Intrinsics, Pose, Rotation3, project_many)


class DegenerateConfig(ValueError):
    """Synthetic configuration cannot produce a valid scene."""


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray


@dataclass(frozen=True)
class Frame:
    """One image frame: id in capture order plus its observations.

    ``landmark_ids`` and ``pixels`` are parallel arrays; at most one
    observation per landmark per frame.
    """

    id: int
    landmark_ids: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.landmark_ids, dtype=np.int64)
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if ids.shape[0] != px.shape[0]:
            raise ValueError("landmark_ids and pixels must have equal length")
        if ids.size != np.unique(ids).size:
            raise ValueError(f"frame {self.id}: duplicate landmark observation")
        ids.flags.writeable = False
        px.flags.writeable = False
        object.__setattr__(self, "landmark_ids", ids)
        object.__setattr__(self, "pixels", px)

    @property
    def n_observations(self) -> int:
        return int(self.landmark_ids.size)

    def landmark_id_set(self) -> frozenset:
        return frozenset(int(i) for i in self.landmark_ids)


def covisible_count(frame_a: Frame, frame_b: Frame) -> int:
    """Number of landmarks observed in both frames."""
    return int(np.intersect1d(frame_a.landmark_ids, frame_b.landmark_ids,
                              assume_unique=True).size)


@dataclass(frozen=True)
class GroundTruth:
    poses: tuple[Pose, ...]
    landmark_positions: np.ndarray


@dataclass(frozen=True)
class SceneProblem:
    """Frames, initial estimates and (optionally) the generating truth.

    ``landmark_positions`` row j is the initial estimate of landmark j;
    ids are dense in [0, n).  ``initial_poses`` are the a-priori camera
    estimates that stand in for an upstream tracker.
    """

    intrinsics: Intrinsics
    frames: tuple[Frame, ...]
    landmark_positions: np.ndarray
    initial_poses: tuple[Pose, ...]
    ground_truth: GroundTruth | None = None
    _inverted: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.landmark_positions, dtype=float).reshape(-1, 3)
        pos.flags.writeable = False
        object.__setattr__(self, "landmark_positions", pos)
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "initial_poses", tuple(self.initial_poses))
        if len(self.frames) < 2:
            raise ValueError("a scene needs at least 2 frames")
        if len(self.initial_poses) != len(self.frames):
            raise ValueError("one initial pose per frame required")
        n = pos.shape[0]
        for fr in self.frames:
            if fr.landmark_ids.size and (fr.landmark_ids.min() < 0
                                         or fr.landmark_ids.max() >= n):
                raise ValueError(f"frame {fr.id} references unknown landmark")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_landmarks(self) -> int:
        return int(self.landmark_positions.shape[0])

    @property
    def landmarks(self) -> list[Landmark]:
        return [Landmark(j, self.landmark_positions[j])
                for j in range(self.n_landmarks)]

    def frame_by_id(self, frame_id: int) -> Frame:
        idx = self._inverted.setdefault(
            "_by_id", {fr.id: fr for fr in self.frames})
        return idx[frame_id]

    def frames_seeing(self, landmark_id: int) -> tuple[int, ...]:
        """Frame ids observing a landmark (lazy inverted index)."""
        if "_cols" not in self._inverted:
            cols: dict[int, list[int]] = {}
            for fr in self.frames:
                for j in fr.landmark_ids:
                    cols.setdefault(int(j), []).append(fr.id)
            self._inverted["_cols"] = {k: tuple(v) for k, v in cols.items()}
        return self._inverted["_cols"].get(landmark_id, ())

    def reprojection_cost(self, poses: dict[int, Pose],
                          landmark_positions: np.ndarray | None = None,
                          frame_ids=None) -> float:
        """Sum of squared reprojection errors over the given frames.

        Observations with non-positive depth are skipped.
        """
        pts = (self.landmark_positions if landmark_positions is None
               else landmark_positions)
        total = 0.0
        ids = frame_ids if frame_ids is not None else [f.id for f in self.frames]
        for fid in ids:
            fr = self.frame_by_id(fid)
            if fr.n_observations == 0 or fid not in poses:
                continue
            pose = poses[fid]
            rm = np.broadcast_to(pose.rotation.matrix,
                                 (fr.n_observations, 3, 3))
            ts = np.broadcast_to(pose.translation, (fr.n_observations, 3))
            uv, z = project_many(self.intrinsics, rm, ts,
                                 pts[fr.landmark_ids])
            good = np.isfinite(uv[:, 0])
            diff = uv[good] - fr.pixels[good]
            total += float(np.sum(diff * diff))
        return total


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs; a fixed seed makes the scene fully deterministic."""

    shape: str = "loop"              # loop | arc | line
    n_frames: int = 100
    n_landmarks: int = 800
    pixel_noise: float = 0.0
    visibility_radius: float = 8.0
    seed: int = 0
    trajectory_radius: float = 10.0
    min_depth: float = 1.5   # closer points are not tracked (keeps the
    # initial-estimate perturbation well away from the camera plane)
    landmark_init_noise_frac: float = 0.01
    image_width: float = 640.0       # sensor bounds around the principal point
    image_height: float = 640.0
    intrinsics: Intrinsics = field(
        default_factory=lambda: Intrinsics(500.0, 500.0, 320.0, 320.0))


def _look_at_rotation(forward: np.ndarray, up=np.array([0.0, 0.0, 1.0])):
    """World-to-camera rotation with the camera +z along ``forward``."""
    z = forward / np.linalg.norm(forward)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # forward parallel to up: pick an arbitrary lateral axis
        x = np.array([1.0, 0.0, 0.0])
        nx = 1.0
    x = x / nx
    y = np.cross(z, x)
    return Rotation3.from_matrix(np.vstack([x, y, z]))


def _trajectory(config: SynthConfig) -> list[Pose]:
    m = config.n_frames
    r = config.trajectory_radius
    poses = []
    if config.shape in ("loop", "arc"):
        span = 2.0 * math.pi if config.shape == "loop" else 2.0 * math.pi / 3.0
        for i in range(m):
            th = span * i / m
            center = np.array([r * math.cos(th), r * math.sin(th), 0.0])
            forward = np.array([-math.sin(th), math.cos(th), 0.0])
            rot = _look_at_rotation(forward)
            poses.append(Pose(rot, -rot.apply(center)))
    elif config.shape == "line":
        step = config.visibility_radius / 12.0
        for i in range(m):
            center = np.array([i * step, 0.0, 0.0])
            rot = _look_at_rotation(np.array([1.0, 0.0, 0.0]))
            poses.append(Pose(rot, -rot.apply(center)))
    else:
        raise DegenerateConfig(f"unknown trajectory shape {config.shape!r}")
    return poses


def _sample_landmark(rng, poses, config: SynthConfig) -> np.ndarray:
    """Draw a point inside a random frame's view frustum, so it is seen
    by at least that frame; neighbors usually see it too."""
    k = config.intrinsics
    anchor = poses[int(rng.integers(len(poses)))]
    lo = max(config.min_depth * 2.0, 0.2 * config.visibility_radius)
    hi = 0.9 * config.visibility_radius
    if lo >= hi:
        raise DegenerateConfig(
            f"visibility radius {config.visibility_radius} leaves no depth "
            f"range beyond the minimum depth {config.min_depth}")
    depth = rng.uniform(lo, hi)
    u = rng.uniform(k.cx - 0.45 * config.image_width,
                    k.cx + 0.45 * config.image_width)
    v = rng.uniform(k.cy - 0.45 * config.image_height,
                    k.cy + 0.45 * config.image_height)
    p_cam = np.array([(u - k.cx) / k.fx * depth,
                      (v - k.cy) / k.fy * depth,
                      depth])
    return anchor.inverse().transform(p_cam)


def _visible_frames(point, rstack, tstack, centers, config: SynthConfig) -> list[int]:
    k = config.intrinsics
    near = np.linalg.norm(point - centers, axis=1) <= config.visibility_radius
    if not near.any():
        return []
    pc = rstack[near] @ point + tstack[near]
    z = pc[:, 2]
    ok = z >= config.min_depth
    zs = np.where(ok, z, 1.0)
    u = k.fx * pc[:, 0] / zs + k.cx
    v = k.fy * pc[:, 1] / zs + k.cy
    hw, hh = config.image_width / 2.0, config.image_height / 2.0
    ok &= (np.abs(u - k.cx) <= hw) & (np.abs(v - k.cy) <= hh)
    return list(np.nonzero(near)[0][ok])


def generate_synthetic(config: SynthConfig) -> SceneProblem:
    """Deterministic synthetic scene with every landmark in >= 2 frames.

    World coordinates are the first camera's frame, so ground-truth
    pose 0 is the identity; observations are exact projections of the
    truth plus Gaussian pixel noise; initial landmark estimates are the
    truth perturbed by a fraction of the scene diameter; initial poses
    follow a constant-position motion model (all at the first pose).
    """
    if config.n_frames < 2 or config.n_landmarks < 4:
        raise DegenerateConfig("need at least 2 frames and 4 landmarks")
    rng = np.random.default_rng(config.seed)
    poses = _trajectory(config)
    rstack = np.stack([p.rotation.matrix for p in poses])
    tstack = np.stack([p.translation for p in poses])
    centers = np.stack([p.center() for p in poses])

    points = np.zeros((config.n_landmarks, 3))
    seen_by: list[list[int]] = []
    failures = 0
    j = 0
    while j < config.n_landmarks:
        p = _sample_landmark(rng, poses, config)
        vis = _visible_frames(p, rstack, tstack, centers, config)
        if len(vis) >= 2:
            points[j] = p
            seen_by.append(vis)
            j += 1
        else:
            failures += 1
            if failures > 100:
                raise DegenerateConfig(
                    "visibility radius leaves landmarks with < 2 views "
                    "(100 regeneration attempts exhausted)")

    # re-express everything in camera 0's frame so truth pose 0 = identity
    anchor = poses[0]
    poses = [p.compose(anchor.inverse()) for p in poses]
    points = np.array([anchor.transform(p) for p in points])

    obs_ids: list[list[int]] = [[] for _ in range(config.n_frames)]
    obs_px: list[list[np.ndarray]] = [[] for _ in range(config.n_frames)]
    k = config.intrinsics
    for lm, vis in enumerate(seen_by):
        for i in vis:
            pc = poses[i].transform(points[lm])
            uv = np.array([k.fx * pc[0] / pc[2] + k.cx,
                           k.fy * pc[1] / pc[2] + k.cy])
            obs_ids[i].append(lm)
            obs_px[i].append(uv)

    frames = []
    for i in range(config.n_frames):
        ids = np.array(obs_ids[i], dtype=np.int64)
        px = (np.array(obs_px[i]).reshape(-1, 2) if obs_ids[i]
              else np.zeros((0, 2)))
        if config.pixel_noise > 0 and px.size:
            px = px + rng.normal(0.0, config.pixel_noise, size=px.shape)
        frames.append(Frame(i, ids, px))

    diameter = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    init_points = points + rng.normal(
        0.0, config.landmark_init_noise_frac * diameter, size=points.shape)
    init_poses = tuple(Pose.identity() for _ in range(config.n_frames))

    return SceneProblem(
        intrinsics=config.intrinsics,
        frames=tuple(frames),
        landmark_positions=init_points,
        initial_poses=init_poses,
        ground_truth=GroundTruth(tuple(poses), points),
    )


def scene_with_landmarks(scene: SceneProblem,
                         positions: np.ndarray) -> SceneProblem:
    """Copy of the scene with replaced landmark estimates."""
    return replace(scene, landmark_positions=positions,
                   _inverted=dict(scene._inverted))
