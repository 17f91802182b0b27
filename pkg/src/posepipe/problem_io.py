"""Problem-file ingestion and export.

Two text formats are supported:

* ``bal`` -- header ``m n k``, then k observation rows
  ``cam_idx pt_idx u v``, then 9 whitespace-separated camera parameters
  per camera (Rodrigues rotation, translation, focal, two distortion
  coefficients) and 3 per point.  The camera model is reduced to a pure
  pinhole: distortion fields are read and ignored with a warning.
* ``tracks-csv`` -- rows ``frame_id,landmark_id,u,v`` (header row
  optional) plus a sidecar intrinsics file holding ``fx fy cx cy`` on
  one line.  The format carries no pose or structure estimates; loaded
  problems start from identity poses and zero landmark positions.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from .geom import Intrinsics, Pose, Rotation3, exp_map, log_map
from .scene import Frame, SceneProblem

log = logging.getLogger(__name__)

FORMATS = ("bal", "tracks-csv")


class ParseError(ValueError):
    """Malformed problem file; the message names the offending line."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class IndexOutOfRange(ParseError):
    """Observation references a camera or point outside the header counts."""


class _Tokens:
    """Whitespace token stream that remembers line numbers for errors."""

    def __init__(self, path):
        self.path = path
        self._items: list[tuple[int, str]] = []
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                for tok in line.split():
                    self._items.append((ln, tok))
        self._pos = 0
        self.line_no = 0

    def next_float(self) -> float:
        ln, tok = self._next()
        try:
            return float(tok)
        except ValueError:
            raise ParseError(self.path, ln, f"expected a number, got {tok!r}")

    def next_int(self) -> int:
        ln, tok = self._next()
        try:
            return int(tok)
        except ValueError:
            raise ParseError(self.path, ln, f"expected an integer, got {tok!r}")

    def _next(self):
        if self._pos >= len(self._items):
            raise ParseError(self.path, self.line_no, "unexpected end of file")
        item = self._items[self._pos]
        self._pos += 1
        self.line_no = item[0]
        return item


def load_problem(path, format: str) -> SceneProblem:
    """Parse a problem file into a SceneProblem."""
    path = Path(path)
    if format == "bal":
        return _load_bal(path)
    if format == "tracks-csv":
        return _load_tracks_csv(path)
    raise ValueError(f"unknown problem format {format!r}; expected {FORMATS}")


def save_problem(scene: SceneProblem, path, format: str) -> None:
    path = Path(path)
    if format == "bal":
        _save_bal(scene, path)
    elif format == "tracks-csv":
        _save_tracks_csv(scene, path)
    else:
        raise ValueError(f"unknown problem format {format!r}; expected {FORMATS}")


def _load_bal(path: Path) -> SceneProblem:
    toks = _Tokens(path)
    m = toks.next_int()
    n = toks.next_int()
    k = toks.next_int()
    if m < 2:
        raise ParseError(path, toks.line_no, f"need at least 2 cameras, got {m}")

    obs = []
    for _ in range(k):
        cam = toks.next_int()
        pt = toks.next_int()
        u = toks.next_float()
        v = toks.next_float()
        if not 0 <= cam < m:
            raise IndexOutOfRange(path, toks.line_no,
                                  f"camera index {cam} outside [0, {m})")
        if not 0 <= pt < n:
            raise IndexOutOfRange(path, toks.line_no,
                                  f"point index {pt} outside [0, {n})")
        obs.append((cam, pt, u, v))

    poses = []
    focal = None
    distortion_seen = False
    for _ in range(m):
        w = np.array([toks.next_float() for _ in range(3)])
        t = np.array([toks.next_float() for _ in range(3)])
        f = toks.next_float()
        k1 = toks.next_float()
        k2 = toks.next_float()
        if k1 != 0.0 or k2 != 0.0:
            distortion_seen = True
        if focal is None:
            focal = f
        poses.append(Pose(exp_map(w), t))
    if distortion_seen:
        log.warning("%s: distortion coefficients present; ignored "
                    "(camera model reduced to pinhole)", path)

    points = np.array([[toks.next_float() for _ in range(3)]
                       for _ in range(n)]).reshape(n, 3)

    by_frame: dict[int, list[tuple[int, float, float]]] = {i: [] for i in range(m)}
    for cam, pt, u, v in obs:
        by_frame[cam].append((pt, u, v))
    frames = []
    for i in range(m):
        rows = by_frame[i]
        ids = np.array([r[0] for r in rows], dtype=np.int64)
        px = np.array([[r[1], r[2]] for r in rows]).reshape(-1, 2)
        frames.append(Frame(i, ids, px))

    intr = Intrinsics(focal, focal, 0.0, 0.0)
    return SceneProblem(intr, tuple(frames), points, tuple(poses))


def _save_bal(scene: SceneProblem, path: Path) -> None:
    if abs(scene.intrinsics.fx - scene.intrinsics.fy) > 1e-12 or \
            scene.intrinsics.cx != 0.0 or scene.intrinsics.cy != 0.0:
        log.warning("bal format stores a single centered focal length; "
                    "fx is kept, fy/cx/cy are dropped")
    k = sum(fr.n_observations for fr in scene.frames)
    with open(path, "w") as fh:
        fh.write(f"{scene.n_frames} {scene.n_landmarks} {k}\n")
        for fr in scene.frames:
            for lm, (u, v) in zip(fr.landmark_ids, fr.pixels):
                fh.write(f"{fr.id} {lm} {u:.17g} {v:.17g}\n")
        for pose in scene.initial_poses:
            w = log_map(pose.rotation)
            t = pose.translation
            fh.write(f"{w[0]:.17g} {w[1]:.17g} {w[2]:.17g} "
                     f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
                     f"{scene.intrinsics.fx:.17g} 0 0\n")
        for p in scene.landmark_positions:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".intrinsics")


def _load_tracks_csv(path: Path) -> SceneProblem:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise ParseError(sidecar, 0, "intrinsics sidecar missing")
    parts = sidecar.read_text().split()
    if len(parts) != 4:
        raise ParseError(sidecar, 1, "expected 'fx fy cx cy' on one line")
    intr = Intrinsics(*(float(p) for p in parts))

    rows: dict[int, list[tuple[int, float, float]]] = {}
    max_lm = -1
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if ln == 1 and not cells[0].lstrip("-").isdigit():
                continue  # optional header row
            if len(cells) != 4:
                raise ParseError(path, ln, f"expected 4 fields, got {len(cells)}")
            try:
                fid, lm = int(cells[0]), int(cells[1])
                u, v = float(cells[2]), float(cells[3])
            except ValueError:
                raise ParseError(path, ln, f"malformed row {line!r}")
            if fid < 0 or lm < 0:
                raise IndexOutOfRange(path, ln, "negative frame or landmark id")
            rows.setdefault(fid, []).append((lm, u, v))
            max_lm = max(max_lm, lm)

    if len(rows) < 2:
        raise ParseError(path, 0, "need observations from at least 2 frames")
    frames = []
    for fid in sorted(rows):
        rs = rows[fid]
        ids = np.array([r[0] for r in rs], dtype=np.int64)
        px = np.array([[r[1], r[2]] for r in rs]).reshape(-1, 2)
        frames.append(Frame(fid, ids, px))
    n = max_lm + 1
    return SceneProblem(intr, tuple(frames), np.zeros((n, 3)),
                        tuple(Pose.identity() for _ in frames))


def _save_tracks_csv(scene: SceneProblem, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("frame_id,landmark_id,u,v\n")
        for fr in scene.frames:
            for lm, (u, v) in zip(fr.landmark_ids, fr.pixels):
                fh.write(f"{fr.id},{lm},{u:.17g},{v:.17g}\n")
    k = scene.intrinsics
    _sidecar_path(path).write_text(f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g}\n")
