"""Online co-visibility partitioning of a streamed frame sequence.

Frames accumulate in an open block until the local co-visibility score
(average number of in-block frames observing each block landmark)
reaches its threshold or the block hits the temporal size cap; sealing
then augments the block with previous cameras whose view overlap ratio
clears the global threshold, and the next block opens with the sealed
block's last temporal frame so consecutive blocks always share it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .scene import Frame


class EmptyBlock(ValueError):
    """Co-visibility score requested for a block without landmarks."""


class OutOfOrderFrame(ValueError):
    """Ingested frame id does not exceed all previously ingested ids."""


@dataclass(frozen=True)
class PartitionConfig:
    """Thresholds guiding block construction.

    Larger gamma_thr / n_alpha / n_thr and a smaller beta_thr trade
    runtime for accuracy.
    """

    gamma_thr: float = 10.0
    beta_thr: float = 0.15
    n_alpha: int = 10
    n_thr: int = 50

    def __post_init__(self):
        if self.gamma_thr < 3:
            raise ValueError("gamma_thr must be at least 3")
        if not 0.0 <= self.beta_thr < 1.0:
            raise ValueError("beta_thr must lie in [0, 1)")
        if self.n_alpha < 0 or self.n_thr < 2:
            raise ValueError("n_alpha must be >= 0 and n_thr >= 2")


@dataclass(frozen=True)
class Block:
    """Sealed unit of local optimization.

    ``camera_ids`` lists temporal members first (the reference frame is
    the first one) followed by the added-in cameras; ``landmark_ids``
    is the union of all members' visible sets.
    """

    id: int
    camera_ids: tuple[int, ...]
    n_temporal: int
    landmark_ids: frozenset
    added_in_ids: tuple[int, ...]
    reference_frame_id: int
    gamma_at_seal: float

    @property
    def temporal_ids(self) -> tuple[int, ...]:
        return self.camera_ids[:self.n_temporal]

    @property
    def size(self) -> int:
        return len(self.camera_ids)


def local_covisibility_score(frames: list[Frame]) -> float:
    """Average number of the given frames observing each landmark seen
    by any of them; >= 1 whenever any landmark is seen."""
    total_obs = 0
    union: set[int] = set()
    for fr in frames:
        total_obs += fr.n_observations
        union.update(int(i) for i in fr.landmark_ids)
    if not union:
        raise EmptyBlock("no landmarks observed by the block")
    return total_obs / len(union)


def global_covisibility_score(frame: Frame, block_landmarks) -> float:
    """Fraction of the block's landmarks visible in the candidate frame."""
    if not block_landmarks:
        raise EmptyBlock("block landmark set is empty")
    seen = sum(1 for i in frame.landmark_ids if int(i) in block_landmarks)
    return seen / len(block_landmarks)


def select_added_cameras(block_landmarks, candidates: list[Frame],
                         config: PartitionConfig) -> list[int]:
    """Up to n_alpha candidate frames with the highest overlap ratio
    above beta_thr; ties broken toward the lower frame id."""
    scored = []
    for fr in candidates:
        beta = global_covisibility_score(fr, block_landmarks)
        if beta > config.beta_thr:
            scored.append((-beta, fr.id))
    scored.sort()
    return [fid for _, fid in scored[:config.n_alpha]]


class OnlinePartitioner:
    """Single-owner streaming state; emitted blocks are immutable."""

    def __init__(self, config: PartitionConfig):
        self.config = config
        self._open: list[Frame] = []
        self._open_landmarks: set[int] = set()
        self._open_obs = 0
        self._history: list[Frame] = []   # every ingested frame, in order
        self._last_id: float = -math.inf
        self._next_block_id = 1
        self.blocks: list[Block] = []

    def ingest_frame(self, frame: Frame) -> Block | None:
        """Append a frame to the open block; returns the block if this
        frame sealed it, else None (still accumulating)."""
        if frame.id <= self._last_id:
            raise OutOfOrderFrame(
                f"frame {frame.id} does not exceed last id {self._last_id}")
        self._last_id = frame.id
        self._history.append(frame)
        self._append_open(frame)

        n_temporal = len(self._open)
        if n_temporal < 2:
            return None
        if n_temporal >= self.config.n_thr:
            return self._seal()
        if self._open_landmarks:
            gamma = self._open_obs / len(self._open_landmarks)
            if gamma >= self.config.gamma_thr:
                return self._seal()
        return None

    def flush(self) -> Block | None:
        """Seal whatever is left at end of stream.  A trailing open
        block holding only the shared boundary frame is dropped (it is
        already a member of the previous block)."""
        if len(self._open) >= 2 or (len(self._open) == 1 and not self.blocks):
            if not self._open_landmarks:
                # nothing observed: no constraints, nothing to optimize
                self._open = []
                return None
            return self._seal()
        self._open = []
        return None

    def _append_open(self, frame: Frame) -> None:
        self._open.append(frame)
        self._open_obs += frame.n_observations
        self._open_landmarks.update(int(i) for i in frame.landmark_ids)

    def _seal(self) -> Block:
        temporal = self._open
        ref = temporal[0]
        gamma = (self._open_obs / len(self._open_landmarks)
                 if self._open_landmarks else 1.0)
        candidates = [fr for fr in self._history if fr.id < ref.id]
        added = select_added_cameras(self._open_landmarks, candidates,
                                     self.config)
        landmarks = set(self._open_landmarks)
        by_id = {fr.id: fr for fr in self._history}
        for fid in added:
            landmarks.update(int(i) for i in by_id[fid].landmark_ids)

        block = Block(
            id=self._next_block_id,
            camera_ids=tuple(fr.id for fr in temporal) + tuple(added),
            n_temporal=len(temporal),
            landmark_ids=frozenset(landmarks),
            added_in_ids=tuple(added),
            reference_frame_id=ref.id,
            gamma_at_seal=gamma,
        )
        self.blocks.append(block)
        self._next_block_id += 1

        boundary = temporal[-1]
        self._open = []
        self._open_landmarks = set()
        self._open_obs = 0
        self._append_open(boundary)
        return block


def partition_all(frames, config: PartitionConfig) -> list[Block]:
    """Run the streaming partitioner over a whole sequence."""
    p = OnlinePartitioner(config)
    blocks = []
    for fr in frames:
        b = p.ingest_frame(fr)
        if b is not None:
            blocks.append(b)
    tail = p.flush()
    if tail is not None:
        blocks.append(tail)
    return blocks
