"""Online partitioning: scores, sealing rules, added-in selection."""

import numpy as np
import pytest

from posepipe.partition import (EmptyBlock, OnlinePartitioner,
                                OutOfOrderFrame, PartitionConfig,
                                global_covisibility_score,
                                local_covisibility_score, partition_all,
                                select_added_cameras)
from posepipe.scene import Frame, SynthConfig, generate_synthetic


def frame(fid, ids):
    ids = np.asarray(sorted(ids), dtype=np.int64)
    return Frame(fid, ids, np.zeros((ids.size, 2)))


# ---------------------------------------------------------------------------
# scores


def test_local_score_uniform_visibility():
    frames = [frame(0, [0, 1, 2]), frame(1, [0, 1, 2])]
    assert local_covisibility_score(frames) == 2.0


def test_local_score_single_camera():
    assert local_covisibility_score([frame(0, range(5))]) == 1.0


def test_local_score_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        frames = [frame(i, rng.choice(50, size=rng.integers(1, 20),
                                      replace=False))
                  for i in range(rng.integers(1, 8))]
        union = sorted({int(j) for f in frames for j in f.landmark_ids})
        total = 0
        for j in union:  # brute-force count of frames seeing each landmark
            for f in frames:
                if j in f.landmark_ids:
                    total += 1
        oracle = total / len(union)
        assert abs(local_covisibility_score(frames) - oracle) < 1e-12


def test_local_score_empty_block():
    with pytest.raises(EmptyBlock):
        local_covisibility_score([frame(0, [])])


def test_global_score_extremes():
    block_landmarks = set(range(10))
    assert global_covisibility_score(frame(5, range(10)), block_landmarks) == 1.0
    assert global_covisibility_score(frame(5, range(20, 25)), block_landmarks) == 0.0
    with pytest.raises(EmptyBlock):
        global_covisibility_score(frame(5, [1]), set())


def test_global_score_matches_set_oracle():
    rng = np.random.default_rng(1)
    for _ in range(40):
        block = set(rng.choice(100, size=rng.integers(1, 50), replace=False).tolist())
        f = frame(9, rng.choice(100, size=rng.integers(1, 50), replace=False))
        oracle = len(block & set(int(i) for i in f.landmark_ids)) / len(block)
        assert abs(global_covisibility_score(f, block) - oracle) < 1e-15


# ---------------------------------------------------------------------------
# added-in selection


def test_select_added_no_candidate_above_threshold():
    cfg = PartitionConfig(n_alpha=5, beta_thr=0.5)
    block = set(range(10))
    cands = [frame(i, [i]) for i in range(3)]  # beta = 0.1 each... below
    assert select_added_cameras(block, cands, cfg) == []


def test_select_added_top_k_by_beta():
    cfg = PartitionConfig(n_alpha=2, beta_thr=0.15)
    block = set(range(10))
    cands = [frame(0, range(3)),      # beta 0.3
             frame(1, range(5)),      # beta 0.5
             frame(2, range(4))]      # beta 0.4
    assert select_added_cameras(block, cands, cfg) == [1, 2]


def test_select_added_matches_sort_oracle_with_tie_break():
    rng = np.random.default_rng(2)
    cfg = PartitionConfig(n_alpha=4, beta_thr=0.15)
    for _ in range(30):
        block = set(range(20))
        cands = [frame(i, rng.choice(20, size=rng.integers(1, 20),
                                     replace=False)) for i in range(12)]
        got = select_added_cameras(block, cands, cfg)
        scored = [(-(len(set(int(j) for j in f.landmark_ids) & block) / 20), f.id)
                  for f in cands
                  if len(set(int(j) for j in f.landmark_ids) & block) / 20 > 0.15]
        oracle = [fid for _, fid in sorted(scored)[:4]]
        assert got == oracle


# ---------------------------------------------------------------------------
# streaming behavior


def test_disjoint_landmarks_seal_at_size_cap():
    # feature-less fast motion: gamma stays 1, fixed-size partitioning
    cfg = PartitionConfig(gamma_thr=10, n_thr=6, n_alpha=10)
    p = OnlinePartitioner(cfg)
    sealed = []
    for i in range(30):
        b = p.ingest_frame(frame(i, [10 * i, 10 * i + 1]))
        if b:
            sealed.append(b)
    for b in sealed:
        assert b.n_temporal == 6
        assert b.added_in_ids == ()


def test_dense_common_landmarks_seal_at_gamma():
    # every frame sees one common set: gamma equals the frame count
    cfg = PartitionConfig(gamma_thr=3, n_thr=50, beta_thr=0.99)
    p = OnlinePartitioner(cfg)
    blocks = []
    for i in range(9):
        b = p.ingest_frame(frame(i, range(20)))
        if b:
            blocks.append(b)
    assert blocks[0].n_temporal == 3
    assert blocks[0].gamma_at_seal == 3.0
    # following blocks start at the shared boundary frame
    assert blocks[1].reference_frame_id == blocks[0].camera_ids[2]


def test_out_of_order_frame_rejected():
    p = OnlinePartitioner(PartitionConfig())
    p.ingest_frame(frame(4, [1, 2]))
    with pytest.raises(OutOfOrderFrame):
        p.ingest_frame(frame(4, [1, 2]))
    with pytest.raises(OutOfOrderFrame):
        p.ingest_frame(frame(3, [1, 2]))


def test_minimum_temporal_size_two():
    # a single frame can never satisfy the seal rule even with dense
    # landmarks (a 1-frame block yields no relative constraints)
    cfg = PartitionConfig(gamma_thr=3, n_thr=50)
    p = OnlinePartitioner(cfg)
    assert p.ingest_frame(frame(0, range(100))) is None


def validate_partition(blocks, frames, cfg):
    """Post-hoc validator for the partition-set properties."""
    all_frames = {f.id for f in frames}
    all_landmarks = {int(j) for f in frames for j in f.landmark_ids}
    by_id = {f.id: f for f in frames}

    covered_frames = set()
    covered_landmarks = set()
    for b in blocks:
        covered_frames.update(b.camera_ids)
        covered_landmarks.update(b.landmark_ids)
        # landmark set is the union of the members' visible sets
        union = set()
        for cid in b.camera_ids:
            union.update(int(j) for j in by_id[cid].landmark_ids)
        assert union == set(b.landmark_ids)
        assert len(b.added_in_ids) <= cfg.n_alpha
        assert b.n_temporal <= cfg.n_thr
        # sealing rule: score reached or size cap hit (tail block exempt)
        if b is not blocks[-1]:
            assert (b.gamma_at_seal >= cfg.gamma_thr
                    or b.n_temporal == cfg.n_thr)
        # added-ins never come from the block's own temporal range
        assert not set(b.added_in_ids) & set(b.temporal_ids)
        for fid in b.added_in_ids:
            assert fid < b.reference_frame_id

    assert covered_frames == all_frames
    assert covered_landmarks == all_landmarks
    # every block from the second on shares its reference frame with the
    # previous block's last temporal frame
    for prev, cur in zip(blocks, blocks[1:]):
        assert cur.reference_frame_id == prev.temporal_ids[-1]
        assert set(cur.camera_ids) & set(prev.camera_ids)


def test_synthetic_stream_partition_validity():
    cfg = PartitionConfig()
    scene = generate_synthetic(SynthConfig(
        shape="loop", n_frames=300, n_landmarks=1500, pixel_noise=0.5,
        visibility_radius=8.0, seed=11))
    blocks = partition_all(scene.frames, cfg)
    assert len(blocks) >= 3
    validate_partition(blocks, scene.frames, cfg)


def test_partition_determinism():
    scene = generate_synthetic(SynthConfig(
        shape="loop", n_frames=120, n_landmarks=600, pixel_noise=0.5,
        visibility_radius=8.0, seed=3))
    cfg = PartitionConfig()
    a = partition_all(scene.frames, cfg)
    b = partition_all(scene.frames, cfg)
    assert [blk.camera_ids for blk in a] == [blk.camera_ids for blk in b]
    assert [blk.landmark_ids for blk in a] == [blk.landmark_ids for blk in b]


def test_added_in_cameras_appear_with_loop_closure():
    # a full loop revisits the start region, so late blocks should pull
    # in early cameras through the overlap ratio
    scene = generate_synthetic(SynthConfig(
        shape="loop", n_frames=200, n_landmarks=1000, pixel_noise=0.0,
        visibility_radius=8.0, seed=5))
    blocks = partition_all(scene.frames, PartitionConfig())
    assert any(b.added_in_ids for b in blocks)


def test_config_validation():
    with pytest.raises(ValueError):
        PartitionConfig(gamma_thr=2)
    with pytest.raises(ValueError):
        PartitionConfig(beta_thr=1.0)
    with pytest.raises(ValueError):
        PartitionConfig(n_thr=1)
