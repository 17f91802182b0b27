"""Rotation averaging and progressive block alignment."""

import math
import time

import numpy as np
import pytest

from posepipe.align import (BlockRotationGraph, EmptyMeasurements,
                            SharedCameraSet, align_pair, averaging_objective,
                            chordal_mean, collect_shared, compose_trajectory,
                            global_update, rotation_measurements,
                            single_rotation_average, sweep_once)
from posepipe.geom import (Pose, Rotation3, exp_map, geodesic_distance,
                           random_rotation, rot_z)
from posepipe.local_ba import LocalSolution
from posepipe.partition import PartitionConfig, partition_all
from posepipe.pipeline import ate_rmse
from posepipe.scene import SynthConfig, generate_synthetic


def fake_solution(block_id, poses: dict):
    return LocalSolution(block_id=block_id, relative_poses=poses,
                         landmark_positions={}, cost=0.0, iterations=0,
                         status="zero_residual", gauge="frozen-landmark")


# ---------------------------------------------------------------------------
# shared-camera collection


def test_collect_shared_boundary_overlap_only():
    a = fake_solution(1, {0: Pose.identity(), 1: Pose.identity()})
    b = fake_solution(2, {1: Pose.identity(), 2: Pose.identity()})
    sets = collect_shared({1: a, 2: b})
    assert len(sets) == 1
    assert sets[0].camera_ids == (1,)


def test_collect_shared_disjoint_pair_omitted():
    a = fake_solution(1, {0: Pose.identity()})
    b = fake_solution(2, {5: Pose.identity()})
    assert collect_shared({1: a, 2: b}) == []


def test_collect_shared_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sols = {}
        for bid in range(1, 5):
            cams = rng.choice(20, size=rng.integers(1, 10), replace=False)
            sols[bid] = fake_solution(
                bid, {int(c): Pose.identity() for c in cams})
        got = {(s.block_a, s.block_b): set(s.camera_ids)
               for s in collect_shared(sols)}
        for i in range(1, 5):
            for j in range(i + 1, 5):
                inter = set(sols[i].relative_poses) & set(sols[j].relative_poses)
                if inter:
                    assert got[(i, j)] == inter
                else:
                    assert (i, j) not in got


# ---------------------------------------------------------------------------
# single rotation averaging


def test_average_of_identical_rotations():
    r = rot_z(0.7)
    assert geodesic_distance(single_rotation_average([r] * 5), r) == 0.0


def test_average_single_axis_midpoint():
    got = single_rotation_average([rot_z(0.0), rot_z(0.8)])
    assert geodesic_distance(got, rot_z(0.4)) < 1e-12


def test_average_empty_raises():
    with pytest.raises(EmptyMeasurements):
        single_rotation_average([])


def random_search_objective(measurements, n_samples, rng):
    """Best objective over random SO(3) samples, evaluated on
    quaternions (independent of the matrix-based averaging path)."""
    qs = np.array([m.q for m in measurements])            # (k, 4)
    base = chordal_mean(measurements)
    samples = rng.normal(size=(n_samples // 2, 4))
    # half the samples concentrate around the chordal mean
    local = base.q + 0.2 * rng.normal(size=(n_samples - samples.shape[0], 4))
    all_q = np.vstack([samples, local])
    all_q /= np.linalg.norm(all_q, axis=1, keepdims=True)
    dots = np.clip(np.abs(all_q @ qs.T), -1.0, 1.0)       # (n, k)
    angles = 2.0 * np.arccos(dots)
    return float(np.min(np.sum(angles ** 2, axis=1)))


def test_average_beats_random_search_oracle():
    rng = np.random.default_rng(7)
    for _ in range(5):
        base = random_rotation(rng)
        meas = [base.compose(exp_map(rng.normal(scale=0.1, size=3)))
                for _ in range(10)]
        mean = single_rotation_average(meas)
        ours = averaging_objective(mean, meas)
        oracle = random_search_objective(meas, 200_000, rng)
        assert ours <= oracle + 1e-6


def test_average_is_at_least_as_central_as_any_sample():
    rng = np.random.default_rng(3)
    for _ in range(20):
        base = random_rotation(rng)
        meas = [base.compose(exp_map(rng.normal(scale=0.25, size=3)))
                for _ in range(8)]
        mean = single_rotation_average(meas)
        ours = averaging_objective(mean, meas)
        for m in meas:
            assert ours <= averaging_objective(m, meas) + 1e-12


def test_average_right_equivariance():
    rng = np.random.default_rng(5)
    for _ in range(20):
        base = random_rotation(rng)
        meas = [base.compose(exp_map(rng.normal(scale=0.2, size=3)))
                for _ in range(6)]
        z = random_rotation(rng)
        mean = single_rotation_average(meas)
        mean_z = single_rotation_average([m.compose(z) for m in meas])
        assert geodesic_distance(mean_z, mean.compose(z)) < 1e-10


# ---------------------------------------------------------------------------
# pair alignment


def shared_set_from_rotation(r_ab: Rotation3, n_cams, rng, noise_deg=0.0):
    """Relative poses of shared cameras in two block frames differing by
    the rotation r_ab (block a frame -> block b frame)."""
    cams, poses_a, poses_b = [], [], []
    for i in range(n_cams):
        rot_a = random_rotation(rng)
        rot_b = rot_a.compose(r_ab.inverse())
        if noise_deg > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rot_b = rot_b.compose(exp_map(axis * math.radians(noise_deg)))
        cams.append(i)
        poses_a.append(Pose(rot_a, rng.normal(size=3)))
        poses_b.append(Pose(rot_b, rng.normal(size=3)))
    return SharedCameraSet(1, 2, tuple(cams), tuple(poses_a), tuple(poses_b))


def test_align_pair_identity_for_consistent_blocks():
    rng = np.random.default_rng(1)
    poses = {i: Pose(random_rotation(rng), rng.normal(size=3))
             for i in range(5)}
    shared = SharedCameraSet(1, 2, tuple(poses),
                             tuple(poses.values()), tuple(poses.values()))
    got = align_pair(shared)
    assert geodesic_distance(got, Rotation3.identity()) < 1e-12


def test_align_pair_recovers_known_rotation():
    rng = np.random.default_rng(2)
    r_ab = random_rotation(rng)
    shared = shared_set_from_rotation(r_ab, 6, rng)
    # measurements follow (R_b)^T R_a = R_ab convention
    for m in rotation_measurements(shared):
        assert geodesic_distance(m, r_ab) < 1e-9
    assert geodesic_distance(align_pair(shared), r_ab) < 1e-9


def test_align_pair_noise_averaging_gain():
    rng = np.random.default_rng(4)
    wins = 0
    trials = 100
    for _ in range(trials):
        r_ab = random_rotation(rng)
        shared = shared_set_from_rotation(r_ab, 10, rng, noise_deg=1.0)
        est_err = geodesic_distance(align_pair(shared), r_ab)
        single_err = geodesic_distance(rotation_measurements(shared)[0], r_ab)
        if est_err < single_err:
            wins += 1
    assert wins >= 0.9 * trials


# ---------------------------------------------------------------------------
# progressive graph updates


def consistent_block_solutions(rng, n_blocks=4, overlap=3):
    """Blocks on a camera loop with exactly consistent relative data."""
    truth = {bid: random_rotation(rng) for bid in range(1, n_blocks + 1)}
    truth[1] = Rotation3.identity()
    cam_rot = {c: random_rotation(rng) for c in range(20)}
    members = {}
    for bid in range(1, n_blocks + 1):
        start = (bid - 1) * 4
        ids = [(start + k) % 16 for k in range(4 + overlap)]
        members[bid] = ids
    sols = {}
    for bid, ids in members.items():
        rel = {c: Pose(cam_rot[c].compose(truth[bid].inverse()),
                       rng.normal(size=3)) for c in ids}
        sols[bid] = fake_solution(bid, rel)
    return truth, sols


def run_progressive(sols, full_resolve=False):
    graph = BlockRotationGraph()
    for bid in sorted(sols):
        done = {b: sols[b] for b in sols if b <= bid}
        shared = collect_shared(done)
        incident = [s for s in shared if bid in (s.block_a, s.block_b)]
        global_update(graph, bid, incident, full_resolve=full_resolve,
                      all_shared=shared if full_resolve else None)
    return graph


def test_two_blocks_reduce_to_pair_alignment():
    rng = np.random.default_rng(6)
    truth, sols = consistent_block_solutions(rng, n_blocks=2)
    graph = run_progressive(sols)
    shared = collect_shared(sols)[0]
    direct = align_pair(shared)
    via_graph = graph.pair_rotation(1, 2)
    assert geodesic_distance(direct, via_graph) < 1e-9


def test_consistent_cycle_recovers_truth_up_to_gauge():
    rng = np.random.default_rng(8)
    truth, sols = consistent_block_solutions(rng, n_blocks=4)
    graph = run_progressive(sols)
    # gauge: anchor block 1 at identity in both
    anchor = graph.absolute[1]
    for bid, r in truth.items():
        aligned = graph.absolute[bid].compose(anchor.inverse())
        assert geodesic_distance(aligned, r) < 1e-8


def test_perturbed_edge_error_distributed():
    # one inconsistent edge in an otherwise exact cycle: the sweeps
    # spread the conflict instead of dumping it into one block
    rng = np.random.default_rng(9)
    truth, sols = consistent_block_solutions(rng, n_blocks=4)
    graph = run_progressive(sols)
    edge = next(iter(graph.edges))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    graph.edges[edge] = graph.edges[edge].compose(
        exp_map(axis * math.radians(2.0)))
    for _ in range(20):
        if sweep_once(graph) < 1e-10:
            break
    anchor = graph.absolute[1]
    errs = [math.degrees(geodesic_distance(
        graph.absolute[bid].compose(anchor.inverse()), r))
        for bid, r in truth.items()]
    assert max(errs) < 2.0
    assert max(errs) > 1e-6  # the conflict really moved the solution


def test_sweep_consistency_error_non_increasing():
    rng = np.random.default_rng(10)
    truth, sols = consistent_block_solutions(rng, n_blocks=5)
    graph = BlockRotationGraph()
    graph.anchor = 1
    # noisy starting absolutes, exact edges
    for bid in truth:
        graph.absolute[bid] = truth[bid].compose(
            exp_map(rng.normal(scale=0.1, size=3)))
    graph.absolute[1] = Rotation3.identity()
    for s in collect_shared(sols):
        graph.edges[(s.block_a, s.block_b)] = align_pair(s)
    errors = [graph.consistency_error()]
    for _ in range(10):
        sweep_once(graph)
        errors.append(graph.consistency_error())
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))


# ---------------------------------------------------------------------------
# trajectory composition


def test_single_block_trajectory_equals_local_solution():
    rng = np.random.default_rng(11)
    poses = {i: Pose(random_rotation(rng), rng.normal(size=3))
             for i in range(6)}
    poses[0] = Pose.identity()
    sols = {1: fake_solution(1, poses)}
    graph = BlockRotationGraph()
    graph.anchor = 1
    graph.absolute[1] = Rotation3.identity()
    traj = compose_trajectory(sols, graph)
    for fid, pose in poses.items():
        assert geodesic_distance(traj[fid].rotation, pose.rotation) < 1e-12
        assert np.allclose(traj[fid].center(), pose.center(), atol=1e-12)


@pytest.fixture(scope="module")
def noiseless_composed():
    from test_local_ba import chain_solve
    scene = generate_synthetic(SynthConfig(
        shape="loop", n_frames=150, n_landmarks=700, pixel_noise=0.0,
        visibility_radius=12.0, seed=21, landmark_init_noise_frac=0.005))
    blocks = partition_all(scene.frames, PartitionConfig())
    sols, _ = chain_solve(scene, blocks)
    graph = BlockRotationGraph()
    for bid in sorted(sols):
        done = {b: sols[b] for b in sols if b <= bid}
        shared = collect_shared(done)
        incident = [s for s in shared if bid in (s.block_a, s.block_b)]
        global_update(graph, bid, incident)
    traj = compose_trajectory(sols, graph)
    return scene, sols, graph, traj


def test_noiseless_multiblock_matches_truth_up_to_similarity(noiseless_composed):
    scene, _, _, traj = noiseless_composed
    est = [traj[fr.id] for fr in scene.frames]
    gt = list(scene.ground_truth.poses)
    assert ate_rmse(est, gt) < 1e-8


def test_shared_frame_taken_from_lowest_block_deterministically(noiseless_composed):
    scene, sols, graph, traj = noiseless_composed
    again = compose_trajectory(sols, graph)
    for fid in traj:
        assert np.array_equal(traj[fid].translation, again[fid].translation)
        assert np.array_equal(traj[fid].rotation.q, again[fid].rotation.q)
    shared_somewhere = [
        fid for fid in traj
        if sum(fid in s.relative_poses for s in sols.values()) >= 2]
    assert shared_somewhere, "scene produced no multi-block cameras"
    fid = shared_somewhere[0]
    owner = min(b for b, s in sols.items() if fid in s.relative_poses)
    rel = sols[owner].relative_poses[fid]
    expected_rot = rel.rotation.compose(graph.absolute[owner])
    assert geodesic_distance(traj[fid].rotation, expected_rot) < 1e-12


def test_progressive_update_cost_stays_near_flat():
    # 2000-frame partition with fabricated exact local solutions: the
    # per-update alignment cost must not scale with total frame count
    scene = generate_synthetic(SynthConfig(
        shape="loop", n_frames=2000, n_landmarks=3000, pixel_noise=0.0,
        visibility_radius=10.0, seed=31))
    blocks = partition_all(scene.frames, PartitionConfig())
    gt = scene.ground_truth
    sols = {}
    graph = BlockRotationGraph()
    frames_so_far = []
    times, sizes = [], []
    for b in blocks:
        ref = b.reference_frame_id
        rel = {c: gt.poses[c].compose(gt.poses[ref].inverse())
               for c in b.camera_ids}
        sols[b.id] = fake_solution(b.id, rel)
        incident = [s for s in collect_shared(sols)
                    if b.id in (s.block_a, s.block_b)]
        t0 = time.perf_counter()
        global_update(graph, b.id, incident)
        times.append((time.perf_counter() - t0) * 1e3)
        frames_so_far.extend(b.temporal_ids)
        sizes.append(len(set(frames_so_far)))
    assert len(times) >= 10
    slope, _ = np.polyfit(sizes[1:], times[1:], 1)
    total_growth = slope * (sizes[-1] - sizes[1])
    assert total_growth < 10.0 * np.median(times[1:]), \
        f"per-update cost grows too fast: slope {slope:.2e} ms/frame"
