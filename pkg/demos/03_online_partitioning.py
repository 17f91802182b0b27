"""Streaming co-visibility partitioning of an image sequence.

Frames accumulate until the average number of in-block cameras seeing
each block landmark reaches gamma_thr (or the size cap n_thr); sealing
then pulls in previous cameras whose view-overlap ratio beats beta_thr.

Run:  python3 demos/03_online_partitioning.py
"""

from posepipe import (OnlinePartitioner, PartitionConfig, SynthConfig,
                      generate_synthetic, global_covisibility_score)

scene = generate_synthetic(SynthConfig(
    shape="loop", n_frames=300, n_landmarks=1500, pixel_noise=0.5,
    visibility_radius=12.0, seed=7))

config = PartitionConfig(gamma_thr=10.0, beta_thr=0.15, n_alpha=10, n_thr=50)
partitioner = OnlinePartitioner(config)

print("id  temporal  added  gamma  reference")
for frame in scene.frames:
    block = partitioner.ingest_frame(frame)
    if block is not None:
        print(f"{block.id:2d}  {block.n_temporal:8d}  {len(block.added_in_ids):5d}"
              f"  {block.gamma_at_seal:5.1f}  {block.reference_frame_id:9d}")
tail = partitioner.flush()
if tail is not None:
    print(f"{tail.id:2d}  {tail.n_temporal:8d}  {len(tail.added_in_ids):5d}"
          f"  {tail.gamma_at_seal:5.1f}  {tail.reference_frame_id:9d}  (tail)")

# Added-in cameras come from anywhere in the history; on a loop the late
# blocks reach back to the start (implicit loop closure).
blocks = partitioner.blocks
late = blocks[-2]
print("\nlate block", late.id, "added-in cameras:", late.added_in_ids)
by_id = {f.id: f for f in scene.frames}
for fid in late.added_in_ids[:3]:
    beta = global_covisibility_score(
        by_id[fid], set(late.landmark_ids))
    print(f"  frame {fid}: overlap ratio {beta:.2f}")
