"""Rotation algebra and the pinhole camera, the package's foundations.

Run:  python3 demos/01_rotations_and_projection.py
"""

import numpy as np

from posepipe import (Intrinsics, Pose, Rotation3, exp_map, geodesic_distance,
                      log_map, project, random_rotation, rot_z)

rng = np.random.default_rng(0)

# Rotations live on SO(3); compose/inverse stay there to machine precision.
a = random_rotation(rng)
b = random_rotation(rng)
c = a.compose(b)
print("composition orthonormality error:",
      np.abs(c.matrix.T @ c.matrix - np.eye(3)).max())

# The geodesic distance is the rotation angle between two orientations.
print("angle between rot_z(0.3) and identity:",
      geodesic_distance(rot_z(0.3), Rotation3.identity()))

# exp/log round-trip: rotation vectors are the natural increments.
w = np.array([0.2, -0.4, 0.1])
print("round trip error:",
      np.linalg.norm(log_map(exp_map(w)) - w))

# A calibrated pinhole camera projects world points to pixels.
k = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0)
cam = Pose(rot_z(0.1), np.array([0.0, 0.0, 2.0]))
print("projection of the origin:", project(k, cam, [0.0, 0.0, 0.0]))

# Distances are bi-invariant: rotating both arguments changes nothing.
z = random_rotation(rng)
print("bi-invariance error:",
      abs(geodesic_distance(z.compose(a), z.compose(b))
          - geodesic_distance(a, b)))
