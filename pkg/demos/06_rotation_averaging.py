"""Single rotation averaging and progressive block alignment.

Run:  python3 demos/06_rotation_averaging.py
"""

import math

import numpy as np

from posepipe import (averaging_objective, exp_map, geodesic_distance,
                      random_rotation, rot_z, single_rotation_average)

rng = np.random.default_rng(0)

# The geodesic L2 mean of two rotations about one axis is the midpoint.
mid = single_rotation_average([rot_z(0.0), rot_z(0.8)])
print("midpoint angle:", mid.angle())

# Averaging noisy estimates of one rotation beats any single estimate.
base = random_rotation(rng)
noisy = [base.compose(exp_map(rng.normal(scale=math.radians(2.0), size=3)))
         for _ in range(12)]
mean = single_rotation_average(noisy)
print(f"error of the mean: "
      f"{math.degrees(geodesic_distance(mean, base)):.3f} deg")
print(f"error of the first estimate: "
      f"{math.degrees(geodesic_distance(noisy[0], base)):.3f} deg")

# The mean minimizes the sum of squared geodesic distances; it is at
# least as central as every input.
print("objective at mean:", averaging_objective(mean, noisy))
print("objective at best input:",
      min(averaging_objective(m, noisy) for m in noisy))

# Equivariance: averaging rotated measurements rotates the mean.
z = random_rotation(rng)
mean_z = single_rotation_average([m.compose(z) for m in noisy])
print("equivariance error:",
      geodesic_distance(mean_z, mean.compose(z)))
