"""The self-adaptive Levenberg-Marquardt solver on classic problems.

The damping is mu_k = alpha_k ||f(x_k)||^lambda; alpha_k adapts through
an update factor driven by the actual/predicted reduction ratio, with a
sensitivity that grows with the problem-size parameter eta.

Run:  python3 demos/04_self_adaptive_damping.py
"""

import numpy as np

from posepipe import (FunctionSystem, SolverConfig, convergence_order,
                      rho_update, solve)

# The update factor: > 1 below the target ratio, < 1 above it, and the
# response sharpens dramatically with eta.
cfg4 = SolverConfig(eta=4, nu=0.25, xi=1e-8)
cfg64 = SolverConfig(eta=64, nu=0.25, xi=1e-8)
for nu_k in (0.0, 0.2, 0.25, 0.4, 0.75):
    print(f"nu_k={nu_k:4.2f}: factor(eta=4) {rho_update(1.0, nu_k, cfg4):9.3g}"
          f"   factor(eta=64) {rho_update(1.0, nu_k, cfg64):9.3g}")

# Rosenbrock: far from the zero-residual regime, but still solved.
rosen = FunctionSystem(
    2,
    lambda x: np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]]),
    lambda x: np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]]))
res = solve(rosen, np.array([-1.2, 1.0]),
            SolverConfig(eta=4, max_iterations=500, gradient_tol=1e-14))
print(f"\nrosenbrock: x* = {res.x}, {res.iterations} iterations")

# A zero-residual system with a rank-deficient Jacobian on the whole
# solution set (the unit circle): convergence is still (super)quadratic
# because the damping scales with the residual norm.
circle = FunctionSystem(
    2,
    lambda x: np.array([x[0] ** 2 + x[1] ** 2 - 1.0]),
    lambda x: np.array([[2 * x[0], 2 * x[1]]]))
res = solve(circle, np.array([1.2, 0.3]),
            SolverConfig(eta=2, alpha0=5.0, xi=0.2, keep_iterates=True,
                         gradient_tol=1e-14, max_iterations=80))
dists = [abs(np.linalg.norm(e.x) - 1.0) for e in res.trace if e.accepted]
dists = [d for d in dists if 1e-13 < d < 0.5]
print(f"circle: distances to the solution set {['%.2e' % d for d in dists]}")
print(f"measured convergence order: {convergence_order(dists[-4:]):.2f}")
