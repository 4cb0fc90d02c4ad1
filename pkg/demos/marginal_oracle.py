"""
Marginal fields from a handful of points
========================================

For a small weighted point set the marginal path is a Gaussian mixture, so
its density and vector field are exact. We check the continuity equation
on a grid and watch the residual shrink like h^2 as the grid is refined.
"""

import numpy as np

from flowmatch.oracle import GridSpec, MixtureOracle, convergence_ratio, reversed_residual
from flowmatch.paths import OTPath, VPPath

points = np.array([[1.5, 1.0], [-1.0, 1.2], [0.3, -1.4], [-1.2, -0.6]])

for sch in (OTPath(), VPPath()):
    oracle = MixtureOracle(points, sch)
    grid = GridSpec(points=65, t_center=0.5)
    ratio, coarse, fine = convergence_ratio(oracle.marginal_density, oracle.marginal_vf, grid)
    print(f"{sch.kind}: max residual {coarse.max_residual:.2e} (h={coarse.h:.4f}) -> "
          f"{fine.max_residual:.2e} (h={fine.h:.4f}), ratio {ratio:.2f}")

# at t = 0 every component is the same standard normal, so the posterior
# over data points is flat; later it concentrates on the nearest point
oracle = MixtureOracle(points, OTPath())
x = np.array([[0.0, 0.0], [1.2, 0.8]])
for t in (0.0, 0.8):
    print(f"\nposterior at t={t}:\n", np.round(oracle.posterior(t, x), 3))
    print(f"marginal field at t={t}:\n", np.round(oracle.marginal_vf(t, x), 3))

# a wrong field does not satisfy the equation however fine the grid
bad = lambda t, y: 1.05 * oracle.marginal_vf(t, y)
ratio, coarse, fine = convergence_ratio(oracle.marginal_density, bad, GridSpec(points=65))
print(f"\nscaled field: residual {coarse.max_residual:.2e} -> {fine.max_residual:.2e}, ratio {ratio:.2f}")

# running the path backwards: p_{1-t} is generated by -u_{1-t}
rev = reversed_residual(MixtureOracle(points, VPPath()), GridSpec(points=129, t_center=0.6))
print(f"reversed VP path: mean residual {rev.mean_residual:.2e} at 129^2")
