"""
Conditional Gaussian paths
==========================

Each data point x1 defines a Gaussian path from noise to (almost) x1. The
OT path moves every noise sample along a straight line at constant speed;
the diffusion-style VP path bends its samples and speeds up near the data.
"""

import numpy as np

from flowmatch.paths import OTPath, PathSchedule, VEPath, VPPath

x1 = np.array([2.0, 0.0])
x0 = np.array([-0.5, 1.0])

# the three schedules, sampled on a coarse time grid
for sch in (OTPath(), VPPath(), VEPath()):
    t = np.linspace(0.0, sch.t_max, 5)
    mu, sigma, _, _ = sch.mean_std(t, np.tile(x1, (5, 1)))
    print(f"{sch.kind}: sigma_t = {np.round(sigma, 4)}")

# a sample path: psi_t(x0) = sigma_t x0 + mu_t
ot, vp = OTPath(), VPPath()
for sch in (ot, vp):
    t = np.linspace(0.0, sch.t_max, 6)
    path = sch.conditional_flow(t, np.tile(x0, (6, 1)), np.tile(x1, (6, 1)))
    print(f"\n{sch.kind} path from {x0} towards {x1}:")
    for ti, p in zip(t, path):
        print(f"  t={ti:.2f}  x={np.round(p, 4)}")

# OT velocities along the path never change; VP velocities do
def speeds(sch):
    t = np.linspace(0.0, 0.99, 12)
    xt = sch.conditional_flow(t, np.tile(x0, (12, 1)), np.tile(x1, (12, 1)))
    return np.linalg.norm(sch.conditional_vf(t, xt, np.tile(x1, (12, 1))), axis=1)

print("\nspeed along the OT path:", np.round(speeds(ot), 4))
print("speed along the VP path:", np.round(speeds(vp), 4))

# the closed forms agree with the generic (sigma'/sigma)(x - mu) + mu'
x = np.random.default_rng(0).standard_normal((1000, 2))
for sch in (ot, vp):
    t = np.random.default_rng(1).uniform(0, sch.t_max, 1000)
    a = sch.closed_form_vf(t, x, np.tile(x1, (1000, 1)))
    b = PathSchedule.conditional_vf(sch, t, x, np.tile(x1, (1000, 1)))
    print(f"{sch.kind}: max |closed form - generic| = {np.max(np.abs(a - b)):.2e}")
