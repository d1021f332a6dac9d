# Gradient ascent against Langevin dynamics when the score is known exactly.
#
# The "network" here is the closed-form score of a Gaussian blob smoothed by
# the level-t noise, so any difference between the samplers comes from the
# update rule alone. The trained detector shows the same ordering (see
# `votestep compare-samplers`).

import numpy as np

from votestep.diffusion import NoiseSchedule, sample_trajectory

rng = np.random.default_rng(0)
sd = 0.05            # spread of the "object center" distribution
mu = np.array([1.0, -0.5, 0.4])
sch = NoiseSchedule.geometric(0.1, 1.0, 10, lam=0.6, gamma0=0.01)
print("levels:", np.round(sch.sigmas, 3))
print("step sizes gamma_t:", np.round([sch.gamma(t) for t in range(1, sch.T + 1)], 4))


def score(x, t):
    return (mu - x) / (sd ** 2 + sch.sigma(t) ** 2), None


start = mu + rng.normal(size=(1, 500, 3)) * 0.6
unit = np.full(start.shape[:-1], 0.6)   # lam * s with s = 1

print(f"\nmean distance to mu at the start: {np.linalg.norm(start - mu, axis=-1).mean():.3f}")
print("steps   GA      ALD     LD")
for steps in (1, 2, 5, 10, 20, 30):
    row = []
    for mode in ("ga", "ald", "ld"):
        traj = sample_trajectory(mode, steps, start, score, sch, np.random.default_rng(steps), unit=unit)
        row.append(np.linalg.norm(traj.final - mu, axis=-1).mean())
    print(f"{steps:5d}  " + "  ".join(f"{v:.4f}" for v in row))

# Plain Langevin at the top level keeps injecting noise of size ~ lam * sigma_T,
# annealing shrinks it level by level, and gradient ascent adds none at all.
