"""
How fast do the finite-population solutions approach the limit?
===============================================================

Rescale the finite-N Riccati blocks by powers of N, compare with the limit
trajectories and fit a line in log-log coordinates.
"""

from lqmfg import TimeGrid, benchmark_params, solve_limit
from lqmfg.asymptotics import convergence_study, gain_convergence

params = benchmark_params()
grid = TimeGrid(params.T, 200)
Ns = [2, 4, 8, 16, 32, 64]
limit = solve_limit(params, grid)

for kind in ("open", "closed"):
    table = convergence_study(params, grid, Ns, kind, limit=limit)
    print(f"\n{kind}-loop Riccati blocks")
    for row in table.rows:
        print(f"  N={row['N']:3d}  group1 {row['group1']:.3e}  group2 {row['group2']:.3e}")
    for name, fit in table.fits.items():
        print(f"  {name}: slope {fit.slope:.3f}, r2 {fit.r2:.4f}")

    gains = gain_convergence(params, grid, Ns, kind, limit=limit)
    print(f"  gains: slope {gains.fits['group1'].slope:.3f}")

# slopes near -1 mean the gaps shrink like 1/N
