"""
Simulating the population
=========================

Run many independent populations under three policies and measure how far
the empirical average wanders from the deterministic limit path xbar.
"""

import numpy as np

from lqmfg import TimeGrid, benchmark_params, solve_limit
from lqmfg.simulation import build_policy, mean_field_error, simulate

params = benchmark_params()
grid = TimeGrid(params.T, 200)
limit = solve_limit(params, grid)

# one population of 16 players under the decentralized law
policy = build_policy("decentralized", params, 16, grid, limit=limit)
paths = simulate(params, 16, policy, grid, n_paths=1, seed=1, storage="full")
print("player states at T:", np.round(paths.states[0, :, -1, 0], 3))
print("average at T:", paths.mean_path[0, -1, 0], " xbar(T):", limit.xbar[-1, 0])

# sup over time of E|x^(N) - xbar|^2, estimated from 2000 populations
Ns = [4, 16, 64]
for kind in ("open", "closed", "decentralized"):
    vals = []
    for N in Ns:
        res = mean_field_error(params, N, kind, grid, 2000, seed=12345, limit=limit, workers=4)
        vals.append(res.value)
        print(f"{kind:13s} N={N:3d}  {res.value:.3e} +- {res.stderr:.1e}")
    slope = np.polyfit(np.log(Ns), np.log(vals), 1)[0]
    print(f"{kind:13s} slope {slope:.3f}")
