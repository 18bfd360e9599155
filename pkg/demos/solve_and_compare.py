"""
Open-loop versus closed-loop equilibria on the scalar benchmark
===============================================================

Solve both finite-population systems and the population limit, then look at
how far apart the two equilibria are for a few population sizes.
"""

import numpy as np

from lqmfg import TimeGrid, benchmark_params, solve_closed_loop, solve_limit, solve_open_loop
from lqmfg.finite import closed_loop_gains, open_loop_gains
from lqmfg.game import value_function

params = benchmark_params()
grid = TimeGrid(params.T, 200)
print(params)

# the population limit does not depend on N
limit = solve_limit(params, grid)
print("P1inf(0) =", limit.P1inf[0, 0, 0], " P2inf(0) =", limit.P2inf[0, 0, 0])
print("xbar(T)  =", limit.xbar[-1, 0])

# the own-state coefficient P1 differs between the two notions of equilibrium
for N in (1, 2, 8, 32):
    op = solve_open_loop(params, N, grid)
    cl = solve_closed_loop(params, N, grid)
    gap = np.max(np.abs(op.P1 - cl.P1))
    print(f"N={N:3d}  sup_t |P1_open - P1_closed| = {gap:.3e}")

# feedback gains on a player's own state and on the others
N = 8
go = open_loop_gains(solve_open_loop(params, N, grid), params)
gc = closed_loop_gains(solve_closed_loop(params, N, grid), params)
print("K1 at t=0:  open", go.K1[0, 0, 0], " closed", gc.K1[0, 0, 0], " limit", limit.K1inf[0, 0, 0])
print("N*K2 at t=0: open", N * go.K2[0, 0, 0], " closed", N * gc.K2[0, 0, 0], " limit", limit.K2inf[0, 0, 0])

# expected cost of one player in the closed-loop equilibrium
print("closed-loop value at N=8:", value_function(solve_closed_loop(params, N, grid), params, quadrature="simpson"))
