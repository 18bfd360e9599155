"""
How much can one player gain by deviating?
==========================================

Everyone uses the decentralized law except one player, who plays the exact
best response.  The improvement is the Nash gap.  Costs come from moment
equations, so there is no sampling noise here.
"""

from lqmfg import TimeGrid, benchmark_params
from lqmfg.game import best_response, nash_gap_study, policy_cost
from lqmfg.simulation import build_policy

params = benchmark_params()
grid = TimeGrid(params.T, 200)

report = nash_gap_study(params, grid, [4, 8, 16, 32])
for row in report.rows:
    print(f"N={row['N']:3d}  J={row['J_policy']:.8f}  J*={row['J_star']:.8f}  gap={row['gap']:.3e}")
print(f"slope {report.fit.slope:.3f} (r2 {report.fit.r2:.4f})")

# the closed-loop equilibrium leaves nothing on the table
N = 6
policy = build_policy("closed", params, N, grid)
print("closed-loop gap at N=6:", policy_cost(params, N, policy, grid) - best_response(params, N, policy, grid).cost)

# the open-loop law is not a feedback equilibrium, so a deviator gains a little
policy = build_policy("open", params, 2, grid)
print("open-loop gap at N=2:", policy_cost(params, 2, policy, grid) - best_response(params, 2, policy, grid).cost)
