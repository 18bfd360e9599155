import numpy as np
import pytest

from lqmfg import _ode
from lqmfg.errors import PolicyMismatchError
from lqmfg.finite import closed_loop_gains, open_loop_gains, solve_closed_loop, solve_open_loop
from lqmfg.game import (
    best_response, evaluate_cost, nash_gap_study, policy_cost, reconstruct_costate, value_function,
)
from lqmfg.model import TimeGrid
from lqmfg.simulation import Policy, PolicyKind, build_policy, simulate

from conftest import random_instance, scalar_game


def _short_form_value(sol, params):
    """Short form E[x_i0'(P1 + (N-1) P3) x_i0] + linear terms, without the cross-player terms."""
    N, k = sol.N, sol.N - 1
    x0, S0, U, sig = params.x0_mean, params.x0_cov, params.upsilon, params.sigma
    W = sol.P1 + k * sol.P3
    s1, s2 = sol.s1[0], sol.s2[0]
    init = x0 @ W[0] @ x0 + np.trace(W[0] @ S0) + 2 * (s1 - s2) @ x0 + 2 * N * s2 @ x0
    vals = (np.einsum("a,tab,b->t", sig, W, sig) - np.einsum("ta,ab,tb->t", sol.s1, U, sol.s1)
            - 2 * k * np.einsum("ta,ab,tb->t", sol.s2, U, sol.s1) + params.eta @ params.Q @ params.eta)
    return float(init + params.etaf @ params.Qf @ params.etaf + _ode.trapezoid(vals, sol.grid.h))


def test_zero_game_costs_nothing():
    p = scalar_game()
    g = TimeGrid(1.0, 20)
    assert policy_cost(p, 3, Policy.zero(p, g), g) == 0.0
    assert value_function(solve_closed_loop(p, 3, g), p) == 0.0
    paths = simulate(p, 3, Policy.zero(p, g), g, 4, seed=0)
    assert not np.any(paths.costs)


def test_constant_control_cost():
    p = scalar_game(R=2.0, sigma=0.4, x0_cov=0.3)
    g = TimeGrid(1.5, 30)
    p = p.replace(T=1.5)
    pol = Policy.constant(p, g, 0.7)
    assert policy_cost(p, 4, pol, g) == pytest.approx(2.0 * 0.49 * 1.5, rel=1e-13)
    paths = simulate(p, 4, pol, g, 3, seed=1)
    np.testing.assert_allclose(paths.costs, 2.0 * 0.49 * 1.5, rtol=1e-13)


def test_value_matches_short_form_without_initial_mean():
    p = random_instance(np.random.default_rng(8), 2).replace(x0_mean=np.zeros(2))
    sol = solve_closed_loop(p, 5, TimeGrid(1.0, 200))
    assert value_function(sol, p) == pytest.approx(_short_form_value(sol, p), rel=1e-13)


def test_value_differs_from_short_form_with_initial_mean(bench, grid):
    sol = solve_closed_loop(bench, 5, grid)
    exact = policy_cost(bench, 5, build_policy("closed", bench, 5, grid), grid)
    # the short form misses 2(N-1) x0'P2 x0 and (N-1)(N-2) x0'P3 x0 when the initial mean is nonzero
    x0, P2, P3 = bench.x0_mean, sol.P2[0], sol.P3[0]
    missing = 2 * 4 * x0 @ P2 @ x0 + 4 * 3 * x0 @ P3 @ x0
    assert abs(_short_form_value(sol, bench) - exact) > 1e-2
    assert value_function(sol, bench) - _short_form_value(sol, bench) == pytest.approx(missing, rel=1e-12)
    assert value_function(sol, bench, quadrature="simpson") == pytest.approx(exact, rel=1e-9)


@pytest.mark.parametrize("N", [1, 2, 6])
def test_value_matches_moment_cost_random(N):
    p = random_instance(np.random.default_rng(30 + N), 2)
    g = TimeGrid(1.0, 200)
    sol = solve_closed_loop(p, N, g)
    exact = policy_cost(p, N, Policy.centralized(closed_loop_gains(sol, p), N), g)
    assert value_function(sol, p, quadrature="simpson") == pytest.approx(exact, rel=1e-9, abs=1e-10)
    assert value_function(sol, p) == pytest.approx(exact, rel=1e-4)


def test_value_against_monte_carlo(bench, grid):
    N = 4
    sol = solve_closed_loop(bench, N, grid)
    V = value_function(sol, bench, quadrature="simpson")
    paths = simulate(bench, N, Policy.centralized(closed_loop_gains(sol, bench), N), grid, 4000, seed=77, workers=4)
    est = [evaluate_cost(paths, bench, i) for i in range(N)]
    pooled = np.mean([e.mean for e in est])
    se = paths.costs.mean(axis=1).std(ddof=1) / np.sqrt(paths.n_paths)
    # Euler bias is O(h); it is well inside the Monte Carlo band at M=200
    assert abs(pooled - V) <= 3 * se


@pytest.mark.parametrize("kind", ["open", "closed"])
def test_costate_identity(kind):
    p = random_instance(np.random.default_rng(11), 2)
    g = TimeGrid(1.0, 50)
    sol = (solve_open_loop if kind == "open" else solve_closed_loop)(p, 4, g)
    law = (open_loop_gains if kind == "open" else closed_loop_gains)(sol, p)
    paths = simulate(p, 4, Policy.centralized(law, 4), g, 20, seed=3, storage="full")
    for player in (0, 3):
        check = reconstruct_costate(sol, paths, p, player=player)
        assert check.passed
        assert check.residual <= 1e-8 * (1 + check.scale)


def test_costate_mismatch_is_detected(bench):
    g = TimeGrid(1.0, 50)
    open_sol = solve_open_loop(bench, 4, g)
    closed_pol = build_policy("closed", bench, 4, g)
    paths = simulate(bench, 4, closed_pol, g, 20, seed=3, storage="full")
    with pytest.raises(PolicyMismatchError, match="policy/solution mismatch") as exc:
        reconstruct_costate(open_sol, paths, bench)
    assert exc.value.residual > 1e-3


def test_costate_requires_full_paths(bench):
    g = TimeGrid(1.0, 20)
    sol = solve_open_loop(bench, 2, g)
    paths = simulate(bench, 2, build_policy("open", bench, 2, g), g, 2, seed=0)
    with pytest.raises(ValueError, match="full"):
        reconstruct_costate(sol, paths, bench)


def test_best_response_ignores_others_when_decoupled(grid):
    p = random_instance(np.random.default_rng(4), 2).replace(
        G=np.zeros((2, 2)), Gamma=np.zeros((2, 2)), Gammaf=np.zeros((2, 2)))
    br = best_response(p, 5, build_policy("decentralized", p, 5, grid), grid)
    assert np.max(np.abs(br.gain[:, :, 2:])) <= 1e-10


def test_best_response_to_closed_loop_is_itself(bench, grid):
    N = 6
    law = closed_loop_gains(solve_closed_loop(bench, N, grid), bench)
    br = best_response(bench, N, Policy.centralized(law, N), grid)
    own = law.K1 - law.K2 + law.K2  # coefficient on x_i: (K1 - K2) + N K2 / N
    others = (N - 1) * law.K2       # on z = mean of the others
    np.testing.assert_allclose(br.gain[:, :, :1], own, atol=1e-8)
    np.testing.assert_allclose(br.gain[:, :, 1:], others, atol=1e-8)
    np.testing.assert_allclose(br.offset, law.v, atol=1e-8)


def test_single_player_everything_coincides():
    p = random_instance(np.random.default_rng(21), 2)
    g = TimeGrid(1.0, 200)
    costs = [policy_cost(p, 1, build_policy(k, p, 1, g), g) for k in ("open", "closed")]
    br = best_response(p, 1, build_policy("open", p, 1, g), g).cost
    assert costs[0] == pytest.approx(costs[1], rel=1e-10)
    assert br == pytest.approx(costs[0], rel=1e-8)
    V = value_function(solve_closed_loop(p, 1, g), p, quadrature="simpson")
    assert V == pytest.approx(br, rel=1e-8)


def test_best_response_never_worse(bench, grid):
    for kind in ("open", "decentralized", "zero"):
        for N in (2, 5):
            pol = build_policy(kind, bench, N, grid)
            assert best_response(bench, N, pol, grid).cost <= policy_cost(bench, N, pol, grid) + 1e-10


def test_open_loop_law_not_a_feedback_equilibrium(bench, grid):
    pol = build_policy("open", bench, 2, grid)
    gap = policy_cost(bench, 2, pol, grid) - best_response(bench, 2, pol, grid).cost
    assert gap == pytest.approx(2.9e-5, rel=0.05)


def test_moment_cost_against_monte_carlo(bench, bench_limit, grid):
    N = 5
    pol = build_policy("decentralized", bench, N, grid, limit=bench_limit)
    exact = policy_cost(bench, N, pol, grid)
    paths = simulate(bench, N, pol, grid, 3000, seed=4242, workers=4)
    pooled = paths.costs.mean(axis=1)
    assert abs(pooled.mean() - exact) <= 3 * pooled.std(ddof=1) / np.sqrt(len(pooled))


def test_moment_cost_converges_under_refinement(bench):
    vals = []
    for M in (25, 50, 100):
        g = TimeGrid(1.0, M)
        vals.append(policy_cost(bench, 3, build_policy("closed", bench, 3, g), g))
    order = _ode.observed_order(abs(vals[0] - vals[1]), abs(vals[1] - vals[2]))
    assert order >= 3.5


def test_nash_gap_decentralized(bench, grid, bench_limit):
    rep = nash_gap_study(bench, grid, [4, 8, 16, 32], limit=bench_limit)
    assert rep.passed and rep.verdict == "pass"
    assert all(g > 0 for g in rep.gaps)
    assert -1.4 <= rep.fit.slope <= -0.6
    assert rep.fit.slope == pytest.approx(-1.2802, abs=1e-3)


def test_nash_gap_decoupled_is_exact(grid):
    p = random_instance(np.random.default_rng(19), 2).replace(
        G=np.zeros((2, 2)), Gamma=np.zeros((2, 2)), Gammaf=np.zeros((2, 2)))
    rep = nash_gap_study(p, grid, [2, 4, 8])
    assert rep.verdict == "exact" and rep.passed
    assert max(abs(g) for g in rep.gaps) <= 1e-9


def test_nash_gap_closed_loop_self_test(bench, grid):
    rep = nash_gap_study(bench, grid, [2, 4, 8], PolicyKind.CENTRALIZED_CLOSED_LOOP, workers=3)
    assert rep.passed
    assert max(abs(g) for g in rep.gaps) <= 1e-8


def test_nash_gap_exports(tmp_path, bench, grid, bench_limit):
    rep = nash_gap_study(bench, grid, [4, 8], limit=bench_limit)
    lines = rep.write_csv(tmp_path / "gap.csv").read_text().splitlines()
    assert lines[0] == "N,J_policy,J_star,gap" and len(lines) == 3
    assert "slope" in rep.write_verdict(tmp_path / "v.json").read_text()


def test_value_purely_quadratic_without_noise_or_targets(grid):
    p = random_instance(np.random.default_rng(23), 2).replace(
        sigma=np.zeros(2), x0_cov=np.zeros((2, 2)), eta=np.zeros(2), etaf=np.zeros(2))
    N = 5
    sol = solve_closed_loop(p, N, grid)
    assert not np.any(sol.s1) and not np.any(sol.s2)
    x0 = p.x0_mean
    # all players start at x0, so S = (N-1) x0 in the quadratic value
    quad = x0 @ (sol.P1[0] + 2 * (N - 1) * sol.P2[0] + (N - 1) ** 2 * sol.P3[0]) @ x0
    assert value_function(sol, p) == pytest.approx(quad, rel=1e-14)
    exact = policy_cost(p, N, Policy.centralized(closed_loop_gains(sol, p), N), grid)
    assert quad == pytest.approx(exact, rel=1e-9)
