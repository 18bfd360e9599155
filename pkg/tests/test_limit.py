import numpy as np
import pytest
from scipy.integrate import solve_ivp

from lqmfg import _ode
from lqmfg.errors import SolvabilityError
from lqmfg.limit import decentralized_law, solve_limit
from lqmfg.model import TimeGrid

from conftest import random_instance, scalar_game

EIGHT = ("P1inf", "P2inf", "s1inf", "P3inf_check", "P4inf_check", "s2inf_check", "P3inf_hat", "s2inf_hat")


def test_tanh_closed_form(grid):
    p = scalar_game(Q=1.0)
    lim = solve_limit(p, grid)
    assert np.max(np.abs(lim.P1inf[:, 0, 0] - np.tanh(1.0 - grid.nodes))) < 1e-8
    assert not np.any(lim.P2inf)


def test_decoupled_limit(grid):
    rng = np.random.default_rng(12)
    p = random_instance(rng, 2).replace(G=np.zeros((2, 2)), Gamma=np.zeros((2, 2)), Gammaf=np.zeros((2, 2)))
    lim = solve_limit(p, grid)
    assert not np.any(lim.P2inf) and not np.any(lim.K2inf)
    # mean under the single-agent closed loop, independent integrator
    K = lambda t: np.array([np.interp(t, grid.nodes, lim.K1inf[:, 0, j]) for j in range(2)])[None, :]
    phi = lambda t: np.interp(t, grid.nodes, lim.phi1inf[:, 0])
    f = lambda t, x: (p.A + p.B @ K(t)) @ x + p.B[:, 0] * phi(t)
    ref = solve_ivp(f, (0, 1), p.x0_mean, t_eval=grid.nodes, rtol=1e-10, atol=1e-12).y.T
    # linear interpolation of the gains limits the reference to O(h^2)
    assert np.max(np.abs(ref - lim.xbar)) < 1e-4


def test_zero_targets_give_zero_offsets(grid):
    p = random_instance(np.random.default_rng(5), 2).replace(eta=np.zeros(2), etaf=np.zeros(2))
    lim = solve_limit(p, grid)
    for name in ("s1inf", "phi1inf", "s2inf_check", "s2inf_hat"):
        assert not np.any(getattr(lim, name)), name


def test_zero_data(grid):
    p = scalar_game(A=0.4, G=0.3, Gamma=0.2, eta=1.0, etaf=2.0)
    lim = solve_limit(p, grid)
    for name in EIGHT + ("K1inf", "K2inf", "phi1inf"):
        assert not np.any(getattr(lim, name)), name


def test_auxiliary_offsets_agree_without_targets(grid):
    p = random_instance(np.random.default_rng(6), 2).replace(Gamma=np.zeros((2, 2)), eta=np.zeros(2), etaf=np.zeros(2))
    lim = solve_limit(p, grid)
    np.testing.assert_array_equal(lim.s2inf_check, lim.s2inf_hat)
    assert not np.any(lim.s2inf_check)


def test_invariants(bench, bench_limit, grid):
    lim = bench_limit
    assert np.array_equal(lim.xbar[0], bench.x0_mean)
    P = lim.P1inf
    assert np.all(np.abs(P - np.swapaxes(P, 1, 2)) <= 1e-8 * (1 + np.abs(P)))
    for name in EIGHT + ("xbar",):
        assert np.all(np.isfinite(getattr(lim, name)))


def test_symmetry_of_P1inf_random(grid):
    p = random_instance(np.random.default_rng(14), 3)
    P = solve_limit(p, grid).P1inf
    asym = np.linalg.norm(P - np.swapaxes(P, 1, 2), axis=(1, 2))
    assert np.all(asym <= 1e-8 * (1 + np.linalg.norm(P, axis=(1, 2))))


def test_P1inf_monotone_in_Qf(grid):
    for seed in range(4):
        base = random_instance(np.random.default_rng(seed), 1)
        low = solve_limit(base.replace(Qf=0.0), grid).P1inf
        high = solve_limit(base.replace(Qf=1.0), grid).P1inf
        assert np.all(high >= low - 1e-14)


def test_gain_identity_independent_product(bench, bench_limit):
    lim = bench_limit
    Rinv = np.linalg.inv(bench.R)
    for k in (0, 33, 200):
        K1 = -(Rinv @ bench.B.T) @ lim.P1inf[k]
        np.testing.assert_allclose(lim.K1inf[k], K1, rtol=1e-14)
        np.testing.assert_allclose(lim.K2inf[k], -(Rinv @ bench.B.T) @ lim.P2inf[k], rtol=1e-14)
        np.testing.assert_allclose(lim.phi1inf[k], -(Rinv @ bench.B.T) @ lim.s1inf[k], rtol=1e-14)


def test_matches_adaptive_solver_on_random_instance():
    """Independent check of every limit equation with scipy's DOP853."""
    p = random_instance(np.random.default_rng(40), 2)
    lim = solve_limit(p, TimeGrid(p.T, 200))
    U, A, G, Q, Gm = p.upsilon, p.A, p.G, p.Q, p.Gamma
    AG = A + G

    def rhs(t, y):
        P1, P2, P3c, P4c, P3h = (y[i * 4:(i + 1) * 4].reshape(2, 2) for i in range(5))
        s1, s2c, s2h = y[20:22], y[22:24], y[24:26]
        d = [
            P1 @ U @ P1 - P1 @ A - A.T @ P1 - Q,
            P1 @ U @ P2 + P2 @ U @ P1 + P2 @ U @ P2 - A.T @ P2 - P2 @ AG - P1 @ G + Q @ Gm,
            P4c @ U @ P2 + P3c @ U @ P1 + P3c @ U @ P2 - P4c @ G - G.T @ P2 - P3c @ AG - AG.T @ P3c - Gm.T @ Q @ Gm,
            P4c @ U @ P1 - P4c @ A - AG.T @ P4c - G.T @ P1 + Gm.T @ Q,
            P2.T @ U @ P2 + P3h @ U @ (P1 + P2) + (P1 + P2.T) @ U @ P3h - P3h @ AG - AG.T @ P3h
            - P2.T @ G - G.T @ P2 - Gm.T @ Q @ Gm,
        ]
        ds1 = -(A.T - P1 @ U - P2 @ U) @ s1 + Q @ p.eta
        ds2c = -(G.T - P4c @ U - P3c @ U) @ s1 - AG.T @ s2c - Gm.T @ Q @ p.eta
        ds2h = -(AG - U @ P1 - U @ P2).T @ s2h - (G - U @ P2 - U @ P3h).T @ s1 - Gm.T @ Q @ p.eta
        return np.concatenate([x.ravel() for x in d] + [ds1, ds2c, ds2h])

    Qf, Gf, ef = p.Qf, p.Gammaf, p.etaf
    yT = np.concatenate([Qf.ravel(), (-Qf @ Gf).ravel(), (Gf.T @ Qf @ Gf).ravel(), (-Gf.T @ Qf).ravel(),
                         (Gf.T @ Qf @ Gf).ravel(), -Qf @ ef, Gf.T @ Qf @ ef, Gf.T @ Qf @ ef])
    y0 = solve_ivp(rhs, (p.T, 0), yT, method="DOP853", rtol=1e-12, atol=1e-13).y[:, -1]
    got = [lim.P1inf, lim.P2inf, lim.P3inf_check, lim.P4inf_check, lim.P3inf_hat]
    for i, traj in enumerate(got):
        np.testing.assert_allclose(traj[0].ravel(), y0[i * 4:(i + 1) * 4], rtol=1e-8, atol=1e-9)
    for j, traj in enumerate([lim.s1inf, lim.s2inf_check, lim.s2inf_hat]):
        np.testing.assert_allclose(traj[0], y0[20 + 2 * j:22 + 2 * j], rtol=1e-8, atol=1e-9)


def test_step_halving_order_all_eight(bench):
    Ms = (50, 100, 200)
    sols = [solve_limit(bench, TimeGrid(1.0, M)) for M in Ms]
    for name in EIGHT + ("xbar",):
        a, b, c = [getattr(s, name)[:: M // Ms[0]] for s, M in zip(sols, Ms)]
        assert _ode.observed_order(np.abs(a - b).max(), np.abs(b - c).max()) >= 3.5, name


def test_limit_blow_up():
    p = scalar_game(Q=-100.0, T=5.0)
    with pytest.raises(SolvabilityError, match="limit non-solvability") as exc:
        solve_limit(p, TimeGrid(5.0, 500))
    assert exc.value.escape_time == pytest.approx(5.0 - np.pi / 20, abs=0.02)


def test_decentralized_law_and_summary(tmp_path, bench_limit):
    law = decentralized_law(bench_limit)
    assert law.K1 is bench_limit.K1inf
    path = bench_limit.write_summary_csv(tmp_path / "summary.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,K1inf_0_0,K2inf_0_0,phi1inf_0,xbar_0"
    assert len(lines) == bench_limit.grid.M + 2
