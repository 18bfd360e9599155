"""Player costs, the closed-loop value function, costate identities and Nash gaps.

The Nash-gap machinery works on the augmented state (x_i, z) where z is the
average of the other N-1 players.  With the opponents' linear law frozen,
(x_i, z) is a linear Gaussian system, so

* the cost of any linear law follows from forward mean/second-moment ODEs,
* the deviating player's best response is a time-varying LQR on (x_i, z).
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _ode
from .asymptotics import Fit, fit_loglog
from .errors import PolicyMismatchError
from .finite import ClosedLoopFiniteSolution, OpenLoopFiniteSolution, Provenance, solve_closed_loop
from .limit import LimitSolution, solve_limit
from .model import ModelParams, TimeGrid, require_valid
from .simulation import Policy, PolicyKind, PopulationPaths, build_policy
from .tolerances import DEFAULTS


@dataclass(frozen=True)
class CostEstimate:
    player: int
    mean: float
    stderr: float
    n_paths: int


def evaluate_cost(paths: PopulationPaths, params: ModelParams, player: int = 0) -> CostEstimate:
    """Average realised cost of one player (trapezoid running term plus terminal term)."""
    if not 0 <= player < paths.N:
        raise IndexError(f"player {player} out of range for N={paths.N}")
    c = paths.costs[:, player]
    se = float(c.std(ddof=1) / np.sqrt(len(c))) if len(c) > 1 else float("nan")
    return CostEstimate(player=player, mean=float(c.mean()), stderr=se, n_paths=len(c))


def value_function(sol: ClosedLoopFiniteSolution, params: ModelParams, N: int | None = None,
                   quadrature: str = "trapezoid") -> float:
    """Expected equilibrium cost of one player for i.i.d. initial states.

    With V_i = x_i'P1x_i + 2 x_i'P2 S + S'P3 S + 2 s1'x_i + 2 s2'S + c (S the
    sum of the other states), the expectation over the initial law gives the
    quadratic part below; ``c`` collects the noise, offset and target terms.
    """
    N = sol.N if N is None else N
    if N != sol.N:
        raise ValueError("N differs from the solution's player count")
    x0, S0 = params.x0_mean, params.x0_cov
    P1, P2, P3, s1, s2 = sol.P1[0], sol.P2[0], sol.P3[0], sol.s1[0], sol.s2[0]
    k = N - 1
    quad = (x0 @ P1 @ x0 + np.trace(P1 @ S0) + 2 * k * x0 @ P2 @ x0
            + k * np.trace(P3 @ S0) + k * k * x0 @ P3 @ x0
            + 2 * s1 @ x0 + 2 * k * s2 @ x0)
    U, sig, eta = params.upsilon, params.sigma, params.eta

    def integrand(P1, P3, s1, s2):
        noise = np.einsum("a,tab,b->t", sig, P1 + k * P3, sig)
        offs = np.einsum("ta,ab,tb->t", s1, U, s1) + 2 * k * np.einsum("ta,ab,tb->t", s2, U, s1)
        return noise - offs + eta @ params.Q @ eta

    vals = integrand(sol.P1, sol.P3, sol.s1, sol.s2)
    h = sol.grid.h
    if quadrature == "trapezoid":
        integral = _ode.trapezoid(vals, h)
    elif quadrature == "simpson":
        mid = sol.midpoints
        mids = integrand(mid["P1"], mid["P3"], mid["s1"], mid["s2"])
        integral = _ode.simpson_with_midpoints(vals, mids, h)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return float(quad + params.etaf @ params.Qf @ params.etaf + integral)


# ---------------------------------------------------------------------------
# costate reconstruction

@dataclass(frozen=True, eq=False)
class CostateCheck:
    player: int
    costate: np.ndarray
    residual: float
    terminal_residual: float
    scale: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance and self.terminal_residual <= self.tolerance


def reconstruct_costate(sol: OpenLoopFiniteSolution | ClosedLoopFiniteSolution, paths: PopulationPaths,
                        params: ModelParams, player: int = 0,
                        rel_tol: float = DEFAULTS["residual_rel"]) -> CostateCheck:
    """Rebuild player ``player``'s own costate along simulated paths and test stationarity.

    p = (P1 - P2) x_i + N P2 x^(N) + s1 must satisfy R u_i + B'p = 0 at every
    node and match the terminal condition at T.  Raises
    :class:`PolicyMismatchError` when the paths were generated by a different
    law or the identity fails.
    """
    if paths.storage_mode != "full":
        raise ValueError("costate reconstruction needs full storage mode")
    if paths.N != sol.N:
        raise PolicyMismatchError("policy/solution mismatch: player counts differ")
    N = sol.N
    x = paths.states[:, player]                       # (paths, M+1, n)
    xN = paths.mean_path                              # (paths, M+1, n)
    u = paths.controls[:, player]                     # (paths, M+1, m)
    P1, P2, s1 = sol.P1, sol.P2, sol.s1
    p = (np.einsum("tab,rtb->rta", P1 - P2, x) + N * np.einsum("tab,rtb->rta", P2, xN) + s1)
    Btp = p @ params.B
    Ru = u @ params.R.T
    res = float(np.max(np.linalg.norm(Ru + Btp, axis=-1)))
    if sol.kind == "closed":
        # stationarity written through the gains, independent of recorded controls
        RB = params.gain_map
        K1 = -np.einsum("ab,tbc->tac", RB, P1)
        K2 = -np.einsum("ab,tbc->tac", RB, P2)
        v = -s1 @ RB.T
        gain_u = np.einsum("tab,rtb->rta", K1 - K2, x) + N * np.einsum("tab,rtb->rta", K2, xN) + v
        res = max(res, float(np.max(np.linalg.norm(Btp + gain_u @ params.R.T, axis=-1))))
    scale = float(max(np.max(np.linalg.norm(Ru, axis=-1)), np.max(np.linalg.norm(Btp, axis=-1))))

    Gf, Qf = params.Gammaf, params.Qf
    own = np.eye(params.n) - Gf / N
    target = (x[:, -1] - xN[:, -1] @ Gf.T - params.etaf) @ Qf.T @ own
    term = float(np.max(np.linalg.norm(p[:, -1] - target, axis=-1)))
    tol = rel_tol * (1.0 + scale)

    expected = Provenance.OPEN_LOOP_FINITE if sol.kind == "open" else Provenance.CLOSED_LOOP_FINITE
    if paths.provenance is not expected:
        raise PolicyMismatchError(f"policy/solution mismatch (residual {res:.3g})", residual=res)
    if res > tol or term > tol:
        raise PolicyMismatchError(f"policy/solution mismatch (residual {max(res, term):.3g})",
                                  residual=max(res, term))
    return CostateCheck(player=player, costate=p, residual=res, terminal_residual=term, scale=scale, tolerance=tol)


# ---------------------------------------------------------------------------
# augmented (x_i, z) system

@dataclass(frozen=True, eq=False)
class _Augmented:
    """x_i and the others' average z under the opponents' frozen law.

    Arrays come as (nodes, midpoints) pairs.  ``drift``/``force`` describe
    the dynamics without the deviator's control; ``own_gain``/``own_offset``
    give the control the policy itself would apply.
    """

    dim: int
    Bhat: np.ndarray
    L: np.ndarray
    Lf: np.ndarray
    noise: np.ndarray
    mean0: np.ndarray
    second0: np.ndarray
    drift: tuple
    force: tuple
    own_gain: tuple
    own_offset: tuple


def _augment(params: ModelParams, N: int, policy: Policy) -> _Augmented:
    n, m = params.n, params.m
    A, G, B = params.A, params.G, params.B
    I = np.eye(n)
    ss = np.outer(params.sigma, params.sigma)
    x0, S0 = params.x0_mean, params.x0_cov

    if N == 1:
        def parts(own, mf, off, xbar):
            T = own.shape[0]
            drift = np.broadcast_to(A + G, (T, n, n)).copy()
            force = np.zeros((T, n))
            if policy.empirical:
                gain, offset = own + mf, off
            else:
                gain, offset = own, np.einsum("tab,tb->ta", mf, xbar) + off
            return drift, force, gain, offset
        L, Lf = I - params.Gamma, I - params.Gammaf
        noise = ss
        mean0 = x0.copy()
        second0 = S0 + np.outer(x0, x0)
    else:
        a, b = 1.0 / N, (N - 1) / N

        def parts(own, mf, off, xbar):
            T = own.shape[0]
            Bown = np.einsum("ab,tbc->tac", B, own)
            Bmf = np.einsum("ab,tbc->tac", B, mf)
            drift = np.zeros((T, 2 * n, 2 * n))
            drift[:, :n, :n] = A + a * G
            drift[:, :n, n:] = b * G
            force = np.zeros((T, 2 * n))
            if policy.empirical:
                drift[:, n:, :n] = a * G + a * Bmf
                drift[:, n:, n:] = A + b * G + Bown + b * Bmf
                force[:, n:] = off @ B.T
                gain = np.concatenate([own + a * mf, b * mf], axis=2)
                offset = off
            else:
                mfx = np.einsum("tab,tb->ta", mf, xbar)
                drift[:, n:, :n] = a * G
                drift[:, n:, n:] = A + b * G + Bown
                force[:, n:] = (mfx + off) @ B.T
                gain = np.concatenate([own, np.zeros_like(mf)], axis=2)
                offset = mfx + off
            return drift, force, gain, offset

        L = np.hstack([I - a * params.Gamma, -b * params.Gamma])
        Lf = np.hstack([I - a * params.Gammaf, -b * params.Gammaf])
        Z = np.zeros((n, n))
        noise = np.block([[ss, Z], [Z, ss / (N - 1)]])
        mean0 = np.concatenate([x0, x0])
        second0 = np.block([[S0, Z], [Z, S0 / (N - 1)]]) + np.outer(mean0, mean0)

    xb = policy.xbar if not policy.empirical else np.zeros((policy.own.shape[0], n))
    xbm = policy.xbar_mid if not policy.empirical else np.zeros((policy.own_mid.shape[0], n))
    dn, fn, gn, on = parts(policy.own, policy.mf, policy.offset, xb)
    dm, fm, gm, om = parts(policy.own_mid, policy.mf_mid, policy.offset_mid, xbm)
    dim = L.shape[1]
    Bhat = np.zeros((dim, m))
    Bhat[:n] = B
    return _Augmented(dim=dim, Bhat=Bhat, L=L, Lf=Lf, noise=noise, mean0=mean0, second0=second0,
                      drift=(dn, dm), force=(fn, fm), own_gain=(gn, gm), own_offset=(on, om))


def _zip_coef(*pairs):
    nodes = list(zip(*[p[0] for p in pairs]))
    mids = list(zip(*[p[1] for p in pairs]))
    return nodes, mids


def policy_cost(params: ModelParams, N: int, policy: Policy, grid: TimeGrid) -> float:
    """Exact expected cost of one player when everybody follows ``policy``.

    Mean and second moment of (x_i, z) are propagated forward with RK4 together
    with the running cost; no sampling is involved.
    """
    require_valid(params)
    aug = _augment(params, N, policy)
    d = aug.dim
    Q, R, eta = params.Q, params.R, params.eta
    LQL = aug.L.T @ Q @ aug.L
    etaQL = eta @ Q @ aug.L
    etaQeta = float(eta @ Q @ eta)
    Bh = aug.Bhat
    layout = _ode.Layout([("mu", (d,)), ("S", (d, d)), ("J", (1,))])

    def rhs(y, c):
        F, f, K, k = c
        Fc = F + Bh @ K
        fc = f + Bh @ k
        blk = layout.unpack(y)
        mu, S = blk["mu"], blk["S"]
        dmu = Fc @ mu + fc
        fm = np.outer(fc, mu)
        dS = Fc @ S + S @ Fc.T + fm + fm.T + aug.noise
        KRK = K.T @ R @ K
        rate = (np.sum(LQL * S) - 2 * etaQL @ mu + etaQeta
                + np.sum(KRK * S) + 2 * (k @ R @ K) @ mu + k @ R @ k)
        return np.concatenate([dmu, dS.ravel(), [rate]])

    coef = _zip_coef(aug.drift, aug.force, aug.own_gain, aug.own_offset)
    y0 = layout.pack({"mu": aug.mean0, "S": aug.second0, "J": [0.0]})
    Y = _ode.rk4_forward(rhs, y0, grid.nodes, coef, threshold=DEFAULTS["sim_blowup_norm"],
                         what="moment propagation blow-up")
    end = layout.unpack(Y[-1])
    Lf, Qf, ef = aug.Lf, params.Qf, params.etaf
    terminal = np.sum(Lf.T @ Qf @ Lf * end["S"]) - 2 * ef @ Qf @ Lf @ end["mu"] + ef @ Qf @ ef
    return float(end["J"][0] + terminal)


@dataclass(frozen=True, eq=False)
class BestResponseSolution:
    grid: TimeGrid
    N: int
    Pi: np.ndarray          # (M+1, d, d)
    r: np.ndarray           # (M+1, d)
    c: np.ndarray           # (M+1,)
    gain: np.ndarray        # (M+1, m, d) on (x_i, z)
    offset: np.ndarray      # (M+1, m)
    cost: float


def best_response(params: ModelParams, N: int, opponents: Policy, grid: TimeGrid) -> BestResponseSolution:
    """Optimal cost and feedback of one player against opponents frozen at ``opponents``.

    Value = xi'Pi xi + 2 r'xi + c with
        -Pi' = F'Pi + Pi F - Pi Bh R^-1 Bh' Pi + L'QL
        -r'  = (F - Bh R^-1 Bh' Pi)' r + Pi f - L'Q eta
        -c'  = tr(Pi W) + 2 r'f - r'Bh R^-1 Bh' r + eta'Q eta
    """
    require_valid(params)
    if N < 1:
        raise ValueError("N must be positive")
    aug = _augment(params, N, opponents)
    d = aug.dim
    Q, eta = params.Q, params.eta
    Bh = aug.Bhat
    RBh = np.linalg.solve(params.R, Bh.T)
    Uh = Bh @ RBh
    LQL = aug.L.T @ Q @ aug.L
    LQeta = aug.L.T @ Q @ eta
    etaQeta = float(eta @ Q @ eta)
    layout = _ode.Layout([("Pi", (d, d)), ("r", (d,)), ("c", (1,))])

    def rhs(y, coef):
        F, f = coef
        blk = layout.unpack(y)
        Pi, r = blk["Pi"], blk["r"]
        dPi = -(F.T @ Pi + Pi @ F - Pi @ Uh @ Pi + LQL)
        dr = -((F - Uh @ Pi).T @ r + Pi @ f - LQeta)
        dc = -(np.sum(Pi * aug.noise) + 2 * r @ f - r @ Uh @ r + etaQeta)
        return np.concatenate([dPi.ravel(), dr, [dc]])

    def symmetrise(y):
        y = y.copy()
        P = y[: d * d].reshape(d, d)
        y[: d * d] = (0.5 * (P + P.T)).ravel()
        return y

    Lf, Qf, ef = aug.Lf, params.Qf, params.etaf
    yT = layout.pack({"Pi": Lf.T @ Qf @ Lf, "r": -Lf.T @ Qf @ ef, "c": [ef @ Qf @ ef]})
    Y = _ode.rk4_backward(
        rhs, yT, grid.nodes, _zip_coef(aug.drift, aug.force), layout=layout, guarded=("Pi",),
        threshold=DEFAULTS["blowup_norm"], what="best response non-solvability", post=symmetrise,
    )
    blk = layout.unpack(Y)
    Pi, r, c = blk["Pi"], blk["r"], blk["c"][:, 0]
    cost = float(np.sum(Pi[0] * aug.second0) + 2 * r[0] @ aug.mean0 + c[0])
    return BestResponseSolution(
        grid=grid, N=N, Pi=np.ascontiguousarray(Pi), r=np.ascontiguousarray(r), c=np.ascontiguousarray(c),
        gain=-np.einsum("ab,tbc->tac", RBh, Pi), offset=-r @ RBh.T, cost=cost,
    )


# ---------------------------------------------------------------------------

@dataclass
class NashGapReport:
    policy: PolicyKind
    rows: list = field(default_factory=list)
    fit: Fit | None = None
    passed: bool = False
    verdict: str = ""

    @property
    def Ns(self):
        return [r["N"] for r in self.rows]

    @property
    def gaps(self):
        return [r["gap"] for r in self.rows]

    def to_json(self) -> dict:
        return {
            "policy": self.policy.value, "verdict": self.verdict, "pass": self.passed,
            "slope": self.fit.slope if self.fit else None, "r2": self.fit.r2 if self.fit else None,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["N", "J_policy", "J_star", "gap"])
            for r in self.rows:
                writer.writerow([r["N"]] + [format(r[k], ".17g") for k in ("J_policy", "J_star", "gap")])
        return path

    def write_verdict(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")
        return path


def nash_gap_study(params: ModelParams, grid: TimeGrid, Ns, policy: PolicyKind | str = PolicyKind.DECENTRALIZED,
                   *, limit: LimitSolution | None = None, workers: int = 1,
                   tolerances: dict | None = None) -> NashGapReport:
    """J_i under ``policy`` minus the best-response cost, for each N, with a log-log fit.

    For the decentralized law the gap should decay like 1/N; for the
    centralized closed-loop law it should vanish at every N.
    """
    tol = dict(DEFAULTS, **(tolerances or {}))
    if isinstance(policy, str):
        policy = PolicyKind.parse(policy)
    if limit is None:
        limit = solve_limit(params, grid)

    def one(N):
        pol = build_policy(policy, params, N, grid, limit=limit)
        J = policy_cost(params, N, pol, grid)
        Js = best_response(params, N, pol, grid).cost
        return {"N": int(N), "J_policy": J, "J_star": Js, "gap": J - Js}

    Ns = [int(N) for N in Ns]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, Ns))
    else:
        rows = [one(N) for N in Ns]
    report = NashGapReport(policy=policy, rows=rows)
    floor = tol["nash_gap_floor"]
    nonneg = all(r["gap"] >= floor for r in rows)
    if policy is PolicyKind.DECENTRALIZED:
        positive = all(r["gap"] > 0 for r in rows)
        if all(abs(r["gap"]) <= 1e-9 for r in rows):
            # decoupled game: the limit law is already optimal at every N
            report.passed = True
            report.verdict = "exact"
        elif positive and len(rows) >= 2:
            report.fit = fit_loglog(Ns, [r["gap"] for r in rows])
            lo, hi = tol["nash_slope_band"]
            report.passed = lo <= report.fit.slope <= hi and report.fit.r2 >= tol["nash_r2_min"]
        report.passed = report.passed and nonneg
    else:
        report.passed = nonneg and all(abs(r["gap"]) <= -floor for r in rows) \
            if policy is PolicyKind.CENTRALIZED_CLOSED_LOOP else nonneg
    report.verdict = report.verdict or ("pass" if report.passed else "fail")
    return report
