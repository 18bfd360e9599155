"""Infinite-population limit: Riccati pair, offsets, auxiliaries, mean field.

The eight limit trajectories form a triangular system (the standard Riccati
equation for P1, then the asymmetric one for P2, then linear equations driven
by both), so they are integrated together in one backward RK4 sweep.  The
mean field is then integrated forward under the limit gains.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _ode
from .finite import FeedbackLaw, Provenance, write_trajectories
from .model import ModelParams, TimeGrid, require_valid
from .tolerances import DEFAULTS

_MATRICES = ("P1inf", "P2inf", "P3inf_check", "P4inf_check", "P3inf_hat")
_VECTORS = ("s1inf", "s2inf_check", "s2inf_hat")


@dataclass(frozen=True, eq=False)
class LimitSolution:
    grid: TimeGrid
    P1inf: np.ndarray
    P2inf: np.ndarray
    s1inf: np.ndarray
    P3inf_check: np.ndarray
    P4inf_check: np.ndarray
    s2inf_check: np.ndarray
    P3inf_hat: np.ndarray
    s2inf_hat: np.ndarray
    K1inf: np.ndarray
    K2inf: np.ndarray
    phi1inf: np.ndarray
    xbar: np.ndarray
    midpoints: dict = field(repr=False)

    def trajectories(self) -> dict:
        names = _MATRICES[:2] + ("s1inf",) + _MATRICES[2:4] + ("s2inf_check", "P3inf_hat", "s2inf_hat")
        return {name: getattr(self, name) for name in names}

    def write_csv(self, directory, prefix: str = "limit") -> list[Path]:
        return write_trajectories(self.grid, self.trajectories(), directory, prefix)

    def write_summary_csv(self, path) -> Path:
        """t, K1inf, K2inf, phi1inf and xbar entries side by side."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        m, n = self.K1inf.shape[1:]
        header = ["t"]
        header += [f"K1inf_{i}_{j}" for i in range(m) for j in range(n)]
        header += [f"K2inf_{i}_{j}" for i in range(m) for j in range(n)]
        header += [f"phi1inf_{i}" for i in range(m)]
        header += [f"xbar_{i}" for i in range(n)]
        M1 = self.grid.M + 1
        table = np.hstack([
            self.grid.nodes[:, None], self.K1inf.reshape(M1, -1), self.K2inf.reshape(M1, -1),
            self.phi1inf, self.xbar,
        ])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in table:
                writer.writerow([format(x, ".17g") for x in row])
        return path


def _limit_rhs(params: ModelParams, layout: _ode.Layout):
    A, G, Q, Gm, eta = params.A, params.G, params.Q, params.Gamma, params.eta
    U = params.upsilon
    AG = A + G
    QGm = Q @ Gm
    GtQ = Gm.T @ Q
    GtQG = Gm.T @ Q @ Gm
    Qeta = Q @ eta
    GtQeta = GtQ @ eta

    def rhs(y, _coef):
        b = layout.unpack(y)
        P1, P2, s1 = b["P1inf"], b["P2inf"], b["s1inf"]
        P3c, P4c, s2c = b["P3inf_check"], b["P4inf_check"], b["s2inf_check"]
        P3h, s2h = b["P3inf_hat"], b["s2inf_hat"]
        UP1, UP2 = U @ P1, U @ P2
        dP1 = P1 @ UP1 - P1 @ A - A.T @ P1 - Q
        dP2 = P1 @ UP2 + P2 @ UP1 + P2 @ UP2 - A.T @ P2 - P2 @ AG - P1 @ G + QGm
        ds1 = -(A.T - P1 @ U - P2 @ U) @ s1 + Qeta
        dP3c = (P4c @ UP2 + P3c @ UP1 + P3c @ UP2 - P4c @ G - G.T @ P2
                - P3c @ AG - AG.T @ P3c - GtQG)
        dP4c = P4c @ UP1 - P4c @ A - AG.T @ P4c - G.T @ P1 + GtQ
        ds2c = -(G.T - P4c @ U - P3c @ U) @ s1 - AG.T @ s2c - GtQeta
        dP3h = (P2.T @ UP2 + P3h @ U @ (P1 + P2) + (P1 + P2.T) @ U @ P3h
                - P3h @ AG - AG.T @ P3h - P2.T @ G - G.T @ P2 - GtQG)
        ds2h = -(AG - UP1 - UP2).T @ s2h - (G - UP2 - U @ P3h).T @ s1 - GtQeta
        return np.concatenate([
            dP1.ravel(), dP2.ravel(), dP3c.ravel(), dP4c.ravel(), dP3h.ravel(), ds1, ds2c, ds2h,
        ])

    return rhs


def _terminal(params: ModelParams) -> dict:
    Qf, Gf, ef = params.Qf, params.Gammaf, params.etaf
    GtQf = Gf.T @ Qf
    return {
        "P1inf": Qf,
        "P2inf": -Qf @ Gf,
        "P3inf_check": GtQf @ Gf,
        "P4inf_check": -GtQf,
        "P3inf_hat": GtQf @ Gf,
        "s1inf": -Qf @ ef,
        "s2inf_check": GtQf @ ef,
        "s2inf_hat": GtQf @ ef,
    }


def solve_limit(params: ModelParams, grid: TimeGrid) -> LimitSolution:
    """Solve every limit equation, the limit gains, and the mean field.

    Raises :class:`SolvabilityError` ("limit non-solvability") with the
    escape time if the Riccati pair blows up on the grid.
    """
    require_valid(params)
    n = params.n
    layout = _ode.Layout([(name, (n, n)) for name in _MATRICES] + [(name, (n,)) for name in _VECTORS])
    rhs = _limit_rhs(params, layout)
    Y = _ode.rk4_backward(
        rhs, layout.pack(_terminal(params)), grid.nodes, layout=layout,
        guarded=layout.names, threshold=DEFAULTS["blowup_norm"], what="limit non-solvability",
    )
    F = _ode.node_derivatives(rhs, Y)
    traj = {k: np.ascontiguousarray(v) for k, v in layout.unpack(Y).items()}
    mids = {k: np.ascontiguousarray(v) for k, v in layout.unpack(_ode.hermite_midpoints(Y, F, grid.h)).items()}

    RB = params.gain_map
    K1 = -np.einsum("ab,tbc->tac", RB, traj["P1inf"])
    K2 = -np.einsum("ab,tbc->tac", RB, traj["P2inf"])
    phi = -traj["s1inf"] @ RB.T
    K1m = -np.einsum("ab,tbc->tac", RB, mids["P1inf"])
    K2m = -np.einsum("ab,tbc->tac", RB, mids["P2inf"])
    phim = -mids["s1inf"] @ RB.T

    AG, B = params.A + params.G, params.B
    drift = AG + np.einsum("ab,tbc->tac", B, K1 + K2)
    drift_mid = AG + np.einsum("ab,tbc->tac", B, K1m + K2m)
    force = phi @ B.T
    force_mid = phim @ B.T

    def mean_rhs(x, c):
        D, f = c
        return D @ x + f

    coef_nodes = list(zip(drift, force))
    coef_mid = list(zip(drift_mid, force_mid))
    xbar = _ode.rk4_forward(
        mean_rhs, np.array(params.x0_mean), grid.nodes, (coef_nodes, coef_mid),
        threshold=DEFAULTS["blowup_norm"], what="limit non-solvability (mean field)",
    )
    xbar[0] = params.x0_mean
    dx = np.einsum("tab,tb->ta", drift, xbar) + force
    mids["xbar"] = _ode.hermite_midpoints(xbar, dx, grid.h)
    mids["K1inf"], mids["K2inf"], mids["phi1inf"] = K1m, K2m, phim

    return LimitSolution(grid=grid, K1inf=K1, K2inf=K2, phi1inf=phi, xbar=xbar, midpoints=mids, **traj)


def decentralized_law(limit: LimitSolution) -> FeedbackLaw:
    """u_i = K1inf x_i + K2inf xbar(t) + phi1inf(t)."""
    mid = limit.midpoints
    return FeedbackLaw(
        grid=limit.grid, K1=limit.K1inf, K2=limit.K2inf, v=limit.phi1inf,
        provenance=Provenance.LIMIT, N=None,
        K1_mid=mid["K1inf"], K2_mid=mid["K2inf"], v_mid=mid["phi1inf"],
    )
