"""Finite-N coupled Riccati systems and their feedback laws.

Both systems are integrated backward from T with classical RK4 on the
shared grid.  The open-loop system carries four matrices and two offsets;
the closed-loop system three matrices (the fourth equals the transpose of
the second) and two offsets.  Player i's decoupled costate reads

    p_i^i = P1 x_i + P2 sum_{j != i} x_j + s1
    p_j^i = P4 x_i + P3 sum_{k != i} x_k + s2      (open loop)
    p_j^i = P2^T x_i + P3 sum_{k != i} x_k + s2    (closed loop)
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import _ode
from .errors import LQMFGError
from .model import ModelParams, TimeGrid, require_valid
from .tolerances import DEFAULTS


class Provenance(enum.Enum):
    OPEN_LOOP_FINITE = "OpenLoopFinite"
    CLOSED_LOOP_FINITE = "ClosedLoopFinite"
    LIMIT = "Limit"


@dataclass(frozen=True, eq=False)
class _FiniteSolution:
    N: int
    grid: TimeGrid
    midpoints: dict = field(repr=False)

    def matrix_names(self):
        return [name for name in ("P1", "P2", "P3", "P4") if hasattr(self, name)]

    def trajectories(self) -> dict:
        return {name: getattr(self, name) for name in self.matrix_names() + ["s1", "s2"]}

    def write_csv(self, directory, prefix: str) -> list[Path]:
        return write_trajectories(self.grid, self.trajectories(), directory, prefix)


@dataclass(frozen=True, eq=False)
class OpenLoopFiniteSolution(_FiniteSolution):
    P1: np.ndarray = None
    P2: np.ndarray = None
    P3: np.ndarray = None
    P4: np.ndarray = None
    s1: np.ndarray = None
    s2: np.ndarray = None
    kind = "open"


@dataclass(frozen=True, eq=False)
class ClosedLoopFiniteSolution(_FiniteSolution):
    P1: np.ndarray = None
    P2: np.ndarray = None
    P3: np.ndarray = None
    s1: np.ndarray = None
    s2: np.ndarray = None
    symmetry_drift: float = 0.0
    kind = "closed"


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """u_i = K1 x_i + K2 (sum of the others) + v for finite laws.

    For ``Provenance.LIMIT`` the second gain multiplies the mean field
    x̄(t) instead.  Midpoint samples ride along so that downstream RK4
    integrations never interpolate.
    """

    grid: TimeGrid
    K1: np.ndarray
    K2: np.ndarray
    v: np.ndarray
    provenance: Provenance
    N: int | None = None
    K1_mid: np.ndarray = field(default=None, repr=False)
    K2_mid: np.ndarray = field(default=None, repr=False)
    v_mid: np.ndarray = field(default=None, repr=False)

    def write_csv(self, directory, prefix: str) -> list[Path]:
        return write_trajectories(self.grid, {"K1": self.K1, "K2": self.K2, "v": self.v}, directory, prefix)


def write_trajectories(grid: TimeGrid, trajectories: dict, directory, prefix: str) -> list[Path]:
    """One CSV per trajectory: t followed by row-major entries."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, values in trajectories.items():
        values = np.asarray(values)
        flat = values.reshape(values.shape[0], -1)
        if values.ndim == 3:
            header = [f"{name}_{i}_{j}" for i in range(values.shape[1]) for j in range(values.shape[2])]
        else:
            header = [f"{name}_{i}" for i in range(flat.shape[1])]
        path = directory / f"{prefix}_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + header)
            for t, row in zip(grid.nodes, flat):
                writer.writerow([format(t, ".17g")] + [format(x, ".17g") for x in row])
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# terminal data shared by both systems

def terminal_values(params: ModelParams, N: int) -> dict:
    Qf, Gf, ef = params.Qf, params.Gammaf, params.etaf
    GtQ = Gf.T @ Qf
    QG = Qf @ Gf
    GtQG = Gf.T @ Qf @ Gf
    return {
        "P1": Qf - GtQ / N - QG / N + GtQG / N**2,
        "P2": GtQG / N**2 - QG / N,
        "P3": GtQG / N**2,
        "P4": -GtQ / N + GtQG / N**2,
        "s1": (GtQ / N - Qf) @ ef,
        "s2": GtQ @ ef / N,
    }


class _Coefficients:
    """Constant products reused in every right-hand-side evaluation."""

    def __init__(self, params: ModelParams, N: int):
        n = params.n
        self.n = n
        self.N = N
        self.A = params.A
        self.G = params.G
        self.U = params.upsilon
        self.c = (N - 1) / N
        self.Gn = params.G / N
        self.AGn = params.A + self.Gn
        self.AcG = params.A + self.c * params.G
        Q, Gm, eta = params.Q, params.Gamma, params.eta
        self.QG_N = Q @ Gm / N
        self.GtQ_N = Gm.T @ Q / N
        self.GtQG_N2 = Gm.T @ Q @ Gm / N**2
        self.Q = Q
        self.src_s1 = (Q - self.GtQ_N) @ eta
        self.src_s2 = -self.GtQ_N @ eta


def _open_rhs(C: _Coefficients, layout: _ode.Layout):
    U, N, c = C.U, C.N, C.c

    def rhs(y, _coef):
        b = layout.unpack(y)
        P1, P2, P3, P4, s1, s2 = b["P1"], b["P2"], b["P3"], b["P4"], b["s1"], b["s2"]
        UP1, UP2 = U @ P1, U @ P2
        dP1 = (P1 @ UP1 + (N - 1) * P2 @ UP2 - P1 @ C.AGn - C.AGn.T @ P1
               - c * P2 @ C.G - c * C.G.T @ P4 - C.Q + C.GtQ_N + C.QG_N - C.GtQG_N2)
        dP2 = (P1 @ UP2 + P2 @ UP1 + (N - 2) * P2 @ UP2 - P1 @ C.Gn - C.AGn.T @ P2
               - P2 @ C.AcG - c * C.G.T @ P3 + C.QG_N - C.GtQG_N2)
        dP3 = (P4 @ UP2 + P3 @ UP1 + (N - 2) * P3 @ UP2 - P3 @ C.AcG - P4 @ C.Gn
               - C.AcG.T @ P3 - C.Gn.T @ P2 - C.GtQG_N2)
        dP4 = (P4 @ UP1 + (N - 1) * P3 @ UP2 - P4 @ C.AGn + C.GtQ_N - C.AcG.T @ P4
               - c * P3 @ C.G - C.Gn.T @ P1 - C.GtQG_N2)
        drift1 = C.AGn - U @ P1.T - (N - 1) * U @ P2.T
        drift2 = C.Gn - U @ P4.T - (N - 1) * U @ P3.T
        ds1 = -drift1.T @ s1 - c * C.G.T @ s2 + C.src_s1
        ds2 = -drift2.T @ s1 - C.AcG.T @ s2 + C.src_s2
        return np.concatenate([dP1.ravel(), dP2.ravel(), dP3.ravel(), dP4.ravel(), ds1, ds2])

    return rhs


def _closed_rhs(C: _Coefficients, layout: _ode.Layout):
    U, N, c = C.U, C.N, C.c

    def rhs(y, _coef):
        b = layout.unpack(y)
        P1, P2, P3, s1, s2 = b["P1"], b["P2"], b["P3"], b["s1"], b["s2"]
        P2t = P2.T
        UP2 = U @ P2
        dP1 = (P1 @ U @ P1 + (N - 1) * P2 @ UP2 + (N - 1) * P2t @ U @ P2t
               - P1 @ C.AGn - C.AGn.T @ P1 - c * P2 @ C.G - c * C.G.T @ P2t
               - C.Q + C.QG_N + C.GtQ_N - C.GtQG_N2)
        dP2 = (P1 @ UP2 + (N - 1) * P2t @ U @ P3 + P2 @ U @ P1 + (N - 2) * P2 @ UP2
               - P1 @ C.Gn - c * C.G.T @ P3 - P2 @ C.AcG - C.AGn.T @ P2
               - C.GtQG_N2 + C.QG_N)
        dP3 = (P1 @ U @ P3 + (N - 2) * P3 @ UP2 + (N - 2) * P2t @ U @ P3 + P3 @ U @ P1
               + P2t @ UP2 - P2t @ C.Gn - C.Gn.T @ P2 - P3 @ C.AcG - C.AcG.T @ P3
               - C.GtQG_N2)
        drift1 = C.AGn - U @ P1 - (N - 1) * U @ P2t
        drift2 = C.Gn - U @ P2 - (N - 1) * U @ P3
        drift3 = C.AcG - U @ P1 - (N - 2) * U @ P2
        ds1 = -drift1.T @ s1 - (N - 1) * (C.Gn - U @ P2).T @ s2 + C.src_s1
        ds2 = -drift2.T @ s1 - drift3.T @ s2 + C.src_s2
        return np.concatenate([dP1.ravel(), dP2.ravel(), dP3.ravel(), ds1, ds2])

    return rhs


def _check_N(N):
    if int(N) != N or N < 1:
        raise ValueError(f"player count must be an integer >= 1, got {N}")
    return int(N)


def _solve(params, N, grid, names, make_rhs, post=None):
    require_valid(params)
    N = _check_N(N)
    n = params.n
    shapes = [(name, (n, n)) for name in names] + [("s1", (n,)), ("s2", (n,))]
    layout = _ode.Layout(shapes)
    C = _Coefficients(params, N)
    rhs = make_rhs(C, layout)
    y_T = layout.pack(terminal_values(params, N))
    if post is not None:
        y_T = post(y_T)
    Y = _ode.rk4_backward(
        rhs, y_T, grid.nodes, layout=layout, guarded=names,
        threshold=DEFAULTS["blowup_norm"], what="finite-time non-solvability", post=post,
    )
    F = _ode.node_derivatives(rhs, Y)
    mids = layout.unpack(_ode.hermite_midpoints(Y, F, grid.h))
    return layout.unpack(Y), {k: np.ascontiguousarray(v) for k, v in mids.items()}


def solve_open_loop(params: ModelParams, N: int, grid: TimeGrid) -> OpenLoopFiniteSolution:
    """Backward RK4 solve of the four-matrix open-loop system.

    Raises :class:`SolvabilityError` carrying the escape time when any
    matrix norm exceeds the blow-up threshold.
    """
    traj, mids = _solve(params, N, grid, ("P1", "P2", "P3", "P4"), _open_rhs)
    return OpenLoopFiniteSolution(N=int(N), grid=grid, midpoints=mids,
                                  **{k: np.ascontiguousarray(v) for k, v in traj.items()})


class SymmetryError(LQMFGError, AssertionError):
    pass


def solve_closed_loop(params: ModelParams, N: int, grid: TimeGrid,
                      tol_sym: float = DEFAULTS["sym_rel"]) -> ClosedLoopFiniteSolution:
    """Backward RK4 solve of the three-matrix closed-loop system.

    P1 and P3 are re-symmetrised after every step; the drift removed at each
    step is tracked and must stay below ``tol_sym * (1 + |P|)``.
    """
    n = params.n
    sl1 = slice(0, n * n)
    sl3 = slice(2 * n * n, 3 * n * n)
    worst = [0.0]

    def symmetrise(y):
        y = y.copy()
        for sl in (sl1, sl3):
            P = y[sl].reshape(n, n)
            drift = float(np.linalg.norm(P - P.T))
            scale = 1.0 + float(np.linalg.norm(P))
            if not np.isfinite(drift):
                return y
            worst[0] = max(worst[0], drift / scale)
            if drift > tol_sym * scale:
                raise SymmetryError(f"closed-loop symmetry drift {drift:.3g} exceeds tolerance")
            y[sl] = (0.5 * (P + P.T)).ravel()
        return y

    traj, mids = _solve(params, N, grid, ("P1", "P2", "P3"), _closed_rhs, post=symmetrise)
    return ClosedLoopFiniteSolution(N=int(N), grid=grid, midpoints=mids, symmetry_drift=worst[0],
                                    **{k: np.ascontiguousarray(v) for k, v in traj.items()})


def _gains(sol: _FiniteSolution, params: ModelParams, provenance: Provenance) -> FeedbackLaw:
    RB = params.gain_map
    mid = sol.midpoints
    return FeedbackLaw(
        grid=sol.grid,
        K1=-np.einsum("ab,tbc->tac", RB, sol.P1),
        K2=-np.einsum("ab,tbc->tac", RB, sol.P2),
        v=-sol.s1 @ RB.T,
        provenance=provenance,
        N=sol.N,
        K1_mid=-np.einsum("ab,tbc->tac", RB, mid["P1"]),
        K2_mid=-np.einsum("ab,tbc->tac", RB, mid["P2"]),
        v_mid=-mid["s1"] @ RB.T,
    )


def open_loop_gains(sol: OpenLoopFiniteSolution, params: ModelParams) -> FeedbackLaw:
    """K1 = -R^{-1}B^T P1, K2 = -R^{-1}B^T P2, v = -R^{-1}B^T s1."""
    return _gains(sol, params, Provenance.OPEN_LOOP_FINITE)


def closed_loop_gains(sol: ClosedLoopFiniteSolution, params: ModelParams) -> FeedbackLaw:
    return _gains(sol, params, Provenance.CLOSED_LOOP_FINITE)


# ---------------------------------------------------------------------------
# convexity of one player's cost in its own control

@dataclass(frozen=True)
class ConvexityReport:
    min_eigenvalue: float
    tolerance: float
    convex: bool
    dimension: int
    form_norm: float

    @property
    def verdict(self) -> str:
        return "convex" if self.convex else "nonconvex"


def _variational_form(params: ModelParams, N: int, grid: TimeGrid) -> np.ndarray:
    """Hessian (divided by h) of player i's cost in a piecewise-constant control.

    Perturbing u_i by w moves (y_i, y_mean) along
        y_i'    = A y_i + G y_mean + B w
        y_mean' = (A + G) y_mean + B w / N
    and the cost changes by the quadratic form returned here.
    """
    n, m, M, h = params.n, params.m, grid.M, grid.h
    A, G, B = params.A, params.G, params.B
    drift = np.block([[A, G], [np.zeros((n, n)), A + G]])
    inp = np.vstack([B, B / N])
    # exact zero-order-hold discretisation
    aug = np.zeros((2 * n + m, 2 * n + m))
    aug[: 2 * n, : 2 * n] = drift
    aug[: 2 * n, 2 * n:] = inp
    E = expm(aug * h)
    Phi, Psi = E[: 2 * n, : 2 * n], E[: 2 * n, 2 * n:]

    dim = M * m
    Y = np.zeros((M + 1, 2 * n, dim))
    for k in range(M):
        Y[k + 1] = Phi @ Y[k]
        Y[k + 1][:, k * m:(k + 1) * m] += Psi

    L = np.hstack([np.eye(n), -params.Gamma])
    Lf = np.hstack([np.eye(n), -params.Gammaf])
    Z = np.einsum("ab,tbc->tac", L, Y)
    w = np.full(M + 1, h)
    w[0] = w[-1] = 0.5 * h
    H = np.einsum("t,tai,ab,tbj->ij", w, Z, params.Q, Z)
    Zf = Lf @ Y[-1]
    H += Zf.T @ params.Qf @ Zf
    H += h * np.kron(np.eye(M), params.R)
    H = 0.5 * (H + H.T)
    return H / h


def check_convexity(params: ModelParams, N: int, grid: TimeGrid,
                    cap: int = DEFAULTS["convexity_cap"],
                    rel_tol: float = DEFAULTS["convexity_rel"]) -> ConvexityReport:
    """Smallest eigenvalue of the discretised second variation in one player's control."""
    require_valid(params)
    N = _check_N(N)
    dim = grid.M * params.m
    if dim > cap:
        raise ValueError(f"discretization too large: M*m = {dim} exceeds cap {cap}")
    H = _variational_form(params, N, grid)
    lam = float(np.linalg.eigvalsh(H)[0])
    norm = float(np.linalg.norm(H, 2))
    tol = rel_tol * (1.0 + norm)
    return ConvexityReport(min_eigenvalue=lam, tolerance=tol, convex=lam >= -tol, dimension=dim, form_norm=norm)
