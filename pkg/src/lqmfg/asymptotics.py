"""Rescaling of finite-N solutions and O(1/N) convergence studies."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SolvabilityError
from .finite import (
    ClosedLoopFiniteSolution, OpenLoopFiniteSolution, closed_loop_gains, open_loop_gains,
    solve_closed_loop, solve_open_loop,
)
from .limit import LimitSolution, solve_limit
from .model import ModelParams, TimeGrid
from .tolerances import DEFAULTS

KINDS = ("open", "closed")


@dataclass(frozen=True, eq=False)
class RescaledFamily:
    """Lambda1 = P1, Lambda2 = N P2, Lambda3 = N^2 P3, Lambda4 = N P4, phi1 = s1, phi2 = N s2."""

    N: int
    grid: object
    kind: str
    Lambda1: np.ndarray
    Lambda2: np.ndarray
    Lambda3: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    Lambda4: np.ndarray | None = None


def rescale(sol: OpenLoopFiniteSolution | ClosedLoopFiniteSolution) -> RescaledFamily:
    N = sol.N
    return RescaledFamily(
        N=N, grid=sol.grid, kind=sol.kind,
        Lambda1=sol.P1.copy(), Lambda2=N * sol.P2, Lambda3=(N * N) * sol.P3,
        phi1=sol.s1.copy(), phi2=N * sol.s2,
        Lambda4=N * sol.P4 if sol.kind == "open" else None,
    )


def unrescale(fam: RescaledFamily) -> dict:
    """Inverse of :func:`rescale`; powers of two in N invert bit-for-bit."""
    N = fam.N
    out = {
        "P1": fam.Lambda1.copy(), "P2": fam.Lambda2 / N, "P3": fam.Lambda3 / (N * N),
        "s1": fam.phi1.copy(), "s2": fam.phi2 / N,
    }
    if fam.Lambda4 is not None:
        out["P4"] = fam.Lambda4 / N
    return out


def _sup_norm(diff: np.ndarray) -> float:
    """Sup over nodes of the Frobenius (or Euclidean) norm."""
    return float(np.max(np.linalg.norm(diff.reshape(diff.shape[0], -1), axis=1)))


@dataclass(frozen=True)
class Fit:
    slope: float
    intercept: float
    r2: float


def fit_loglog(Ns, gaps) -> Fit:
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.log(np.asarray(gaps, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return Fit(float(slope), float(intercept), r2)


@dataclass
class ConvergenceTable:
    kind: str
    level: str
    Ns: list
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    verdict: str = ""
    passed: bool = False
    failed_Ns: list = field(default_factory=list)
    limit: LimitSolution | None = field(default=None, repr=False)

    def groups(self):
        return [g for g in ("group1", "group2") if any(g in r for r in self.rows)]

    def column(self, name):
        return [r[name] for r in self.rows if r.get("solvable", True)]

    def to_json(self) -> dict:
        fits = {k: {"slope": f.slope, "r2": f.r2} for k, f in self.fits.items()}
        head = self.fits.get("group1") or next(iter(self.fits.values()), None)
        return {
            "kind": self.kind, "level": self.level, "verdict": self.verdict, "pass": self.passed,
            "slope": head.slope if head else None, "r2": head.r2 if head else None,
            "fits": fits, "failed_Ns": self.failed_Ns,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = [k for k in self.rows[0] if k not in ("N", "solvable")] if self.rows else []
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["N", "solvable"] + keys)
            for r in self.rows:
                writer.writerow([r["N"], int(r.get("solvable", True))]
                                + [format(r.get(k, float("nan")), ".17g") for k in keys])
        return path

    def write_verdict(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")
        return path


def _solver(kind):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return solve_open_loop if kind == "open" else solve_closed_loop


def _riccati_row(sol, limit: LimitSolution) -> dict:
    fam = rescale(sol)
    row = {
        "Lambda1": _sup_norm(fam.Lambda1 - limit.P1inf),
        "Lambda2": _sup_norm(fam.Lambda2 - limit.P2inf),
        "phi1": _sup_norm(fam.phi1 - limit.s1inf),
    }
    n1 = lambda d: np.linalg.norm(d.reshape(d.shape[0], -1), axis=1)
    g1 = n1(fam.Lambda1 - limit.P1inf) + n1(fam.Lambda2 - limit.P2inf) + n1(fam.phi1 - limit.s1inf)
    if sol.kind == "open":
        d3, d4, dphi = fam.Lambda3 - limit.P3inf_check, fam.Lambda4 - limit.P4inf_check, fam.phi2 - limit.s2inf_check
        g2 = n1(d3) + n1(d4) + n1(dphi)
        row["Lambda4"] = _sup_norm(d4)
    else:
        d3, dphi = fam.Lambda3 - limit.P3inf_hat, fam.phi2 - limit.s2inf_hat
        g2 = n1(d3) + n1(dphi)
    row["Lambda3"] = _sup_norm(d3)
    row["phi2"] = _sup_norm(dphi)
    row["group1"] = float(g1.max())
    row["group2"] = float(g2.max())
    return row


def _gain_row(sol, params, limit: LimitSolution) -> dict:
    law = open_loop_gains(sol, params) if sol.kind == "open" else closed_loop_gains(sol, params)
    N = sol.N
    n1 = lambda d: np.linalg.norm(d.reshape(d.shape[0], -1), axis=1)
    dK1 = n1(law.K1 - limit.K1inf)
    dK2 = n1(N * law.K2 - limit.K2inf)
    dv = n1(law.v - limit.phi1inf)
    return {
        "K1": float(dK1.max()), "NK2": float(dK2.max()), "v": float(dv.max()),
        "group1": float((dK1 + dK2 + dv).max()),
    }


def _study(params, grid, Ns, kind, level, limit, workers, tolerances):
    tol = dict(DEFAULTS, **(tolerances or {}))
    Ns = [int(N) for N in Ns]
    if sorted(set(Ns)) != Ns:
        raise ValueError("Ns must be strictly increasing")
    if limit is None:
        limit = solve_limit(params, grid)
    solve = _solver(kind)

    def one(N):
        try:
            sol = solve(params, N, grid)
        except SolvabilityError as exc:
            return {"N": N, "solvable": False, "escape_time": exc.escape_time}
        row = _riccati_row(sol, limit) if level == "riccati" else _gain_row(sol, params, limit)
        return {"N": N, "solvable": True, **row}

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, Ns))
    else:
        rows = [one(N) for N in Ns]

    table = ConvergenceTable(kind=kind, level=level, Ns=Ns, rows=rows, limit=limit)
    table.failed_Ns = [r["N"] for r in rows if not r["solvable"]]
    good = [r for r in rows if r["solvable"]]
    groups = ["group1", "group2"] if level == "riccati" else ["group1"]
    lo, hi = tol["riccati_slope_band"]
    if good and all(r[g] <= tol["exact_gap"] for r in good for g in groups):
        table.verdict, table.passed = "exact", True
        return table
    ok = len(good) >= 2
    for g in groups:
        gaps = [r[g] for r in good]
        if len(gaps) < 2 or min(gaps) <= 0:
            ok = False
            continue
        fit = fit_loglog([r["N"] for r in good], gaps)
        table.fits[g] = fit
        ok = ok and lo <= fit.slope <= hi and fit.r2 >= tol["riccati_r2_min"]
    table.passed = ok and not table.failed_Ns
    table.verdict = "pass" if table.passed else "fail"
    return table


def convergence_study(params: ModelParams, grid: TimeGrid, Ns, kind: str = "open", *,
                      limit: LimitSolution | None = None, workers: int = 1,
                      tolerances: dict | None = None) -> ConvergenceTable:
    """Sup-norm gaps of the rescaled family against the limit, with a log-log fit per group.

    Pass ``limit`` to share one limit solve between several studies.
    """
    return _study(params, grid, Ns, kind, "riccati", limit, workers, tolerances)


def gain_convergence(params: ModelParams, grid: TimeGrid, Ns, kind: str = "open", *,
                     limit: LimitSolution | None = None, workers: int = 1,
                     tolerances: dict | None = None) -> ConvergenceTable:
    """sup_t |K1 - K1inf| + |N K2 - K2inf| + |v - phi1inf| per N, with a log-log fit."""
    return _study(params, grid, Ns, kind, "gain", limit, workers, tolerances)
