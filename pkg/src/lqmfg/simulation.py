"""Monte Carlo simulation of the N-player population under a linear law.

Every policy is reduced to the single form

    u_i = K_own(t) x_i + K_mf(t) m(t) + offset(t)

where ``m`` is either the empirical average x^(N) (centralized laws) or
a precomputed deterministic path (the decentralized law uses x̄).

Random numbers come from counter-based Philox streams keyed by
(seed, replication) with the player index and a stream tag in the counter,
so any replication can be regenerated on its own and the output does not
depend on how replications are split across workers.
"""

from __future__ import annotations

import csv
import enum
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SimulationBlowUp
from .finite import FeedbackLaw, Provenance, closed_loop_gains, open_loop_gains, solve_closed_loop, solve_open_loop
from .limit import LimitSolution, decentralized_law, solve_limit
from .model import ModelParams, TimeGrid, initial_sqrt_cov, require_valid
from .tolerances import DEFAULTS

_BROWNIAN, _INIT = 0, 1


class PolicyKind(enum.Enum):
    CENTRALIZED_OPEN_LOOP = "open"
    CENTRALIZED_CLOSED_LOOP = "closed"
    DECENTRALIZED = "decentralized"
    ZERO = "zero"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, text: str) -> "PolicyKind":
        aliases = {
            "open": cls.CENTRALIZED_OPEN_LOOP, "centralizedopenloop": cls.CENTRALIZED_OPEN_LOOP,
            "closed": cls.CENTRALIZED_CLOSED_LOOP, "centralizedclosedloop": cls.CENTRALIZED_CLOSED_LOOP,
            "decentralized": cls.DECENTRALIZED, "zero": cls.ZERO, "custom": cls.CUSTOM,
        }
        key = text.replace("_", "").replace("-", "").lower()
        if key not in aliases:
            raise ValueError(f"unknown policy kind {text!r}")
        return aliases[key]


@dataclass(frozen=True, eq=False)
class Policy:
    kind: PolicyKind
    grid: TimeGrid
    own: np.ndarray
    mf: np.ndarray
    offset: np.ndarray
    empirical: bool
    own_mid: np.ndarray = field(repr=False)
    mf_mid: np.ndarray = field(repr=False)
    offset_mid: np.ndarray = field(repr=False)
    xbar: np.ndarray | None = field(default=None, repr=False)
    xbar_mid: np.ndarray | None = field(default=None, repr=False)
    N: int | None = None
    provenance: Provenance | None = None

    @classmethod
    def centralized(cls, law: FeedbackLaw, N: int) -> "Policy":
        """(K1 - K2) x_i + N K2 x^(N) + v, i.e. K1 x_i + K2 sum_{j != i} x_j + v."""
        if law.provenance is Provenance.LIMIT:
            raise ValueError("centralized policies need a finite-N law")
        if law.N is not None and law.N != N:
            raise ValueError(f"law was computed for N={law.N}, not N={N}")
        kind = (PolicyKind.CENTRALIZED_OPEN_LOOP if law.provenance is Provenance.OPEN_LOOP_FINITE
                else PolicyKind.CENTRALIZED_CLOSED_LOOP)
        return cls(
            kind=kind, grid=law.grid, own=law.K1 - law.K2, mf=N * law.K2, offset=law.v, empirical=True,
            own_mid=law.K1_mid - law.K2_mid, mf_mid=N * law.K2_mid, offset_mid=law.v_mid,
            N=N, provenance=law.provenance,
        )

    @classmethod
    def decentralized(cls, limit: LimitSolution) -> "Policy":
        law = decentralized_law(limit)
        return cls(
            kind=PolicyKind.DECENTRALIZED, grid=limit.grid, own=law.K1, mf=law.K2, offset=law.v,
            empirical=False, own_mid=law.K1_mid, mf_mid=law.K2_mid, offset_mid=law.v_mid,
            xbar=limit.xbar, xbar_mid=limit.midpoints["xbar"], provenance=Provenance.LIMIT,
        )

    @classmethod
    def zero(cls, params: ModelParams, grid: TimeGrid) -> "Policy":
        m, n, M = params.m, params.n, grid.M
        z = np.zeros
        return cls(kind=PolicyKind.ZERO, grid=grid, own=z((M + 1, m, n)), mf=z((M + 1, m, n)),
                   offset=z((M + 1, m)), empirical=True, own_mid=z((M, m, n)), mf_mid=z((M, m, n)),
                   offset_mid=z((M, m)))

    @classmethod
    def custom(cls, law: FeedbackLaw, *, xbar=None, xbar_mid=None) -> "Policy":
        """u_i = K1 x_i + K2 m + v with m = x^(N), or m = ``xbar`` when given."""
        def mid(arr, given):
            return given if given is not None else 0.5 * (arr[:-1] + arr[1:])
        empirical = xbar is None
        return cls(
            kind=PolicyKind.CUSTOM, grid=law.grid, own=law.K1, mf=law.K2, offset=law.v, empirical=empirical,
            own_mid=mid(law.K1, law.K1_mid), mf_mid=mid(law.K2, law.K2_mid), offset_mid=mid(law.v, law.v_mid),
            xbar=None if empirical else np.asarray(xbar, dtype=float),
            xbar_mid=None if empirical else mid(np.asarray(xbar, dtype=float), xbar_mid),
            provenance=law.provenance,
        )

    @classmethod
    def constant(cls, params: ModelParams, grid: TimeGrid, u) -> "Policy":
        """Open-loop constant control, handy for quadrature checks."""
        base = cls.zero(params, grid)
        u = np.broadcast_to(np.asarray(u, dtype=float), (params.m,))
        return cls(kind=PolicyKind.CUSTOM, grid=grid, own=base.own, mf=base.mf,
                   offset=np.tile(u, (grid.M + 1, 1)), empirical=True, own_mid=base.own_mid,
                   mf_mid=base.mf_mid, offset_mid=np.tile(u, (grid.M, 1)))


def build_policy(kind: PolicyKind | str, params: ModelParams, N: int, grid: TimeGrid,
                 limit: LimitSolution | None = None) -> Policy:
    """Solve whatever is needed and return the policy of the requested kind."""
    if isinstance(kind, str):
        kind = PolicyKind.parse(kind)
    if kind is PolicyKind.CENTRALIZED_OPEN_LOOP:
        return Policy.centralized(open_loop_gains(solve_open_loop(params, N, grid), params), N)
    if kind is PolicyKind.CENTRALIZED_CLOSED_LOOP:
        return Policy.centralized(closed_loop_gains(solve_closed_loop(params, N, grid), params), N)
    if kind is PolicyKind.DECENTRALIZED:
        return Policy.decentralized(limit if limit is not None else solve_limit(params, grid))
    if kind is PolicyKind.ZERO:
        return Policy.zero(params, grid)
    raise ValueError("custom policies must be constructed explicitly")


# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PopulationPaths:
    """Simulated ensemble.

    ``mean_path`` (n_paths, M+1, n) holds x^(N); ``costs`` (n_paths, N) the
    realised cost of every player; ``mf_sq`` (n_paths, M+1) the squared gap
    to the reference mean field when one was supplied.  In ``full`` storage
    mode ``states`` (n_paths, N, M+1, n) and ``controls`` (n_paths, N, M+1, m)
    are kept too.
    """

    N: int
    n_paths: int
    grid: TimeGrid
    seed: int
    storage_mode: str
    policy_kind: PolicyKind
    provenance: Provenance | None
    mean_path: np.ndarray
    costs: np.ndarray
    mf_sq: np.ndarray | None = None
    states: np.ndarray | None = None
    controls: np.ndarray | None = None


def player_streams(seed: int, replication: int, player: int):
    """(brownian, init) generators for one player of one replication."""
    key = [int(seed) & (2**64 - 1), int(replication)]
    brown = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, player, _BROWNIAN]))
    init = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, player, _INIT]))
    return brown, init


def _draw(seed, reps, N, M, n, player_order=None, substeps=1):
    """Standard normals: init (len(reps), N, n) and Brownian (len(reps), N, M).

    With ``substeps`` > 1 each increment is the normalised sum of that many
    consecutive draws, i.e. the coarse path of a finer Brownian path.
    """
    order = range(N) if player_order is None else player_order
    z0 = np.empty((len(reps), N, n))
    dw = np.empty((len(reps), N, M))
    for a, r in enumerate(reps):
        for i, stream in enumerate(order):
            brown, init = player_streams(seed, r, stream)
            z0[a, i] = init.standard_normal(n)
            fine = brown.standard_normal(M * substeps)
            dw[a, i] = fine if substeps == 1 else fine.reshape(M, substeps).sum(axis=1) / np.sqrt(substeps)
    return z0, dw


def _matvec(K, x):
    """K (m, n) applied to x (..., n) in a fixed summation order."""
    out = K[:, 0] * x[..., 0:1]
    for l in range(1, K.shape[1]):
        out = out + K[:, l] * x[..., l:l + 1]
    return out


def _quad(W, e):
    """e^T W e for e (..., d), fixed summation order."""
    return np.sum(e * _matvec(W, e), axis=-1)


def _simulate_chunk(params, N, policy, grid, seed, reps, full, reference, threshold, player_order, substeps):
    n, m, M, h = params.n, params.m, grid.M, grid.h
    z0, dw = _draw(seed, reps, N, M, n, player_order, substeps)
    x = params.x0_mean + _matvec(initial_sqrt_cov(params), z0)
    sig = params.sigma
    sqh = np.sqrt(h)
    R, Q, Qf = params.R, params.Q, params.Qf
    nr = len(reps)

    mean_path = np.empty((nr, M + 1, n))
    costs = np.zeros((nr, N))
    mf_sq = np.empty((nr, M + 1)) if reference is not None else None
    states = np.empty((nr, N, M + 1, n)) if full else None
    controls = np.empty((nr, N, M + 1, m)) if full else None

    for k in range(M + 1):
        xN = x.mean(axis=1)
        if not (np.all(np.isfinite(x)) and np.abs(x).max() <= threshold):
            bad = ~np.isfinite(x) | (np.abs(x) > threshold)
            a, i = np.argwhere(bad.any(axis=-1))[0]
            t = float(grid.nodes[k])
            raise SimulationBlowUp(
                f"simulation blow-up in replication {reps[a]}, player {i}, t={t:.6g}",
                replication=int(reps[a]), player=int(i), time=t,
            )
        mvec = xN[:, None, :] if policy.empirical else policy.xbar[k]
        u = _matvec(policy.own[k], x) + _matvec(policy.mf[k], mvec) + policy.offset[k]
        mean_path[:, k] = xN
        if reference is not None:
            d = xN - reference[k]
            mf_sq[:, k] = np.sum(d * d, axis=-1)
        if full:
            states[:, :, k] = x
            controls[:, :, k] = u
        w = h if 0 < k < M else 0.5 * h
        e = x - _matvec(params.Gamma, xN[:, None, :]) - params.eta
        costs += w * (_quad(Q, e) + _quad(R, u))
        if k == M:
            ef = x - _matvec(params.Gammaf, xN[:, None, :]) - params.etaf
            costs += _quad(Qf, ef)
            break
        drift = _matvec(params.A, x) + _matvec(params.G, xN[:, None, :]) + _matvec(params.B, u)
        x = x + h * drift + (sqh * dw[:, :, k])[..., None] * sig
    return mean_path, costs, mf_sq, states, controls


def simulate(params: ModelParams, N: int, policy: Policy, grid: TimeGrid, n_paths: int, seed: int, *,
             storage: str = "moments", reference=None, workers: int = 1, chunk: int = 128,
             player_order=None, brownian_substeps: int = 1) -> PopulationPaths:
    """Euler-Maruyama simulation of ``n_paths`` independent populations.

    ``reference`` is an (M+1, n) path (normally x̄) against which the squared
    mean-field gap is recorded.  ``player_order`` permutes which substream
    each player index reads, for exchangeability checks.
    ``brownian_substeps=k`` drives the run with the Brownian path that a run
    on k times as many steps would see, for coupled refinement studies.
    Output is identical for any ``workers``/``chunk`` choice.
    """
    require_valid(params)
    if N < 1 or n_paths < 1:
        raise ValueError("N and n_paths must be positive")
    if policy.grid.M != grid.M or policy.grid.T != grid.T:
        raise ValueError("policy grid differs from simulation grid")
    if policy.N is not None and policy.N != N:
        raise ValueError(f"policy was built for N={policy.N}, simulating N={N}")
    if brownian_substeps < 1:
        raise ValueError("brownian_substeps must be positive")
    if storage not in ("moments", "full"):
        raise ValueError("storage must be 'moments' or 'full'")
    full = storage == "full"
    ref = None if reference is None else np.asarray(reference, dtype=float)
    threshold = DEFAULTS["sim_blowup_norm"]
    n, m, M = params.n, params.m, grid.M

    mean_path = np.empty((n_paths, M + 1, n))
    costs = np.empty((n_paths, N))
    mf_sq = np.empty((n_paths, M + 1)) if ref is not None else None
    states = np.empty((n_paths, N, M + 1, n)) if full else None
    controls = np.empty((n_paths, N, M + 1, m)) if full else None

    bounds = [(a, min(a + chunk, n_paths)) for a in range(0, n_paths, max(1, chunk))]

    def run(bound):
        a, b = bound
        out = _simulate_chunk(params, N, policy, grid, seed, list(range(a, b)), full, ref, threshold, player_order,
                              brownian_substeps)
        mean_path[a:b], costs[a:b] = out[0], out[1]
        if ref is not None:
            mf_sq[a:b] = out[2]
        if full:
            states[a:b], controls[a:b] = out[3], out[4]

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            for _ in pool.map(run, bounds):
                pass
    else:
        for bound in bounds:
            run(bound)

    return PopulationPaths(
        N=N, n_paths=n_paths, grid=grid, seed=int(seed), storage_mode=storage, policy_kind=policy.kind,
        provenance=policy.provenance, mean_path=mean_path, costs=costs, mf_sq=mf_sq,
        states=states, controls=controls,
    )


# ---------------------------------------------------------------------------

def jackknife_sup_mean(samples: np.ndarray) -> tuple[float, float]:
    """sup_t of the sample mean over axis 0, with its jackknife standard error."""
    n = samples.shape[0]
    total = samples.sum(axis=0)
    estimate = float(np.max(total / n))
    if n < 2:
        return estimate, float("nan")
    loo = np.max((total[None, :] - samples) / (n - 1), axis=1)
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return estimate, se


@dataclass(frozen=True)
class MeanFieldError:
    N: int
    value: float
    stderr: float
    per_node_mean: np.ndarray
    per_node_se: np.ndarray
    grid: TimeGrid

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "mean_sq_gap", "stderr"])
            for t, mu, se in zip(self.grid.nodes, self.per_node_mean, self.per_node_se):
                writer.writerow([format(t, ".17g"), format(mu, ".17g"), format(se, ".17g")])
        return path


def mean_field_error(params: ModelParams, N: int, policy, grid: TimeGrid, n_paths: int, seed: int, *,
                     limit: LimitSolution | None = None, workers: int = 1, chunk: int = 128,
                     brownian_substeps: int = 1) -> MeanFieldError:
    """sup_t of the Monte Carlo mean of |x^(N)(t) - x̄(t)|^2, with jackknife error."""
    if limit is None:
        limit = solve_limit(params, grid)
    if not isinstance(policy, Policy):
        policy = build_policy(policy, params, N, grid, limit=limit)
    paths = simulate(params, N, policy, grid, n_paths, seed, reference=limit.xbar, workers=workers, chunk=chunk,
                     brownian_substeps=brownian_substeps)
    value, se = jackknife_sup_mean(paths.mf_sq)
    per_mean = paths.mf_sq.mean(axis=0)
    per_se = paths.mf_sq.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.full(grid.M + 1, np.nan)
    return MeanFieldError(N=N, value=value, stderr=se, per_node_mean=per_mean, per_node_se=per_se, grid=grid)


# ---------------------------------------------------------------------------
# binary dump of full paths, little endian:
#   8s magic | u4 version | u4 n | u4 m | u4 N | u4 M | u8 n_paths | u8 seed | f8 T
#   f8[M+1] nodes | f8[n_paths, N, M+1, n] states | f8[n_paths, N, M+1, m] controls

_MAGIC = b"LQMFGPTH"
_HEADER = struct.Struct("<8sIIIIIQQd")


def write_binary(paths: PopulationPaths, path) -> Path:
    if paths.storage_mode != "full":
        raise ValueError("binary dump needs full storage mode")
    path = Path(path)
    n, m = paths.states.shape[-1], paths.controls.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, n, m, paths.N, paths.grid.M, paths.n_paths, paths.seed, paths.grid.T))
        for arr in (paths.grid.nodes, paths.states, paths.controls):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_binary(path) -> dict:
    raw = Path(path).read_bytes()
    magic, version, n, m, N, M, n_paths, seed, T = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a path dump")
    off = _HEADER.size
    out = {"n": n, "m": m, "N": N, "M": M, "n_paths": n_paths, "seed": seed, "T": T}
    for name, shape in (("nodes", (M + 1,)), ("states", (n_paths, N, M + 1, n)), ("controls", (n_paths, N, M + 1, m))):
        count = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    return out
