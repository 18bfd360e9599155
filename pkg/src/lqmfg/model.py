"""Game coefficients, the shared time grid, and validation.

Each player obeys

    dx_i = (A x_i + G x^(N) + B u_i) dt + sigma dw_i

with scalar Brownian motions, and pays

    E int_0^T |x_i - Gamma x^(N) - eta|_Q^2 + |u_i|_R^2 dt
      + E |x_i(T) - Gammaf x^(N)(T) - etaf|_Qf^2 .
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidModelError

_MATRIX_FIELDS = ("A", "G", "B", "Q", "R", "Gamma", "Qf", "Gammaf", "x0_cov")
_VECTOR_FIELDS = ("sigma", "eta", "etaf", "x0_mean")
FIELD_NAMES = ("A", "G", "B", "sigma", "Q", "R", "Gamma", "eta", "Qf", "Gammaf", "etaf", "T", "x0_mean", "x0_cov")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


def _as_vector(value) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    return np.atleast_1d(arr)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Constant coefficients of the N-player LQ game.

    Scalars are accepted for 1x1 matrices and length-1 vectors.  ``sigma`` is
    the n x 1 loading of each player's scalar Brownian motion and is stored as
    a length-n vector.  Nothing is checked here beyond array coercion; call
    :func:`validate` (solvers do it for you).
    """

    A: np.ndarray
    G: np.ndarray
    B: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Gamma: np.ndarray
    eta: np.ndarray
    Qf: np.ndarray
    Gammaf: np.ndarray
    etaf: np.ndarray
    T: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray

    def __post_init__(self):
        for name in _MATRIX_FIELDS:
            object.__setattr__(self, name, _frozen(_as_matrix(getattr(self, name))))
        for name in _VECTOR_FIELDS:
            object.__setattr__(self, name, _frozen(_as_vector(getattr(self, name))))
        object.__setattr__(self, "T", float(self.T))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @cached_property
    def upsilon(self) -> np.ndarray:
        return upsilon(self)

    @cached_property
    def gain_map(self) -> np.ndarray:
        """R^{-1} B^T, the map from costate-like quantities to controls."""
        return _frozen(np.linalg.solve(self.R, self.B.T))

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def scaled_costs(self, c: float) -> "ModelParams":
        """Multiply every cost weight (Q, Qf, R) by ``c``."""
        return replace(self, Q=c * self.Q, Qf=c * self.Qf, R=c * self.R)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value if f.name == "T" else np.asarray(value).tolist()
        return out

    def __repr__(self):
        return f"ModelParams(n={self.n}, m={self.m}, T={self.T})"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k T / M, k = 0..M, shared by every solver."""

    T: float
    M: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"step count must be a positive integer, got M={self.M}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "M", int(self.M))
        nodes = np.arange(self.M + 1) * (self.T / self.M)
        nodes[-1] = self.T
        object.__setattr__(self, "nodes", _frozen(nodes))

    @property
    def h(self) -> float:
        return self.T / self.M

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.M * factor)

    @classmethod
    def for_params(cls, params: ModelParams, M: int) -> "TimeGrid":
        return cls(params.T, M)


@dataclass(frozen=True)
class ValidationReport:
    failures: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.failures

    def __bool__(self):
        return self.ok

    def raise_if_failed(self):
        if self.failures:
            raise InvalidModelError(self.failures)


def _sym_gap(M: np.ndarray) -> float:
    return float(np.linalg.norm(M - M.T))


def validate(params: ModelParams, r_min: float = 1e-12) -> ValidationReport:
    """Collect every violated constraint; never raises on bad data."""
    failures: list[str] = []
    n = params.A.shape[0]
    if params.A.shape != (n, n):
        failures.append(f"dimension mismatch: A has shape {params.A.shape}, expected square")
    m = params.B.shape[1]
    expected = {
        "G": (n, n), "B": (n, m), "Q": (n, n), "R": (m, m), "Gamma": (n, n),
        "Qf": (n, n), "Gammaf": (n, n), "x0_cov": (n, n),
    }
    for name, shape in expected.items():
        got = getattr(params, name).shape
        if got != shape:
            failures.append(f"dimension mismatch: {name} has shape {got}, expected {shape}")
    for name in _VECTOR_FIELDS:
        got = getattr(params, name).shape
        if got != (n,):
            failures.append(f"dimension mismatch: {name} has shape {got}, expected ({n},)")
    if not np.isfinite(params.T) or params.T <= 0:
        failures.append(f"nonpositive horizon T={params.T}")
    for name in FIELD_NAMES:
        if not np.all(np.isfinite(getattr(params, name))):
            failures.append(f"{name} has non-finite entries")
    if failures:
        return ValidationReport(tuple(failures))

    for name in ("Q", "Qf"):
        M = getattr(params, name)
        if _sym_gap(M) > 1e-12 * (1.0 + np.linalg.norm(M)):
            failures.append(f"{name} not symmetric")
    R = params.R
    if _sym_gap(R) > 1e-12 * (1.0 + np.linalg.norm(R)):
        failures.append("R not symmetric")
    elif np.linalg.eigvalsh(R).min() < r_min:
        failures.append("R not positive definite")
    C = params.x0_cov
    if _sym_gap(C) > 1e-12 * (1.0 + np.linalg.norm(C)):
        failures.append("x0_cov not symmetric")
    elif np.linalg.eigvalsh(C).min() < -1e-12 * (1.0 + np.linalg.norm(C)):
        failures.append("x0_cov not positive semidefinite")
    return ValidationReport(tuple(failures))


def require_valid(params: ModelParams) -> ModelParams:
    validate(params).raise_if_failed()
    return params


def upsilon(params: ModelParams) -> np.ndarray:
    """B R^{-1} B^T, symmetrised."""
    try:
        RinvBt = np.linalg.solve(params.R, params.B.T)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("R inversion failed") from exc
    if np.linalg.cond(params.R) > 1e14:
        raise np.linalg.LinAlgError("R inversion failed")
    U = params.B @ RinvBt
    return _frozen(0.5 * (U + U.T))


def initial_sqrt_cov(params: ModelParams) -> np.ndarray:
    """Symmetric square root of the (PSD, possibly singular) initial covariance."""
    w, V = np.linalg.eigh(params.x0_cov)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


# ---------------------------------------------------------------------------
# JSON configuration

def _model_schema() -> dict:
    text = resources.files("lqmfg").joinpath("schemas/model.schema.json").read_text()
    return json.loads(text)


def _line_of_key(text: str, key) -> int | None:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def params_from_dict(data: dict, *, source_text: str | None = None) -> ModelParams:
    """Build and validate from a plain dict; errors carry line numbers when ``source_text`` is given."""
    import jsonschema

    try:
        jsonschema.validate(data, _model_schema())
    except jsonschema.ValidationError as exc:
        path = list(exc.absolute_path)
        key = path[0] if path else (exc.message.split("'")[1] if "'" in exc.message else None)
        line = _line_of_key(source_text, key) if (source_text and key is not None) else None
        where = "/".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {exc.message}", line=line, column=1 if line else None) from None
    params = ModelParams(**{name: data[name] for name in FIELD_NAMES})
    report = validate(params)
    if not report.ok:
        first = report.failures[0]
        culprit = next((name for name in FIELD_NAMES if first.startswith(name) or f" {name} " in first), None)
        line = _line_of_key(source_text, culprit) if (source_text and culprit) else None
        raise ConfigError("invalid model: " + "; ".join(report.failures), line=line, column=1 if line else None)
    return params


def load_params(path) -> ModelParams:
    """Load a JSON model file (one key per field, matrices as row-major nested lists)."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    if isinstance(data, dict) and "model" in data and isinstance(data["model"], dict):
        data = data["model"]
    return params_from_dict(data, source_text=text)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n")


def benchmark_params(**overrides) -> ModelParams:
    """Scalar benchmark game used throughout the tests and demos."""
    data = dict(
        A=0.2, G=0.1, B=1.0, sigma=0.3, Q=1.0, R=1.0, Gamma=0.5, eta=1.0,
        Qf=1.0, Gammaf=0.5, etaf=1.0, T=1.0, x0_mean=1.0, x0_cov=0.04,
    )
    data.update(overrides)
    return ModelParams(**data)
