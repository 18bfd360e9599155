"""Fixed-step RK4 integration on a shared uniform grid.

All matrix ODE systems in the package are packed into flat vectors through a
:class:`Layout` and integrated node-to-node.  Time-varying coefficients are
passed as arrays sampled at the grid nodes and at the interval midpoints, so
an RK4 stage never needs to interpolate on its own.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import SolvabilityError


class Layout:
    """Named blocks of a flat state vector."""

    def __init__(self, blocks: Sequence[tuple[str, tuple[int, ...]]]):
        self.names = [name for name, _ in blocks]
        self.shapes = {name: tuple(shape) for name, shape in blocks}
        self.slices = {}
        offset = 0
        for name, shape in blocks:
            size = int(np.prod(shape, dtype=int))
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for name in self.names:
            out[self.slices[name]] = np.asarray(parts[name], dtype=float).ravel()
        return out

    def unpack(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``vec``; a leading batch axis (e.g. time) is kept."""
        lead = vec.shape[:-1]
        return {
            name: vec[..., self.slices[name]].reshape(lead + self.shapes[name])
            for name in self.names
        }

    def block_norms(self, vec: np.ndarray, names: Sequence[str]) -> float:
        return max(float(np.linalg.norm(vec[self.slices[name]])) for name in names)


Rhs = Callable[[np.ndarray, object], np.ndarray]


def _stage_coefs(coef, k_from: int, k_to: int):
    if coef is None:
        return None, None, None
    nodes, mid = coef
    return nodes[k_from], mid[min(k_from, k_to)], nodes[k_to]


def _guard(y, t, layout, guarded, threshold, what):
    if not np.all(np.isfinite(y)):
        raise SolvabilityError(f"{what} at t*={t:.6g} (non-finite state)", escape_time=t)
    if guarded:
        size = layout.block_norms(y, guarded)
    else:
        size = float(np.max(np.abs(y))) if y.size else 0.0
    if size > threshold:
        raise SolvabilityError(
            f"{what} at t*={t:.6g} (norm {size:.3g} exceeds {threshold:.3g})",
            escape_time=t,
        )


def rk4_backward(
    rhs: Rhs,
    y_terminal: np.ndarray,
    nodes: np.ndarray,
    coef=None,
    *,
    layout: Layout | None = None,
    guarded: Sequence[str] = (),
    threshold: float = 1e8,
    what: str = "finite-time non-solvability",
    post: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Integrate ``y' = rhs(y, c)`` from ``nodes[-1]`` down to ``nodes[0]``.

    ``coef`` is either None or a pair ``(at_nodes, at_midpoints)`` whose
    leading axes have lengths M+1 and M.  ``post`` is applied to the state
    after every completed step.  Returns an (M+1, dim) array with row k
    holding the solution at ``nodes[k]``.
    """
    M = len(nodes) - 1
    h = float(nodes[1] - nodes[0])
    out = np.empty((M + 1, y_terminal.size))
    y = np.array(y_terminal, dtype=float)
    _guard(y, float(nodes[M]), layout, guarded, threshold, what)
    out[M] = y
    for k in range(M - 1, -1, -1):
        c_hi, c_mid, c_lo = _stage_coefs(coef, k + 1, k)
        k1 = rhs(y, c_hi)
        k2 = rhs(y - 0.5 * h * k1, c_mid)
        k3 = rhs(y - 0.5 * h * k2, c_mid)
        k4 = rhs(y - h * k3, c_lo)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if post is not None:
            y = post(y)
        _guard(y, float(nodes[k]), layout, guarded, threshold, what)
        out[k] = y
    return out


def rk4_forward(
    rhs: Rhs,
    y0: np.ndarray,
    nodes: np.ndarray,
    coef=None,
    *,
    layout: Layout | None = None,
    guarded: Sequence[str] = (),
    threshold: float = 1e8,
    what: str = "forward blow-up",
) -> np.ndarray:
    """Forward counterpart of :func:`rk4_backward`."""
    M = len(nodes) - 1
    h = float(nodes[1] - nodes[0])
    out = np.empty((M + 1, y0.size))
    y = np.array(y0, dtype=float)
    out[0] = y
    for k in range(M):
        c_lo, c_mid, c_hi = _stage_coefs(coef, k, k + 1)
        k1 = rhs(y, c_lo)
        k2 = rhs(y + 0.5 * h * k1, c_mid)
        k3 = rhs(y + 0.5 * h * k2, c_mid)
        k4 = rhs(y + h * k3, c_hi)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _guard(y, float(nodes[k + 1]), layout, guarded, threshold, what)
        out[k + 1] = y
    return out


def node_derivatives(rhs: Rhs, Y: np.ndarray, coef=None) -> np.ndarray:
    """Evaluate the right-hand side at every stored node."""
    F = np.empty_like(Y)
    for k in range(Y.shape[0]):
        F[k] = rhs(Y[k], None if coef is None else coef[0][k])
    return F


def hermite_midpoints(Y: np.ndarray, F: np.ndarray, h: float) -> np.ndarray:
    """Cubic Hermite value at each interval centre, O(h^4) accurate."""
    return 0.5 * (Y[:-1] + Y[1:]) + (h / 8.0) * (F[:-1] - F[1:])


def trapezoid(values: np.ndarray, h: float) -> np.ndarray:
    """Composite trapezoid along axis 0."""
    return h * (values[1:-1].sum(axis=0) + 0.5 * (values[0] + values[-1]))


def simpson_with_midpoints(values: np.ndarray, mids: np.ndarray, h: float) -> np.ndarray:
    """Composite Simpson using node values and separately known midpoints."""
    return (h / 6.0) * (values[:-1].sum(axis=0) + values[1:].sum(axis=0) + 4.0 * mids.sum(axis=0))


def observed_order(err_coarse: float, err_fine: float) -> float:
    if err_fine == 0.0:
        return math.inf
    return math.log2(err_coarse / err_fine)
