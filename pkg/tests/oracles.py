"""Reference solutions built on the full N-player state X = (x_1, ..., x_N).

These never touch the reduced block systems in the package: they assemble
the stacked dynamics directly and integrate with scipy's adaptive solver
(or a matrix exponential when the problem is linear).
"""

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm


def _pieces(p, N):
    n = p.n
    D = n * N
    ones = np.ones((1, N)) / N
    Abig = np.kron(np.eye(N), p.A) + np.kron(np.ones((N, N)) / N, p.G)

    def E(i):
        e = np.zeros((D, n))
        e[i * n:(i + 1) * n] = np.eye(n)
        return e

    L = [E(i).T - np.kron(ones, p.Gamma) for i in range(N)]
    Lf = [E(i).T - np.kron(ones, p.Gammaf) for i in range(N)]
    S = [E(i) @ p.upsilon @ E(i).T for i in range(N)]
    return D, Abig, E, L, Lf, S


def stacked_open_loop(p, N, T=None, rtol=1e-11, atol=1e-13):
    """Open-loop Nash via the stacked costate p^i = Pi_i X + r_i (deterministic part).

    Returns (Pi, r) at t=0 with Pi of shape (N*D, D): row block i is player i's
    costate map.
    """
    T = p.T if T is None else T
    D, Abig, E, L, Lf, S = _pieces(p, N)
    Bsel = np.hstack([-S[i] for i in range(N)])          # X' = Abig X + Bsel p
    Dm = np.kron(np.eye(N), Abig.T)
    Cm = np.vstack([L[i].T @ p.Q @ L[i] for i in range(N)])
    cv = np.concatenate([L[i].T @ p.Q @ p.eta for i in range(N)])
    Pi_T = np.vstack([Lf[i].T @ p.Qf @ Lf[i] for i in range(N)])
    r_T = -np.concatenate([Lf[i].T @ p.Qf @ p.etaf for i in range(N)])
    nP = Pi_T.size

    def rhs(t, y):
        Pi = y[:nP].reshape(Pi_T.shape)
        r = y[nP:]
        dPi = -Pi @ Abig - Pi @ Bsel @ Pi - Dm @ Pi - Cm
        dr = -Pi @ Bsel @ r - Dm @ r + cv
        return np.concatenate([dPi.ravel(), dr])

    sol = solve_ivp(rhs, (T, 0.0), np.concatenate([Pi_T.ravel(), r_T]), method="DOP853", rtol=rtol, atol=atol)
    y = sol.y[:, -1]
    return y[:nP].reshape(Pi_T.shape), y[nP:]


def stacked_closed_loop(p, N, T=None, rtol=1e-11, atol=1e-13):
    """Closed-loop Nash via N coupled value Riccati equations V_i = X'Pi_i X + 2 r_i'X + c_i."""
    T = p.T if T is None else T
    D, Abig, E, L, Lf, S = _pieces(p, N)
    LQL = [L[i].T @ p.Q @ L[i] for i in range(N)]
    LQe = [L[i].T @ p.Q @ p.eta for i in range(N)]
    size = D * D + D

    def rhs(t, y):
        Pi = [y[i * size:i * size + D * D].reshape(D, D) for i in range(N)]
        r = [y[i * size + D * D:(i + 1) * size] for i in range(N)]
        Fcl = Abig - sum(S[j] @ Pi[j] for j in range(N))
        out = []
        for i in range(N):
            dPi = Pi[i] @ Abig + Abig.T @ Pi[i] + LQL[i] + Pi[i] @ S[i] @ Pi[i]
            dPi -= sum(Pi[i] @ S[j] @ Pi[j] + Pi[j] @ S[j] @ Pi[i] for j in range(N))
            dr = Fcl.T @ r[i] - sum(Pi[i] @ S[j] @ r[j] for j in range(N)) + Pi[i] @ S[i] @ r[i] - LQe[i]
            out += [-dPi.ravel(), -dr]
        return np.concatenate(out)

    y_T = np.concatenate(sum(([(Lf[i].T @ p.Qf @ Lf[i]).ravel(), -Lf[i].T @ p.Qf @ p.etaf] for i in range(N)), []))
    sol = solve_ivp(rhs, (T, 0.0), y_T, method="DOP853", rtol=rtol, atol=atol)
    y = sol.y[:, -1]
    return [y[i * size:i * size + D * D].reshape(D, D) for i in range(N)], \
           [y[i * size + D * D:(i + 1) * size] for i in range(N)]


def stacked_linear_open_loop(p, N, t_eval):
    """Exact solution for B = 0 (linear system) through a matrix exponential."""
    D, Abig, E, L, Lf, S = _pieces(p, N)
    rows = N * D
    Dm = np.kron(np.eye(N), Abig.T)
    Cm = np.vstack([L[i].T @ p.Q @ L[i] for i in range(N)])
    cv = np.concatenate([L[i].T @ p.Q @ p.eta for i in range(N)])
    Pi_T = np.vstack([Lf[i].T @ p.Qf @ Lf[i] for i in range(N)])
    r_T = -np.concatenate([Lf[i].T @ p.Qf @ p.etaf for i in range(N)])
    # vec(Pi)' = -(Abig^T kron I + I kron Dm) vec(Pi) - vec(Cm), column-major vec
    K = -(np.kron(Abig.T, np.eye(rows)) + np.kron(np.eye(D), Dm))
    k = -Cm.ravel(order="F")
    big = np.zeros((K.shape[0] + rows + 1, K.shape[0] + rows + 1))
    nv = K.shape[0]
    big[:nv, :nv] = K
    big[:nv, -1] = k
    big[nv:nv + rows, nv:nv + rows] = -Dm
    big[nv:nv + rows, -1] = cv
    yT = np.concatenate([Pi_T.ravel(order="F"), r_T, [1.0]])
    out = []
    for t in t_eval:
        y = expm(big * (t - p.T)) @ yT
        out.append((y[:nv].reshape(Pi_T.shape, order="F"), y[nv:nv + rows]))
    return out
