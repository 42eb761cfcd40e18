"""Independent reference implementations used as test oracles.

Everything here is deliberately written from first principles (objective
evaluations, textbook recursions, plain central differences) rather than by
calling into the package, so the oracles cannot inherit a bug from the code
they check.
"""

from __future__ import annotations

import numpy as np


def quad_from_fn(fn, m: int, h: float = 1.0):
    """Extract (H, c, f0) with fn(u) = 0.5 u'Hu + c'u + f0 for quadratic fn.

    Central differences are exact (up to rounding) on quadratics, so h can be
    order one.
    """
    f0 = fn(np.zeros(m))
    c = np.empty(m)
    H = np.empty((m, m))
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = h
        fp, fm = fn(ei), fn(-ei)
        c[i] = (fp - fm) / (2.0 * h)
        H[i, i] = (fp - 2.0 * f0 + fm) / h**2
    for i in range(m):
        for j in range(i + 1, m):
            eij = np.zeros(m)
            eij[i] = h
            eij[j] = h
            ei = np.zeros(m)
            ei[i] = h
            ej = np.zeros(m)
            ej[j] = h
            H[i, j] = H[j, i] = (fn(eij) - fn(ei) - fn(ej) + f0) / h**2
    return 0.5 * (H + H.T), c, f0


def qp_min_single_constraint(H, c, a: float, b):
    """Minimize 0.5 u'Hu + c'u subject to a + b'u >= 0 (H positive definite).

    Active-set logic for one affine constraint: take the unconstrained
    minimizer if feasible, otherwise solve the equality-constrained KKT
    system.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    m = H.shape[0]
    u_free = np.linalg.solve(H, -c)
    slack = a + b @ u_free
    if slack >= 0.0 or float(b @ b) == 0.0:
        return u_free
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = H
    kkt[:m, m] = -b
    kkt[m, :m] = b
    rhs = np.concatenate([-c, [-a]])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:m]


def dare_iteration(A, B, Q, R, Q_N, N: int):
    """Textbook finite-horizon Riccati backward iteration.

    Returns (P_list, K_list) with P_list[i] for i = 0..N and
    K_list[i] = -(R + B'P_{i+1}B)^-1 B'P_{i+1}A for i = 0..N-1.
    """
    P = [None] * (N + 1)
    K = [None] * N
    P[N] = np.asarray(Q_N, dtype=float)
    for i in range(N - 1, -1, -1):
        BtP = B.T @ P[i + 1]
        K[i] = -np.linalg.solve(R + BtP @ B, BtP @ A)
        Acl = A + B @ K[i]
        P[i] = Q + K[i].T @ R @ K[i] + Acl.T @ P[i + 1] @ Acl
        P[i] = 0.5 * (P[i] + P[i].T)
    return P, K


def fd_jacobian(fn, x, h: float = 1e-6):
    """Plain central-difference Jacobian of a vector map, no extrapolation."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    J = np.empty((f0.shape[0], x.shape[0]))
    for j in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2.0 * h)
    return J


class StagePolicyOracle:
    """Line-by-line transcription of one backward stage, written directly
    from the closed-form solution: W, k, clipped multiplier, softplus-smoothed
    variant, and the value update from plain finite-difference Jacobians."""

    def __init__(self, F, G, a, b, Q, R, Omega, Gamma, P_next, T_next, eta, fd_h=1e-6):
        self.F, self.G, self.a, self.b = F, G, a, b
        self.Q, self.R, self.Omega, self.Gamma = Q, R, Omega, Gamma
        self.P_next, self.T_next = P_next, T_next
        self.eta = eta
        self.fd_h = fd_h

    def W(self, x):
        G = self.G(x)
        return np.linalg.inv(self.R + G.T @ self.P_next @ G)

    def k(self, x):
        G = self.G(x)
        return -self.W(x) @ (G.T @ (self.P_next @ self.F(x) + self.T_next) + self.Omega)

    def _z(self, x):
        b = self.b(x)
        if float(b @ b) == 0.0:
            return None
        return float((-self.a(x) - b @ self.k(x)) / (b @ self.W(x) @ b))

    def u_star(self, x):
        z = self._z(x)
        lam = 0.0 if z is None else max(0.0, z)
        return self.k(x) + lam * (self.W(x) @ self.b(x))

    def u_smooth(self, x):
        z = self._z(x)
        if z is None:
            lam = 0.0
        else:
            lam = np.log1p(np.exp(self.eta * z)) / self.eta if z < 30 else z
        return self.k(x) + lam * (self.W(x) @ self.b(x))

    def step_smooth(self, x):
        return self.F(x) + self.G(x) @ self.u_smooth(x)

    def value_update(self, xbar):
        """(P, T) of this stage from plain central-difference Jacobians."""
        K = fd_jacobian(self.u_smooth, xbar, self.fd_h)
        A = fd_jacobian(self.step_smooth, xbar, self.fd_h)
        u0 = self.u_star(xbar)
        F_star = self.F(xbar) + self.G(xbar) @ u0
        P = self.Q + K.T @ self.R @ K + A.T @ self.P_next @ A
        T = (A.T @ (self.P_next @ (F_star - A @ xbar) + self.T_next)
             + K.T @ (self.R @ u0 - self.R @ K @ xbar + self.Omega)
             + self.Gamma)
        return 0.5 * (P + P.T), T


def backward_oracle(N, nominal, F, G, a, b, Qs, Rs, Omegas, Gammas, Q_N, Gamma_N, eta,
                    fd_h=1e-6):
    """Full backward recursion built on StagePolicyOracle.

    Returns (stages, P_list, T_list) where stages[i] is the StagePolicyOracle
    for stage i (holding the propagated P_{i+1}, T_{i+1}).
    """
    P, T = Q_N, Gamma_N
    P_list = [None] * (N + 1)
    T_list = [None] * (N + 1)
    P_list[N], T_list[N] = P, T
    stages = [None] * N
    for i in range(N - 1, -1, -1):
        st = StagePolicyOracle(F, G, a, b, Qs[i], Rs[i], Omegas[i], Gammas[i],
                               P_list[i + 1], T_list[i + 1], eta, fd_h)
        stages[i] = st
        P_list[i], T_list[i] = st.value_update(nominal[i])
    return stages, P_list, T_list


def rk4_reference(ode, x0, T: float, steps: int):
    """High-resolution fixed-step RK4 rollout used as an integration oracle."""
    x = np.asarray(x0, dtype=float).copy()
    h = T / steps
    for _ in range(steps):
        k1 = ode(x)
        k2 = ode(x + 0.5 * h * k1)
        k3 = ode(x + 0.5 * h * k2)
        k4 = ode(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
