"""Finite-horizon solver with closed-form stage policies under a single
affine-in-control constraint per stage.

The cost-to-go is approximated backward along a nominal trajectory by a
quadratic x -> 0.5 x'Px + T'x.  Minimizing one stage cost plus the propagated
quadratic, subject to a(x) + b(x)'u >= 0, has the closed form

    u*(x)  = k(x) + lam(x) W(x) b(x)

with

    W(x)   = (R + G(x)' P G(x))^-1
    k(x)   = -W(x) [G(x)'(P F(x) + T) + Omega]
    lam(x) = max{0, (-a(x) - b(x)'k(x)) / (b(x)' W(x) b(x))}

Backward propagation linearizes the softplus-smoothed policy around the
nominal point and rolls the quadratic value data (P, T) one stage back.
All public evaluation routines delegate to a single batched kernel so the
per-point and vectorized paths cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray

# Tolerances for the positive-semidefiniteness checks and repairs.
COST_PSD_TOL = 1e-10
VALUE_PSD_TOL = 1e-8
PSD_CLIP = 1e-10


class SolverError(RuntimeError):
    """Base class for solver failures."""


class IllConditionedError(SolverError):
    """Control-weight inverse is singular or exceeds the condition cap."""

    def __init__(self, msg: str, stage_index: Optional[int] = None):
        super().__init__(msg if stage_index is None else f"stage {stage_index}: {msg}")
        self.stage_index = stage_index


class InfeasibleConstraintError(SolverError):
    """Constraint has (numerically) vanishing b with nonpositive a."""

    def __init__(self, msg: str, stage_index: Optional[int] = None):
        super().__init__(msg if stage_index is None else f"stage {stage_index}: {msg}")
        self.stage_index = stage_index


class JacobianError(SolverError):
    """Finite differencing produced non-finite values."""

    def __init__(self, msg: str, coordinate: Optional[int] = None):
        super().__init__(msg)
        self.coordinate = coordinate


class BackwardPassError(SolverError):
    def __init__(self, stage_index: int, cause: Exception):
        super().__init__(f"backward pass failed at stage {stage_index}: {cause}")
        self.stage_index = stage_index
        self.cause = cause


def _symmetrize(M: Array) -> Array:
    return 0.5 * (M + M.T)


def _as_batch(x) -> tuple[Array, bool]:
    """Coerce a state to a (B, n) array; report whether input was 1-D."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


@dataclass(frozen=True)
class SolverOptions:
    """Numerical knobs shared by the backward pass and policy evaluation.

    cond_cap: condition-number cap on R + G'PG before its inverse is declared
        unusable.
    eps_b: below this norm, b(x) is treated as exactly zero; feasibility then
        requires a(x) > 0.
    """

    cond_cap: float = 1e12
    eps_b: float = 1e-12


DEFAULT_OPTS = SolverOptions()


@dataclass(frozen=True)
class StageCost:
    """Quadratic stage cost 0.5 u'Ru + Omega'u + 0.5 x'Qx + Gamma'x."""

    Q: Array
    R: Array
    Omega: Optional[Array] = None
    Gamma: Optional[Array] = None
    validate: bool = True

    def __post_init__(self):
        Q = _symmetrize(np.asarray(self.Q, dtype=float))
        R = _symmetrize(np.asarray(self.R, dtype=float))
        n, m = Q.shape[0], R.shape[0]
        Omega = np.zeros(m) if self.Omega is None else np.asarray(self.Omega, dtype=float)
        Gamma = np.zeros(n) if self.Gamma is None else np.asarray(self.Gamma, dtype=float)
        if self.validate:
            if np.linalg.eigvalsh(Q).min() < -COST_PSD_TOL:
                raise ValueError("state weight Q must be positive semidefinite")
            if np.linalg.eigvalsh(R).min() <= 0.0:
                raise ValueError("control weight R must be positive definite")
            if Omega.shape != (m,) or Gamma.shape != (n,):
                raise ValueError("linear weight shapes inconsistent with Q/R")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Omega", Omega)
        object.__setattr__(self, "Gamma", Gamma)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def __call__(self, x: Array, u: Array) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(
            0.5 * u @ self.R @ u + self.Omega @ u + 0.5 * x @ self.Q @ x + self.Gamma @ x
        )


@dataclass(frozen=True)
class TerminalCost:
    """Quadratic terminal cost 0.5 x'Q_N x + Gamma_N'x."""

    Q_N: Array
    Gamma_N: Optional[Array] = None

    def __post_init__(self):
        Q = _symmetrize(np.asarray(self.Q_N, dtype=float))
        Gamma = np.zeros(Q.shape[0]) if self.Gamma_N is None else np.asarray(self.Gamma_N, dtype=float)
        if np.linalg.eigvalsh(Q).min() < -COST_PSD_TOL:
            raise ValueError("terminal weight must be positive semidefinite")
        object.__setattr__(self, "Q_N", Q)
        object.__setattr__(self, "Gamma_N", Gamma)

    def __call__(self, x: Array) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q_N @ x + self.Gamma_N @ x)


@dataclass(frozen=True)
class DiscreteDynamics:
    """Control-affine step map x+ = F(x) + G(x) u.

    F maps (n,) -> (n,); G maps (n,) -> (n, m).  Set ``vectorized`` when the
    callables also accept stacked states (B, n).  ``constant_G`` short-circuits
    G evaluation (and lets the solver factor R + G'PG once per stage).
    Optional analytic Jacobians switch ``jacobian_mode`` to "analytic":
    F_jac(x) -> (n, n), G_jac(x) -> (n, m, n) with [i, l, j] = dG[i, l]/dx[j].
    ``fd_step`` is the base step for the central differences used otherwise.
    """

    F: Callable
    G: Optional[Callable] = None
    vectorized: bool = False
    fd_step: float = 1e-5
    constant_G: Optional[Array] = None
    F_jac: Optional[Callable] = None
    G_jac: Optional[Callable] = None

    def __post_init__(self):
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")
        if self.G is None and self.constant_G is None:
            raise ValueError("either G or constant_G is required")
        if self.constant_G is not None:
            object.__setattr__(self, "constant_G", np.asarray(self.constant_G, dtype=float))

    @property
    def jacobian_mode(self) -> str:
        return "analytic" if (self.F_jac is not None and self.G_jac is not None) else "central"

    def F_batch(self, X: Array) -> Array:
        if self.vectorized:
            return np.asarray(self.F(X), dtype=float)
        return np.stack([np.asarray(self.F(x), dtype=float) for x in X])

    def G_batch(self, X: Array) -> Array:
        if self.constant_G is not None:
            return np.broadcast_to(self.constant_G, (X.shape[0],) + self.constant_G.shape)
        if self.vectorized:
            return np.asarray(self.G(X), dtype=float)
        return np.stack([np.asarray(self.G(x), dtype=float) for x in X])

    def G_single(self, x: Array) -> Array:
        if self.constant_G is not None:
            return self.constant_G
        return np.asarray(self.G(np.asarray(x, dtype=float)), dtype=float)

    def step(self, x: Array, u: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return np.asarray(self.F(x), dtype=float) + self.G_single(x) @ np.asarray(u, dtype=float)


@dataclass(frozen=True)
class StageConstraint:
    """Affine-in-control inequality a(x) + b(x)'u >= 0.

    a maps (n,) -> scalar; b maps (n,) -> (m,).  An optional fused ``ab``
    callable returns both pieces from one evaluation (worthwhile when a and b
    share expensive subexpressions, e.g. barrier gradients).  Feasibility at
    states where b vanishes requires a(x) > 0; the solver enforces that
    numerically with the ``eps_b`` tolerance from SolverOptions.
    """

    a: Callable
    b: Callable
    ab: Optional[Callable] = None
    vectorized: bool = False
    label: str = ""

    def a_batch(self, X: Array) -> Array:
        if self.vectorized:
            return np.asarray(self.a(X), dtype=float).reshape(X.shape[0])
        return np.array([float(self.a(x)) for x in X])

    def b_batch(self, X: Array) -> Array:
        if self.vectorized:
            return np.asarray(self.b(X), dtype=float)
        return np.stack([np.asarray(self.b(x), dtype=float) for x in X])

    def ab_batch(self, X: Array) -> tuple[Array, Array]:
        if self.ab is not None and self.vectorized:
            a, b = self.ab(X)
            return np.asarray(a, dtype=float).reshape(X.shape[0]), np.asarray(b, dtype=float)
        return self.a_batch(X), self.b_batch(X)

    def pair(self, x: Array) -> tuple[float, Array]:
        """(a(x), b(x)) at a single state, through the fused path if present."""
        x = np.asarray(x, dtype=float)
        if self.ab is not None:
            a, b = self.ab(x[None, :]) if self.vectorized else self.ab(x)
            return float(np.asarray(a).reshape(-1)[0]), np.asarray(b, dtype=float).reshape(-1)
        return float(self.a(x)), np.asarray(self.b(x), dtype=float)

    def value(self, x: Array, u: Array) -> float:
        a, b = self.pair(x)
        return a + float(b @ np.asarray(u, dtype=float))


def trivial_constraint(m: int, margin: float = 1.0) -> StageConstraint:
    """Constraint that is satisfied everywhere (b = 0, a = margin > 0)."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    zeros = np.zeros(m)
    return StageConstraint(
        a=lambda x: margin if np.ndim(x) == 1 else np.full(np.shape(x)[0], margin),
        b=lambda x: zeros if np.ndim(x) == 1 else np.zeros((np.shape(x)[0], m)),
        vectorized=True,
        label="trivial",
    )


@dataclass(frozen=True)
class ValueQuadratic:
    """Quadratic value data: cost-to-go 0.5 x'Px + T'x."""

    P: Array
    T: Array
    validate: bool = True

    def __post_init__(self):
        P = _symmetrize(np.asarray(self.P, dtype=float))
        T = np.asarray(self.T, dtype=float)
        if self.validate and np.linalg.eigvalsh(P).min() < -VALUE_PSD_TOL:
            raise ValueError("value matrix P must be positive semidefinite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "T", T)

    def __call__(self, x: Array) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.T @ x)


@dataclass(frozen=True)
class PolicyStage:
    """Everything needed to evaluate one stage policy in closed form.

    ``W_const`` caches the inverse control weight when the input matrix is
    state-independent (it then depends only on this stage's data).
    """

    value_next: ValueQuadratic
    cost: StageCost
    constraint: StageConstraint
    W_const: Optional[Array] = None


@dataclass
class PolicySequence:
    """Backward-solved stage policies plus the nominal trajectory they were
    linearized around.  Immutable in spirit: treat as read-only after the
    backward pass."""

    stages: list[PolicyStage]
    nominal: Array
    eta: float
    dyn: DiscreteDynamics
    values: list[ValueQuadratic]
    opts: SolverOptions = DEFAULT_OPTS
    solve_time_s: float = 0.0

    def __post_init__(self):
        self.nominal = np.asarray(self.nominal, dtype=float)
        if self.eta <= 0:
            raise ValueError("softplus sharpness eta must be positive")
        if self.nominal.shape[0] != len(self.stages):
            raise ValueError("nominal trajectory length must equal the stage count")
        if len(self.values) != len(self.stages) + 1:
            raise ValueError("value list must have one more entry than stages")

    @property
    def N(self) -> int:
        return len(self.stages)

    @property
    def n(self) -> int:
        return self.nominal.shape[1]

    @property
    def m(self) -> int:
        return self.stages[0].cost.m


@dataclass
class _StageEval:
    """Batched evaluation of a single stage policy at states X (B, n)."""

    X: Array
    F: Array          # (B, n)
    W: Array          # (m, m) when G is constant, else (B, m, m)
    k: Array          # (B, m)
    a: Array          # (B,)
    b: Array          # (B, m)
    Wb: Array         # (B, m)
    z: Array          # (B,) multiplier argument, -inf where b degenerates
    lam: Array        # (B,)
    lam_smooth: Array  # (B,)
    u_star: Array     # (B, m)
    u_smooth: Array   # (B, m)
    F_smooth: Array   # (B, n)


def softplus(z, eta: float):
    """Smooth upper bound of max(0, z): (1/eta) log(1 + exp(eta z)).

    Evaluated as max(z, 0) + (1/eta) log1p(exp(-eta |z|)) so neither tail
    overflows.  Accepts scalars or arrays; -inf maps to 0.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    z = np.asarray(z, dtype=float)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-eta * np.abs(z))) / eta
    if out.ndim == 0:
        return float(out)
    return out


def _factor_weight(Winv: Array, cond_cap: float, stage_index: Optional[int]):
    """Invert R + G'PG through its eigendecomposition, checking conditioning.

    Returns a symmetric positive-definite inverse (same batch shape as Winv).
    """
    w, V = np.linalg.eigh(Winv)
    wmin = w.min()
    wmax = w.max()
    if wmin <= 0.0 or not np.isfinite(wmin):
        raise IllConditionedError(
            f"control weight R + G'PG is not positive definite (min eig {wmin:.3e})",
            stage_index,
        )
    if wmax / wmin > cond_cap:
        raise IllConditionedError(
            f"control weight condition number {wmax / wmin:.3e} exceeds cap {cond_cap:.3e}",
            stage_index,
        )
    if Winv.ndim == 2:
        W = (V * (1.0 / w)) @ V.T
        return _symmetrize(W)
    W = np.einsum("bij,bj,bkj->bik", V, 1.0 / w, V)
    return 0.5 * (W + np.swapaxes(W, -1, -2))


def _stage_eval(
    X: Array,
    cost: StageCost,
    value_next: ValueQuadratic,
    constraint: StageConstraint,
    dyn: DiscreteDynamics,
    eta: float,
    opts: SolverOptions = DEFAULT_OPTS,
    stage_index: Optional[int] = None,
    W_hint: Optional[Array] = None,
    F_pre: Optional[Array] = None,
    ab_pre: Optional[tuple] = None,
) -> _StageEval:
    """Evaluate the closed-form policy quantities at a batch of states.

    ``W_hint`` short-circuits the weight factorization when the caller has
    already computed it for this stage (valid only with a constant G);
    ``F_pre``/``ab_pre`` inject drift and constraint values precomputed for
    the same X (the backward pass batches them across all stages).
    """
    X = np.asarray(X, dtype=float)
    B = X.shape[0]
    P, T = value_next.P, value_next.T
    R, Omega = cost.R, cost.Omega

    F = dyn.F_batch(X) if F_pre is None else F_pre
    PFt = F @ P + T  # (B, n); P symmetric

    if dyn.constant_G is not None:
        Gc = dyn.constant_G
        if W_hint is not None:
            W = W_hint
        else:
            W = _factor_weight(R + Gc.T @ P @ Gc, opts.cond_cap, stage_index)
        rhs = PFt @ Gc + Omega
        k = -(rhs @ W)
    else:
        G = dyn.G_batch(X)
        Winv = R + np.einsum("bji,jk,bkl->bil", G, P, G)
        W = _factor_weight(Winv, opts.cond_cap, stage_index)
        rhs = np.einsum("bji,bj->bi", G, PFt) + Omega
        k = -np.einsum("bij,bj->bi", W, rhs)

    a, b = constraint.ab_batch(X) if ab_pre is None else ab_pre
    if dyn.constant_G is not None:
        Wb = b @ W
    else:
        Wb = np.einsum("bij,bj->bi", W, b)

    deg = np.einsum("bi,bi->b", b, b) < opts.eps_b**2
    if deg.any():
        bad = deg & (a <= 0.0)
        if bad.any():
            i = int(np.argmax(bad))
            raise InfeasibleConstraintError(
                f"b(x) vanishes with a(x) = {a[i]:.6g} <= 0 at state {X[i]}",
                stage_index,
            )
    z = np.full(B, -np.inf)
    ok = ~deg
    num = -(a + np.einsum("bi,bi->b", b, k))
    den = np.einsum("bi,bi->b", b, Wb)
    z[ok] = num[ok] / den[ok]

    lam = np.maximum(z, 0.0)
    lam_smooth = softplus(z, eta)
    lam_smooth = np.where(deg, 0.0, np.atleast_1d(lam_smooth))
    u_star = k + lam[:, None] * Wb
    u_smooth = k + lam_smooth[:, None] * Wb
    if dyn.constant_G is not None:
        F_smooth = F + u_smooth @ dyn.constant_G.T
    else:
        F_smooth = F + np.einsum("bij,bj->bi", G, u_smooth)

    return _StageEval(
        X=X, F=F, W=W, k=k, a=a, b=b, Wb=Wb, z=z,
        lam=lam, lam_smooth=lam_smooth,
        u_star=u_star, u_smooth=u_smooth, F_smooth=F_smooth,
    )


def gain_W(
    x: Array,
    stage: StageCost,
    P_next: Array,
    dyn: DiscreteDynamics,
    cond_cap: float = DEFAULT_OPTS.cond_cap,
    stage_index: Optional[int] = None,
) -> Array:
    """Inverse control weight W(x) = (R + G(x)'P G(x))^-1, symmetric PD."""
    x = np.asarray(x, dtype=float)
    G = dyn.G_single(x)
    P = _symmetrize(np.asarray(P_next, dtype=float))
    return _factor_weight(stage.R + G.T @ P @ G, cond_cap, stage_index)


def nominal_gain_k(
    x: Array,
    stage: StageCost,
    P_next: Array,
    T_next: Array,
    dyn: DiscreteDynamics,
    cond_cap: float = DEFAULT_OPTS.cond_cap,
    stage_index: Optional[int] = None,
) -> Array:
    """Unconstrained minimizer k(x) = -W(x)[G(x)'(P F(x) + T) + Omega]."""
    x = np.asarray(x, dtype=float)
    W = gain_W(x, stage, P_next, dyn, cond_cap, stage_index)
    G = dyn.G_single(x)
    P = _symmetrize(np.asarray(P_next, dtype=float))
    T = np.asarray(T_next, dtype=float)
    F = np.asarray(dyn.F(x), dtype=float)
    return -W @ (G.T @ (P @ F + T) + stage.Omega)


def multiplier_lambda(
    x: Array,
    constraint: StageConstraint,
    k: Array,
    W: Array,
    eps_b: float = DEFAULT_OPTS.eps_b,
) -> float:
    """Clipped multiplier max{0, (-a - b'k) / (b'Wb)}; zero when b vanishes."""
    x = np.asarray(x, dtype=float)
    a = float(constraint.a(x))
    b = np.asarray(constraint.b(x), dtype=float)
    if float(b @ b) < eps_b**2:
        if a <= 0.0:
            raise InfeasibleConstraintError(f"b(x) vanishes with a(x) = {a:.6g} <= 0 at state {x}")
        return 0.0
    return max(0.0, float(-(a + b @ k) / (b @ W @ b)))


def _policy_stage_eval(policy: PolicySequence, i: int, X: Array) -> _StageEval:
    if not (0 <= i < policy.N):
        raise IndexError(f"stage index {i} outside horizon of length {policy.N}")
    st = policy.stages[i]
    return _stage_eval(X, st.cost, st.value_next, st.constraint, policy.dyn,
                       policy.eta, policy.opts, stage_index=i, W_hint=st.W_const)


def policy_eval(policy: PolicySequence, i: int, x: Array) -> Array:
    """Constrained stage-i control u*(x); satisfies a(x) + b(x)'u >= 0."""
    X, single = _as_batch(x)
    res = _policy_stage_eval(policy, i, X)
    return res.u_star[0] if single else res.u_star


def smoothed_policy_eval(policy: PolicySequence, i: int, x: Array) -> Array:
    """Softplus-smoothed control; differs from u* only through the multiplier."""
    X, single = _as_batch(x)
    res = _policy_stage_eval(policy, i, X)
    return res.u_smooth[0] if single else res.u_smooth


def unconstrained_policy_eval(policy: PolicySequence, i: int, x: Array) -> Array:
    """The multiplier-free branch k_i(x) (used as the desired control in the
    intervention metric)."""
    X, single = _as_batch(x)
    res = _policy_stage_eval(policy, i, X)
    return res.k[0] if single else res.k


def closed_loop_map(policy: PolicySequence, i: int, x: Array) -> Array:
    """One smoothed closed-loop step F(x) + G(x) u_smooth(x)."""
    X, single = _as_batch(x)
    res = _policy_stage_eval(policy, i, X)
    return res.F_smooth[0] if single else res.F_smooth


_UNIT_OFFSET_CACHE: dict[int, Array] = {}


def _unit_offsets(n: int) -> Array:
    """Perturbation pattern rows: center, then (+1, -1, +1/2, -1/2) per axis."""
    U = _UNIT_OFFSET_CACHE.get(n)
    if U is None:
        U = np.zeros((4 * n + 1, n))
        for j in range(n):
            U[1 + 4 * j, j] = 1.0
            U[2 + 4 * j, j] = -1.0
            U[3 + 4 * j, j] = 0.5
            U[4 + 4 * j, j] = -0.5
        _UNIT_OFFSET_CACHE[n] = U
    return U


def _jacobian_batch(xbar: Array, h: float) -> Array:
    """Stack of perturbed states: center, then (+h, -h, +h/2, -h/2) per axis."""
    return xbar[None, :] + h * _unit_offsets(xbar.shape[0])


def _richardson(vals: Array, n: int, h: float) -> Array:
    """Central differences at steps h and h/2 combined to fourth order.

    vals holds rows in the layout produced by _jacobian_batch; the result has
    shape (dim(vals row), n).
    """
    plus_h = vals[1::4]
    minus_h = vals[2::4]
    plus_h2 = vals[3::4]
    minus_h2 = vals[4::4]
    D_h = (plus_h - minus_h).T / (2.0 * h)
    D_h2 = (plus_h2 - minus_h2).T / h
    return (4.0 * D_h2 - D_h) / 3.0


def _stage_jacobians_impl(
    xbar: Array,
    cost: StageCost,
    value_next: ValueQuadratic,
    constraint: StageConstraint,
    dyn: DiscreteDynamics,
    eta: float,
    opts: SolverOptions,
    stage_index: Optional[int] = None,
    pre: Optional[tuple] = None,
):
    """Return (K, A_tilde, center eval) at the nominal point xbar.

    K and A_tilde are the state Jacobians of the smoothed policy and of the
    smoothed closed-loop map, from Richardson-extrapolated central
    differences (step fd_step * (1 + |xbar|)).  With analytic dynamics
    Jacobians available, A_tilde is assembled as dF/dx + (dG/dx : u) + G K
    instead of differencing the closed-loop map.  ``pre`` optionally carries
    (X, F, a, b) for this stage's perturbation batch.
    """
    xbar = np.asarray(xbar, dtype=float)
    n = xbar.shape[0]
    h = dyn.fd_step * (1.0 + float(np.linalg.norm(xbar)))
    if pre is None:
        X = _jacobian_batch(xbar, h)
        res = _stage_eval(X, cost, value_next, constraint, dyn, eta, opts, stage_index)
    else:
        X, F_pre, a_pre, b_pre = pre
        res = _stage_eval(X, cost, value_next, constraint, dyn, eta, opts,
                          stage_index, F_pre=F_pre, ab_pre=(a_pre, b_pre))

    for name, vals in (("policy", res.u_smooth), ("step map", res.F_smooth)):
        finite = np.isfinite(vals).all(axis=1)
        if not finite.all():
            bad = int(np.argmax(~finite))
            coord = (bad - 1) // 4 if bad > 0 else None
            raise JacobianError(
                f"non-finite {name} values while differencing coordinate {coord}",
                coordinate=coord,
            )

    K = _richardson(res.u_smooth, n, h)
    if dyn.jacobian_mode == "analytic":
        u0 = res.u_smooth[0]
        A = np.asarray(dyn.F_jac(xbar), dtype=float)
        A = A + np.einsum("ilj,l->ij", np.asarray(dyn.G_jac(xbar), dtype=float), u0)
        A = A + dyn.G_single(xbar) @ K
    else:
        A = _richardson(res.F_smooth, n, h)
    return K, A, res


def stage_jacobians(policy: PolicySequence, i: int, xbar: Array):
    """State Jacobians (K, A_tilde) of the smoothed stage-i policy and
    closed-loop map at xbar."""
    if not (0 <= i < policy.N):
        raise IndexError(f"stage index {i} outside horizon of length {policy.N}")
    st = policy.stages[i]
    K, A, _ = _stage_jacobians_impl(
        xbar, st.cost, st.value_next, st.constraint, policy.dyn, policy.eta, policy.opts, i
    )
    return K, A


def _clip_psd(P: Array) -> Array:
    """Symmetrize and clip eigenvalues below -PSD_CLIP up to zero."""
    P = _symmetrize(P)
    w = np.linalg.eigvalsh(P)
    if w.min() < -PSD_CLIP:
        w2, V = np.linalg.eigh(P)
        P = (V * np.clip(w2, 0.0, None)) @ V.T
        P = _symmetrize(P)
    return P


def _riccati_step_full(P_next, T_next, xbar, stage, constraint, dyn, eta, opts,
                       stage_index=None, pre=None):
    P_next = _symmetrize(np.asarray(P_next, dtype=float))
    T_next = np.asarray(T_next, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    value_next = ValueQuadratic(P_next, T_next, validate=False)

    K, A, res = _stage_jacobians_impl(xbar, stage, value_next, constraint, dyn, eta,
                                      opts, stage_index, pre=pre)
    u0 = res.u_star[0]
    if dyn.constant_G is not None:
        F_star = res.F[0] + dyn.constant_G @ u0
    else:
        F_star = res.F[0] + dyn.G_single(xbar) @ u0

    P = stage.Q + K.T @ stage.R @ K + A.T @ P_next @ A
    P = _clip_psd(P)
    T = (
        A.T @ (P_next @ (F_star - A @ xbar) + T_next)
        + K.T @ (stage.R @ u0 - stage.R @ (K @ xbar) + stage.Omega)
        + stage.Gamma
    )
    W_const = res.W if dyn.constant_G is not None else None
    return ValueQuadratic(P, T, validate=False), value_next, W_const


def riccati_step(
    P_next: Array,
    T_next: Array,
    xbar: Array,
    stage: StageCost,
    constraint: StageConstraint,
    dyn: DiscreteDynamics,
    eta: float,
    opts: SolverOptions = DEFAULT_OPTS,
    stage_index: Optional[int] = None,
) -> ValueQuadratic:
    """One backward step of the quadratic value recursion.

        P = Q + K'RK + A'P+ A
        T = A'(P+ (F* - A xbar) + T+) + K'(R u* - R K xbar + Omega) + Gamma

    where u* is the exact constrained control at xbar, F* the resulting next
    state, and (K, A) the smoothed-policy Jacobians at xbar.
    """
    value, _, _ = _riccati_step_full(P_next, T_next, xbar, stage, constraint, dyn,
                                     eta, opts, stage_index)
    return value


def backward_pass(
    N: int,
    nominal: Array,
    costs: Sequence[StageCost],
    terminal: TerminalCost,
    constraints,
    dyn: DiscreteDynamics,
    eta: float,
    opts: SolverOptions = DEFAULT_OPTS,
) -> PolicySequence:
    """Solve the stage policies from the horizon end back to stage 0.

    ``constraints`` may be a single StageConstraint shared by every stage or a
    sequence of length N.  The first failing stage aborts the pass with its
    index attached.
    """
    nominal = np.asarray(nominal, dtype=float)
    if nominal.shape[0] != N:
        raise ValueError(f"nominal trajectory has {nominal.shape[0]} points, expected {N}")
    if len(costs) != N:
        raise ValueError(f"expected {N} stage costs, got {len(costs)}")
    shared_constraint = isinstance(constraints, StageConstraint)
    if shared_constraint:
        constraints = [constraints] * N
    elif len(constraints) != N:
        raise ValueError(f"expected {N} stage constraints, got {len(constraints)}")

    # Drift and constraint values along the perturbation batches depend only
    # on the nominal trajectory, so evaluate them for every stage in one
    # vectorized sweep (possible whenever the constraint is stage-shared).
    pres: Optional[list] = None
    if shared_constraint and N > 1:
        n = nominal.shape[1]
        npts = 4 * n + 1
        hs = dyn.fd_step * (1.0 + np.linalg.norm(nominal, axis=1))
        X_all = nominal[:, None, :] + hs[:, None, None] * _unit_offsets(n)[None, :, :]
        X_flat = X_all.reshape(N * npts, n)
        F_flat = dyn.F_batch(X_flat).reshape(N, npts, n)
        a_flat, b_flat = constraints[0].ab_batch(X_flat)
        a_all = a_flat.reshape(N, npts)
        b_all = b_flat.reshape(N, npts, -1)
        pres = [(X_all[i], F_flat[i], a_all[i], b_all[i]) for i in range(N)]

    values: list[Optional[ValueQuadratic]] = [None] * (N + 1)
    values[N] = ValueQuadratic(terminal.Q_N, terminal.Gamma_N, validate=False)
    w_cache: list[Optional[Array]] = [None] * N
    for i in range(N - 1, -1, -1):
        try:
            values[i], values[i + 1], w_cache[i] = _riccati_step_full(
                values[i + 1].P, values[i + 1].T, nominal[i],
                costs[i], constraints[i], dyn, eta, opts, stage_index=i,
                pre=None if pres is None else pres[i],
            )
        except SolverError as exc:
            raise BackwardPassError(i, exc) from exc
    stages = [
        PolicyStage(value_next=values[i + 1], cost=costs[i],
                    constraint=constraints[i], W_const=w_cache[i])
        for i in range(N)
    ]
    return PolicySequence(stages=stages, nominal=nominal, eta=eta, dyn=dyn,
                          values=values, opts=opts)


def approx_stage_cost(
    stage: StageCost,
    P_next: Array,
    T_next: Array,
    dyn: DiscreteDynamics,
    x: Array,
    u: Array,
) -> float:
    """Stage cost plus the quadratic cost-to-go at the next state:

        l(x, u) + 0.5 y'P y + T'y,   y = F(x) + G(x) u.

    This is the objective each closed-form stage policy minimizes subject to
    the stage constraint.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    P = _symmetrize(np.asarray(P_next, dtype=float))
    T = np.asarray(T_next, dtype=float)
    y = np.asarray(dyn.F(x), dtype=float) + dyn.G_single(x) @ u
    return stage(x, u) + float(0.5 * y @ P @ y + T @ y)
