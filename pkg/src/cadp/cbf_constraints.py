"""Barrier composition into a single affine-in-control safety constraint.

Many scalar barriers h_1..h_K (each nonnegative on its own safe region) are
combined by a log-sum-exponential soft minimum

    psi0(x) = -(1/rho) log( sum_i exp(-rho h_i(x)) ),

which lower-bounds min_i h_i within log(K)/rho.  When the composed barrier
has relative degree d > 1 with respect to the controlled dynamics, a chain

    psi_j = L_f psi_{j-1} + alpha_{j-1}(psi_{j-1})

raises it to relative degree one, after which the control constraint is
affine:  a(x) + b(x)' [v; delta] >= 0 with

    a(x) = L_f psi_{d-1}(x) + alpha(psi_{d-1}(x))
    b(x) = [ (grad psi_{d-1}(x))' g(x) ,  psi_{d-1}(x) ].

The trailing b entry couples the slack variable delta to the barrier value so
the constraint can only be relaxed away from the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cadp_core import StageConstraint

Array = np.ndarray


class ChainError(RuntimeError):
    """Lie-derivative chain produced non-finite values."""

    def __init__(self, msg: str, level: Optional[int] = None):
        super().__init__(msg if level is None else f"chain level {level}: {msg}")
        self.level = level


def linear_class_k(kappa: float) -> Callable:
    """Extended class-K function alpha(z) = kappa z with kappa > 0."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return lambda z: kappa * z


def _fd_gradient(fn: Callable, X: Array, step: float) -> Array:
    """Batched central-difference gradient of a scalar field fn(X) -> (B,)."""
    B, n = X.shape
    grads = np.empty((B, n))
    for j in range(n):
        Xp = X.copy()
        Xm = X.copy()
        Xp[:, j] += step
        Xm[:, j] -= step
        grads[:, j] = (np.asarray(fn(Xp)) - np.asarray(fn(Xm))) / (2.0 * step)
    return grads


def _as_batch(x) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


@dataclass(frozen=True)
class Barrier:
    """Scalar barrier h with gradient; safe where h >= 0.

    ``grad_h`` is optional; when omitted the gradient falls back to central
    differences with ``fd_step``.  Set ``vectorized`` if h/grad_h accept
    stacked states (B, n).
    """

    h: Callable
    grad_h: Optional[Callable] = None
    label: str = ""
    vectorized: bool = False
    fd_step: float = 1e-6

    def value(self, x):
        X, single = _as_batch(x)
        if self.vectorized:
            vals = np.asarray(self.h(X), dtype=float).reshape(X.shape[0])
        else:
            vals = np.array([float(self.h(xi)) for xi in X])
        return float(vals[0]) if single else vals

    def grad(self, x):
        X, single = _as_batch(x)
        if self.grad_h is not None:
            if self.vectorized:
                g = np.asarray(self.grad_h(X), dtype=float)
            else:
                g = np.stack([np.asarray(self.grad_h(xi), dtype=float) for xi in X])
        else:
            fn = (lambda Xb: self.h(Xb)) if self.vectorized \
                else (lambda Xb: np.array([float(self.h(xi)) for xi in Xb]))
            g = _fd_gradient(fn, X, self.fd_step)
        return g[0] if single else g

    def value_and_grad(self, X: Array):
        """Batched (values, gradients); overridden where the two share work."""
        return (np.atleast_1d(self.value(X)), np.atleast_2d(self.grad(X)))


def soft_min(values, rho: float) -> float:
    """Log-sum-exponential lower bound of min(values) with sharpness rho.

    Shifted by the minimum before exponentiation so that large rho (over-unity
    sharpness times large barrier values) cannot overflow:

        m - (1/rho) log( sum exp(-rho (h_i - m)) ),  m = min h_i.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("soft_min needs at least one value")
    m = v.min()
    return float(m - np.log(np.exp(-rho * (v - m)).sum()) / rho)


def soft_min_batch(values: Array, rho: float) -> Array:
    """soft_min along the last axis of a (B, K) array."""
    m = values.min(axis=-1, keepdims=True)
    return (m - np.log(np.exp(-rho * (values - m)).sum(axis=-1, keepdims=True)) / rho)[..., 0]


def soft_min_weights(values: Array, rho: float) -> Array:
    """Softmax weights of -rho * values along the last axis (they sum to 1);
    the gradient of the soft minimum is the weighted sum of member gradients."""
    m = np.min(values, axis=-1, keepdims=True)
    e = np.exp(-rho * (values - m))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SoftMinBarrier:
    """Soft-minimum composition of several barriers.

    ``members_eval`` is an optional fused fast path returning all member
    values (B, K) and gradients (B, K, n) in one call; the default stacks the
    per-member evaluations.  The composition satisfies

        min_i h_i - log(K)/rho <= psi0 <= min_i h_i.
    """

    members: tuple
    rho: float
    members_eval: Optional[Callable] = None
    label: str = "soft_min"

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if len(self.members) == 0:
            raise ValueError("at least one member barrier is required")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def n_members(self) -> int:
        return len(self.members)

    def member_values(self, x):
        X, single = _as_batch(x)
        if self.members_eval is not None:
            vals, _ = self.members_eval(X)
        else:
            vals = np.stack([m.value(X) for m in self.members], axis=-1)
        return vals[0] if single else vals

    def members_evaluate(self, X: Array):
        """(values (B, K), grads (B, K, n)) for stacked states."""
        if self.members_eval is not None:
            return self.members_eval(X)
        vals = np.stack([m.value(X) for m in self.members], axis=-1)
        grads = np.stack([m.grad(X) for m in self.members], axis=1)
        return vals, grads

    def value(self, x):
        X, single = _as_batch(x)
        if self.members_eval is not None:
            vals, _ = self.members_eval(X)
        else:
            vals = np.stack([m.value(X) for m in self.members], axis=-1)
        out = soft_min_batch(vals, self.rho)
        return float(out[0]) if single else out

    def grad(self, x):
        X, single = _as_batch(x)
        vals, grads = self.members_evaluate(X)
        w = soft_min_weights(vals, self.rho)
        g = np.einsum("bk,bkn->bn", w, grads)
        return g[0] if single else g

    def value_and_grad(self, X: Array):
        """One member sweep for both the composed value and its gradient."""
        vals, grads = self.members_evaluate(X)
        w = soft_min_weights(vals, self.rho)
        return soft_min_batch(vals, self.rho), np.einsum("bk,bkn->bn", w, grads)


@dataclass(frozen=True)
class HigherOrderChain:
    """Relative-degree lift of a barrier along drift dynamics f, g.

    ``alphas`` holds ``degree`` extended class-K functions: the first
    degree-1 of them build the chain levels psi_1..psi_{d-1}; the last one is
    the default outer gain used by affine_terms.  ``constant_g`` may supply a
    state-independent input matrix.  Chain levels beyond psi0 differentiate
    the previous level by central differences (``fd_step``) unless the level
    is psi0 itself, whose own gradient rule applies.
    """

    psi0: object  # Barrier or SoftMinBarrier
    degree: int
    alphas: tuple
    f: Callable
    g: Optional[Callable] = None
    constant_g: Optional[Array] = None
    vectorized_f: bool = False
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if len(self.alphas) != self.degree:
            raise ValueError(f"expected {self.degree} class-K functions, got {len(self.alphas)}")
        if self.g is None and self.constant_g is None:
            raise ValueError("either g or constant_g is required")
        if self.constant_g is not None:
            object.__setattr__(self, "constant_g", np.asarray(self.constant_g, dtype=float))
        object.__setattr__(self, "alphas", tuple(self.alphas))

    def f_batch(self, X: Array) -> Array:
        if self.vectorized_f:
            return np.asarray(self.f(X), dtype=float)
        return np.stack([np.asarray(self.f(xi), dtype=float) for xi in X])

    def g_at(self, x: Array) -> Array:
        if self.constant_g is not None:
            return self.constant_g
        return np.asarray(self.g(np.asarray(x, dtype=float)), dtype=float)

    def level_functions(self):
        """(value, gradient, fused value+gradient) closures for each chain
        level psi_0 .. psi_{d-1}, built recursively."""
        psi0_vg = getattr(self.psi0, "value_and_grad", None)
        if psi0_vg is None:
            psi0_vg = lambda X: (np.atleast_1d(self.psi0.value(X)),
                                 np.atleast_2d(self.psi0.grad(X)))
        levels = [(lambda X: np.atleast_1d(self.psi0.value(X)),
                   lambda X: np.atleast_2d(self.psi0.grad(X)),
                   psi0_vg)]
        for j in range(1, self.degree):
            _, _, prev_vg = levels[j - 1]
            alpha = self.alphas[j - 1]

            def val(X, _pvg=prev_vg, _al=alpha):
                pv, pg = _pvg(X)
                lie = np.einsum("bn,bn->b", pg, self.f_batch(X))
                return lie + np.asarray(_al(pv), dtype=float)

            def grad(X, _v=val):
                return _fd_gradient(_v, X, self.fd_step)

            def val_grad(X, _v=val, _g=grad):
                return _v(X), _g(X)

            levels.append((val, grad, val_grad))
        return levels


def lift_chain(chain: HigherOrderChain, x) -> list[float]:
    """Values psi_0(x) .. psi_{d-1}(x); all nonnegative iff x is in the
    intersection of the chain's superlevel sets."""
    X, single = _as_batch(x)
    levels = chain.level_functions()
    out = []
    for j, (val, _, _) in enumerate(levels):
        v = np.asarray(val(X), dtype=float)
        if not np.isfinite(v).all():
            raise ChainError("non-finite value", level=j)
        out.append(v)
    if single:
        return [float(v[0]) for v in out]
    return out


def _affine_terms_batch(chain: HigherOrderChain, alpha: Callable, X: Array):
    levels = chain.level_functions()
    _, _, val_grad = levels[-1]
    psi, grad = val_grad(X)
    psi = np.asarray(psi, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not (np.isfinite(psi).all() and np.isfinite(grad).all()):
        raise ChainError("non-finite value or gradient", level=chain.degree - 1)
    fX = chain.f_batch(X)
    Lf = np.einsum("bn,bn->b", grad, fX)
    a = Lf + np.asarray(alpha(psi), dtype=float)
    if chain.constant_g is not None:
        Lg = grad @ chain.constant_g
    else:
        Lg = np.stack([grad[i] @ chain.g_at(X[i]) for i in range(X.shape[0])])
    b = np.concatenate([Lg, psi[:, None]], axis=1)
    return a, b


def affine_terms(chain: HigherOrderChain, alpha: Optional[Callable], x):
    """Affine constraint data (a, b) at x for the lifted barrier.

    a(x) = L_f psi_{d-1} + alpha(psi_{d-1});  b(x) stacks L_g psi_{d-1} with
    the barrier value itself as the slack coefficient.  For any stacked
    control [v; delta], a + b'[v; delta] reproduces the constraint function
    exactly.
    """
    if alpha is None:
        alpha = chain.alphas[-1]
    X, single = _as_batch(x)
    a, b = _affine_terms_batch(chain, alpha, X)
    if single:
        return float(a[0]), b[0]
    return a, b


def to_stage_constraint(chain: HigherOrderChain, alpha: Optional[Callable] = None,
                        label: str = "") -> StageConstraint:
    """Wrap the chain's affine terms as a solver stage constraint (with the
    fused a/b evaluation wired in)."""
    outer = alpha if alpha is not None else chain.alphas[-1]

    def a_fn(x):
        a, _ = affine_terms(chain, outer, x)
        return a

    def b_fn(x):
        _, b = affine_terms(chain, outer, x)
        return b

    def ab_fn(X):
        return _affine_terms_batch(chain, outer, X)

    return StageConstraint(a=a_fn, b=b_fn, ab=ab_fn, vectorized=True, label=label)
