"""Seedable randomness and the Krylov solvers shared by every solver.

Random streams come from numpy's Philox4x64 bit generator. Philox is
counter based, so a seed fully determines the stream on every platform,
and ``jumped`` gives non-overlapping parallel streams. Uniform doubles are
taken from ``Generator.random`` (53 random bits per draw); normal draws use
the Box-Muller transform on those uniforms rather than numpy's ziggurat so
the normal stream is a documented function of the uniform stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an iterative solver produces NaN or inf."""


class ConvergenceError(RuntimeError):
    """Raised when a tolerance-driven solve stops short of its tolerance."""

    def __init__(self, message: str, residual: float, iters: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iters} iterations)")
        self.residual = residual
        self.iters = iters


@dataclass(frozen=True)
class LinearOperator:
    """A linear map given by its forward and adjoint actions on arrays."""

    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    in_shape: tuple
    out_shape: tuple

    def __call__(self, x):
        return self.forward(x)

    @classmethod
    def from_matrix(cls, M) -> "LinearOperator":
        M = np.asarray(M, dtype=np.float64) if not hasattr(M, "tocsr") else M
        return cls(lambda x: M @ x, lambda y: M.T @ y, (M.shape[1],), (M.shape[0],))

    @classmethod
    def identity(cls, n: int) -> "LinearOperator":
        return cls(lambda x: np.array(x, dtype=np.float64), lambda y: np.array(y, dtype=np.float64), (n,), (n,))


def adjoint_mismatch(op: LinearOperator, x: np.ndarray, y: np.ndarray) -> float:
    """Relative mismatch |<Fx, y> - <x, F^T y>| / (||Fx|| ||y||)."""
    fx = op.forward(x)
    lhs = float(np.vdot(fx, y))
    rhs = float(np.vdot(x, op.adjoint(y)))
    scale = np.linalg.norm(fx) * np.linalg.norm(y)
    if scale == 0.0:
        return abs(lhs - rhs)
    return abs(lhs - rhs) / scale


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite value in iterative solve")


def cg_solve(op, b, x0=None, tol: float = 1e-8, max_iter: int = 500):
    """Conjugate gradient for a symmetric positive (semi-)definite ``op``.

    Every column of ``b`` is an independent system; step lengths are
    computed per column. Returns ``(x, residual, iters)`` where residual is
    the worst relative residual over columns. A zero right-hand side column
    returns zero for that column without iterating.
    """
    A = op.forward if isinstance(op, LinearOperator) else op
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64).reshape(b.shape)
    bnorm = np.linalg.norm(b, axis=0)
    active = bnorm > 0
    x[:, ~active] = 0.0
    if not active.any():
        return (x[:, 0] if vector else x), 0.0, 0

    r = b - A(x)
    r[:, ~active] = 0.0
    _check_finite(r)
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    safe_b = np.where(active, bnorm, 1.0)

    def rel_res():
        return float(np.max(np.sqrt(rs) / safe_b))

    it = 0
    res = rel_res()
    while res > tol and it < max_iter:
        Ap = A(p)
        pAp = np.einsum("ij,ij->j", p, Ap)
        step = np.divide(rs, pAp, out=np.zeros_like(rs), where=pAp > 0)
        x += step * p
        r -= step * Ap
        rs_new = np.einsum("ij,ij->j", r, r)
        beta = np.divide(rs_new, rs, out=np.zeros_like(rs), where=rs > 0)
        p = r + beta * p
        rs = rs_new
        it += 1
        _check_finite(x, r)
        res = rel_res()
    return (x[:, 0] if vector else x), res, it


def cgls_solve(op: LinearOperator, d, x0, iters: int):
    """Run exactly ``iters`` CGLS steps on min ||op(x) - d||^2 from ``x0``."""
    d = np.asarray(d, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    if iters <= 0:
        return x
    r = d - op.forward(x)
    s = op.adjoint(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    for _ in range(iters):
        if gamma == 0.0:
            break
        q = op.forward(p)
        delta = float(np.vdot(q, q))
        if delta == 0.0:
            break
        alpha = gamma / delta
        x = x + alpha * p
        r = r - alpha * q
        s = op.adjoint(r)
        gamma_new = float(np.vdot(s, s))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        _check_finite(x, r)
    return x


class Rng:
    """Single-owner random stream; see the module docstring for the algorithm."""

    def __init__(self, seed: int, _bitgen=None):
        self.seed = int(seed)
        self._bitgen = _bitgen if _bitgen is not None else np.random.Philox(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), sigma: float = 1.0) -> np.ndarray:
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape, dtype=np.int64))
        if sigma == 0:
            return np.zeros(shape)
        half = (size + 1) // 2
        u = self._gen.random((2, half))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u lies in (0, 1]
        angle = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:size]
        return sigma * z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, k: int, n: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot choose {k} items from {n} without replacement")
        return self._gen.permutation(n)[:k]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def jumped(self, jumps: int = 1) -> "Rng":
        """Independent stream advanced by ``jumps`` * 2**128 draws."""
        return Rng(self.seed, self._bitgen.jumped(jumps))

    def child(self, offset: int) -> "Rng":
        """A fresh stream for a derived seed (seed * 1_000_003 + offset)."""
        return Rng(derive_seed(self.seed, offset))


def derive_seed(seed: int, offset: int) -> int:
    return (int(seed) * 1_000_003 + int(offset)) % (2**63)


def rng_new(seed: int) -> Rng:
    return Rng(seed)


def rng_normal(rng: Rng, shape, sigma: float = 1.0) -> np.ndarray:
    return rng.normal(shape, sigma)


def rng_uniform(rng: Rng, shape) -> np.ndarray:
    return rng.uniform(shape)


def rng_choice(rng: Rng, k: int, n: int) -> np.ndarray:
    return rng.choice(k, n)


def power_iteration(op: Callable[[np.ndarray], np.ndarray], n: int, iters: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue estimate of a symmetric PSD operator on R^n."""
    v = Rng(seed).normal((n, 1))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = op(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam
