"""Conflict-free projection of the public gradient onto the local half-space.

Given the public gradient ``g_pub`` and the local direction ``g_loc`` we want
the closest vector ``g`` (in L2) with ``<g, g_loc> >= 0``.  Written as the QP

    min_z  1/2 z'z - g_pub'z        s.t.  -g_loc'z <= 0

its dual has a single nonnegative variable ``v``:

    min_v  1/2 v^2 <g_loc, g_loc> + v <g_pub, g_loc>     s.t.  v >= 0

with solution ``v* = max(0, -<g_pub, g_loc> / <g_loc, g_loc>)`` and primal
``g = g_pub + v* g_loc``.  ``qp_dual_numeric`` solves the generic dual
iteratively and serves as an independent check of the closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM_SQ = 1e-24


class DegenerateLocalGradient(ArithmeticError):
    """The local gradient is (numerically) zero while a conflict is reported."""


@dataclass
class ProjectionResult:
    g_tilde: np.ndarray
    v_star: float
    conflicted: bool
    dot_before: float
    dot_after: float
    g_loc_norm: float = float("nan")

    def satisfies_constraint(self, rel: float = 1e-9) -> bool:
        return self.dot_after >= -rel * float(np.linalg.norm(self.g_tilde)) * self.g_loc_norm


def project(g_pub: np.ndarray, g_loc: np.ndarray) -> ProjectionResult:
    g_pub = np.asarray(g_pub, dtype=np.float64)
    g_loc = np.asarray(g_loc, dtype=np.float64)
    if g_pub.shape != g_loc.shape:
        raise ValueError(f"gradient shapes differ: {g_pub.shape} vs {g_loc.shape}")
    dot = float(g_pub @ g_loc)
    if dot >= 0:
        return ProjectionResult(g_pub, 0.0, False, dot, dot, float(np.linalg.norm(g_loc)))
    sq = float(g_loc @ g_loc)
    if sq < DEGENERATE_NORM_SQ:
        raise DegenerateLocalGradient(f"|g_loc|^2 = {sq:.3e} with conflict {dot:.3e}")
    v = -dot / sq
    g_tilde = g_pub + v * g_loc
    return ProjectionResult(g_tilde, v, True, dot, float(g_tilde @ g_loc), np.sqrt(sq))


def project_or_pass(g_pub: np.ndarray, g_loc: np.ndarray) -> ProjectionResult:
    """``project`` with the degenerate case falling back to ``g_pub``."""
    try:
        return project(g_pub, g_loc)
    except DegenerateLocalGradient:
        dot = float(np.dot(g_pub, g_loc))
        return ProjectionResult(np.asarray(g_pub, dtype=np.float64), 0.0, True, dot, dot,
                                float(np.linalg.norm(g_loc)))


@dataclass
class QpProblem:
    """Primal ``min 1/2 z'Cz + w'z  s.t.  Az <= b`` (p variables, q constraints).

    ``C=None`` stands for the p x p identity, which keeps high-dimensional
    projection problems from materialising a dense matrix.
    """

    C: np.ndarray | None
    w: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.C is not None:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        self.w = np.atleast_1d(np.asarray(self.w, dtype=np.float64))
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))

    @classmethod
    def for_projection(cls, g_pub, g_loc) -> "QpProblem":
        """C = I, w = -g_pub, A = -g_loc' (one row), b = 0."""
        g_pub = np.asarray(g_pub, dtype=np.float64)
        g_loc = np.asarray(g_loc, dtype=np.float64)
        return cls(None, -g_pub, -g_loc[None, :], [0.0])

    def dual_terms(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadratic ``A C^-1 A'`` and linear ``w' C^-1 A' + b`` dual terms."""
        if self.C is None:
            c_inv_at = self.A.T
        else:
            sym = (self.C + self.C.T) / 2
            if np.linalg.eigvalsh(sym).min() <= 0:
                raise ValueError("C must be positive definite for the dual")
            c_inv_at = np.linalg.solve(self.C, self.A.T)
        return self.A @ c_inv_at, self.w @ c_inv_at + self.b

    def primal_from_dual(self, v) -> np.ndarray:
        """z* = -C^-1 (A'v + w)."""
        rhs = self.A.T @ np.atleast_1d(v) + self.w
        return -rhs if self.C is None else -np.linalg.solve(self.C, rhs)


def qp_dual_numeric(problem: QpProblem, tol: float = 1e-13, max_iter: int = 100_000):
    """Minimize the QP dual over ``v >= 0`` numerically.

    A scalar dual is solved by bisection on the sign of its derivative after
    doubling out a bracket; larger duals use projected gradient descent with
    step 1/L. Returns a float for one constraint, an array otherwise.
    """
    quad, lin = problem.dual_terms()
    if quad.shape == (1, 1):
        return _bisect_scalar(float(quad[0, 0]), float(lin[0]), tol)
    step = 1.0 / max(np.linalg.eigvalsh(quad).max(), 1e-300)
    v = np.zeros(lin.size)
    for _ in range(max_iter):
        nxt = np.maximum(v - step * (quad @ v + lin), 0.0)
        if np.max(np.abs(nxt - v)) < tol:
            return nxt
        v = nxt
    return v


def _bisect_scalar(a: float, c: float, tol: float) -> float:
    slope = lambda v: a * v + c  # noqa: E731
    if slope(0.0) >= 0:
        return 0.0
    if a <= 0:
        raise ValueError("dual is unbounded below on v >= 0")
    lo, hi = 0.0, 1.0
    while slope(hi) < 0:
        lo, hi = hi, 2 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if slope(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def pcgrad_symmetric(g_a: np.ndarray, g_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided PCGrad: each conflicting gradient loses its component along the other."""
    g_a = np.asarray(g_a, dtype=np.float64)
    g_b = np.asarray(g_b, dtype=np.float64)
    if g_a.shape != g_b.shape:
        raise ValueError("gradient shapes differ")
    dot = float(g_a @ g_b)
    if dot >= 0:
        return g_a, g_b
    na, nb = float(g_a @ g_a), float(g_b @ g_b)
    if na == 0 or nb == 0:
        return g_a, g_b
    return g_a - (dot / nb) * g_b, g_b - (dot / na) * g_a
