"""Time-invariant flock analysis.

Stationary distributions, fundamental matrices and limit configurations are
rational and computed exactly; eigen-structure goes through the symmetrized
matrix ``M = C^{-1/2} P C^{1/2}`` in floating point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from gmpy2 import mpq

from .dynamics import Network, TransitionMatrix
from .numerics import (
    EXACT,
    DimensionError,
    Field,
    check_square,
    exact_solve,
    identity_like,
    is_exact_array,
    mat_power,
    to_float,
)


class DisconnectedFlockError(ValueError):
    pass


class EigenSolverError(ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


RESIDUAL_TOL = 1e-10


def _exact(a) -> bool:
    return is_exact_array(np.asarray(a, dtype=object)) if np.asarray(a).dtype == object else False


def footprint_graph(P) -> Network:
    """Network whose edges are the off-diagonal nonzeros of ``P``."""
    P = np.asarray(P)
    n = check_square(P)
    return Network(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)
                                if P[i, j] != 0 or P[j, i] != 0))


def infer_confidence(P) -> np.ndarray:
    """Recover ``c`` from ``P = I - C L`` (``c_i`` is any off-diagonal nonzero of row i)."""
    P = np.asarray(P)
    n = check_square(P)
    c = []
    for i in range(n):
        off = [P[i, j] for j in range(n) if j != i and P[i, j] != 0]
        if not off:
            c.append(mpq(1) if P.dtype == object else 1.0)
            continue
        if any(z != off[0] for z in off):
            raise ValueError(f"row {i} is not of the form I - C L")
        c.append(off[0])
    return np.array(c, dtype=object if P.dtype == object else P.dtype)


def stationary_distribution(c, network: Network | None = None) -> np.ndarray:
    """``pi_i`` proportional to ``1 / c_i``; exact for rational ``c``.

    Accepts a :class:`TransitionMatrix` in place of ``c``.
    """
    if isinstance(c, TransitionMatrix):
        c, network = c.c, c.network
    c = np.asarray(c)
    if network is not None:
        if network.n != len(c):
            raise DimensionError("confidence vector and network sizes differ")
        if not network.is_connected():
            raise DisconnectedFlockError(f"flock is disconnected: {network.flocks}")
    if any(z <= 0 for z in c):
        raise ValueError("confidence coefficients must be positive")
    if c.dtype == object and all(isinstance(z, mpq) for z in c):
        inv = [1 / z for z in c]
        tot = sum(inv)
        return np.array([z / tot for z in inv], dtype=object)
    inv = 1 / c.astype(float) if c.dtype == object else 1 / c
    return inv / inv.sum()


def is_reversible(P, c) -> bool:
    """Exact check that ``C^{-1/2} P C^{1/2}`` is symmetric, via squared entries."""
    P = np.asarray(P)
    n = check_square(P)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = P[i, j], P[j, i]
            if (a == 0) != (b == 0) or (a < 0) != (b < 0):
                return False
            if a * a * c[j] * c[j] != b * b * c[i] * c[i]:
                return False
    return True


def symmetrize(P, c) -> np.ndarray:
    """``M = C^{-1/2} P C^{1/2}`` in floating point."""
    P = np.asarray(P)
    n = check_square(P)
    if len(c) != n:
        raise DimensionError("confidence vector and matrix sizes differ")
    if any(z <= 0 for z in c):
        raise ValueError("confidence coefficients must be positive")
    cf = to_float(np.asarray(c, dtype=object) if np.asarray(c).dtype == object else np.asarray(c))
    root = np.sqrt(cf)
    return to_float(P) * root[None, :] / root[:, None]


@dataclass
class FlockSpectrum:
    size: int
    pi: np.ndarray
    eigenvalues: np.ndarray          # descending
    vectors: np.ndarray              # orthonormal columns u_k of M
    right: np.ndarray                # C^{1/2} u_k
    left: np.ndarray                 # C^{-1/2} u_k
    mu: float
    residual: float

    def report(self) -> dict:
        return {"size": self.size, "eigenvalues": [float(x) for x in self.eigenvalues],
                "pi": [str(p) for p in self.pi], "mu": self.mu, "residual": self.residual}


def spectrum(P, c=None) -> FlockSpectrum:
    P = np.asarray(P)
    n = check_square(P)
    if c is None:
        c = infer_confidence(P)
    g = footprint_graph(P)
    if not g.is_connected():
        raise DisconnectedFlockError(f"flock is disconnected: {g.flocks}")
    M = symmetrize(P, c)
    M = (M + M.T) / 2
    lam, U = np.linalg.eigh(M)
    order = np.argsort(lam)[::-1]
    lam, U = lam[order], U[:, order]
    residual = float(np.abs(M @ U - U * lam[None, :]).max()) if n else 0.0
    if residual > RESIDUAL_TOL:
        raise EigenSolverError("symmetric eigensolver did not converge", residual)
    root = np.sqrt(to_float(np.asarray(c, dtype=object) if np.asarray(c).dtype == object else c))
    mu = float(np.abs(lam[1:]).max()) if n > 1 else 0.0
    pi = stationary_distribution(np.asarray(c), g)
    return FlockSpectrum(n, pi, lam, U, U * root[:, None], U / root[:, None], mu, residual)


# --------------------------------------------------------------------------
# ergodicity coefficients


def tau1(A):
    """Half the largest l1 distance between rows (the min-overlap form for stochastic A)."""
    A = np.asarray(A)
    m = A.shape[0]
    best = A.flat[0] * 0 if A.size else 0
    for i in range(m):
        for j in range(i + 1, m):
            d = sum(abs(A[i] - A[j]))
            if d > best:
                best = d
    return best / 2


def tau1_overlap(A):
    """``1 - min_{i,j} sum_k min(a_ik, a_jk)``, valid for row-stochastic A."""
    A = np.asarray(A)
    m = A.shape[0]
    low = None
    for i in range(m):
        for j in range(i, m):
            s = sum(np.minimum(A[i], A[j])) if A.dtype != object else sum(min(a, b) for a, b in zip(A[i], A[j]))
            low = s if low is None or s < low else low
    return 1 - low


def tau2_sq(A):
    """Square of the largest l2 distance between rows (exact for rational A)."""
    A = np.asarray(A)
    m = A.shape[0]
    best = A.flat[0] * 0 if A.size else 0
    for i in range(m):
        for j in range(i + 1, m):
            diff = A[i] - A[j]
            d = sum(diff * diff)
            if d > best:
                best = d
    return best


def tau2(A) -> float:
    return math.sqrt(float(tau2_sq(A)))


def backward_product(seq):
    """``P(k) ... P(2) P(1)`` for the time-ordered sequence ``P(1), ..., P(k)``."""
    seq = list(seq)
    if not seq:
        raise ValueError("empty product")
    out = seq[0]
    for A in seq[1:]:
        out = A @ out
    return out


def forward_product(seq):
    """``P(1) P(2) ... P(k)``."""
    seq = list(seq)
    if not seq:
        raise ValueError("empty product")
    out = seq[0]
    for A in seq[1:]:
        out = out @ A
    return out


# --------------------------------------------------------------------------
# fundamental matrix and limit configurations


@dataclass
class FundamentalMatrix:
    gamma: np.ndarray
    P: np.ndarray
    pi: np.ndarray

    def residuals(self) -> dict:
        """Each identity as a matrix that must vanish."""
        n = self.gamma.shape[0]
        ones = np.array([[mpq(1)]] * n, dtype=object) if self.exact else np.ones((n, 1))
        I = identity_like(self.P)
        pit = self.pi.reshape(1, n)
        return {
            "gamma_ones": self.gamma @ ones,
            "pi_gamma": pit @ self.gamma,
            "resolvent": self.gamma @ (I - self.P) - (I - ones @ pit),
        }

    @property
    def exact(self) -> bool:
        return self.gamma.dtype == object

    def verify(self, tol: float = 0.0) -> bool:
        return all(all(abs(z) <= tol for z in r.flat) for r in self.residuals().values())


def _replace_last_column(Y, col):
    Y = Y.copy()
    Y[:, -1] = col
    return Y


def gamma(P, pi) -> FundamentalMatrix:
    """``Gamma = (I - 1 pi^T | 0)(I - P | 1)^{-1}`` where ``(Y | y)`` replaces Y's last column."""
    P = np.asarray(P)
    n = check_square(P)
    pi = np.asarray(pi)
    if len(pi) != n:
        raise DimensionError("stationary distribution and matrix sizes differ")
    exact = _exact(P) and _exact(pi)
    if exact:
        I = EXACT.eye(n)
        ones = np.array([mpq(1)] * n, dtype=object)
        zeros = np.array([mpq(0)] * n, dtype=object)
        Y = _replace_last_column(I - P, ones)
        Z = _replace_last_column(I - np.outer(ones, pi), zeros)
        # Gamma Y = Z  <=>  Y^T Gamma^T = Z^T
        G = exact_solve(Y.T, Z.T).T
        return FundamentalMatrix(np.array(G, dtype=object), P, pi)
    Pf, pif = to_float(P), to_float(pi)
    I = np.eye(n)
    Y = _replace_last_column(I - Pf, np.ones(n))
    Z = _replace_last_column(I - np.outer(np.ones(n), pif), np.zeros(n))
    try:
        G = np.linalg.solve(Y.T, Z.T).T
    except np.linalg.LinAlgError as exc:
        from .numerics import SingularMatrixError
        raise SingularMatrixError(str(exc)) from exc
    return FundamentalMatrix(G, Pf, pif)


def gamma_partial(P, pi, t: int):
    """``Gamma_t = -1 pi^T t + sum_{s<t} P^s``."""
    P = np.asarray(P)
    n = check_square(P)
    acc = identity_like(P) * 0
    power = identity_like(P)
    for _ in range(t):
        acc = acc + power
        power = power @ P
    ones = np.ones(n, dtype=P.dtype) if P.dtype != object else np.array([mpq(1)] * n, dtype=object)
    return acc - np.outer(ones, np.asarray(pi)) * t


def mass_center(arr, pi) -> np.ndarray:
    """``(pi^T (x) I_d) arr`` for an n-by-d array (or an n-vector)."""
    arr = np.asarray(arr)
    pi = np.asarray(pi)
    if arr.shape[0] != len(pi):
        raise DimensionError(f"{len(pi)} weights for {arr.shape[0]} birds")
    if arr.ndim == 1:
        return sum(p * a for p, a in zip(pi, arr))
    return np.array([sum(p * a for p, a in zip(pi, arr[:, c])) for c in range(arr.shape[1])],
                    dtype=arr.dtype if arr.dtype != object else object)


def limit_configuration(x0, v1, P, c):
    """Relative limit ``x^r`` and drift of a time-invariant flock.

    ``x^r = (I - 1 pi^T) x(0) + Gamma v(1)`` and drift ``pi^T v(1)``.
    """
    P = np.asarray(P)
    n = check_square(P)
    x0, v1 = np.asarray(x0), np.asarray(v1)
    if x0.ndim == 1:
        x0 = x0.reshape(-1, 1)
    if v1.ndim == 1:
        v1 = v1.reshape(-1, 1)
    if x0.shape[0] != n or v1.shape != x0.shape:
        raise DimensionError("configuration does not match the flock size")
    pi = stationary_distribution(np.asarray(c), footprint_graph(P))
    fm = gamma(P, pi)
    G = fm.gamma
    if fm.exact:
        ones = np.array([mpq(1)] * n, dtype=object)
        proj = EXACT.eye(n) - np.outer(ones, pi)
        x0e, v1e = EXACT.array(x0), EXACT.array(v1)
    else:
        pi = to_float(pi)
        proj = np.eye(n) - np.outer(np.ones(n), pi)
        x0e, v1e = to_float(x0), to_float(v1)
    xr = proj @ x0e + G @ v1e
    return xr, mass_center(v1e, pi)


# --------------------------------------------------------------------------
# variance contraction


def lyapunov_variance(xi, pi):
    """``sum_i pi_i (xi_i - sum_j pi_j xi_j)^2``."""
    xi, pi = np.asarray(xi), np.asarray(pi)
    if len(xi) != len(pi):
        raise DimensionError("vector and weights differ in length")
    mean = sum(p * x for p, x in zip(pi, xi))
    return sum(p * (x - mean) ** 2 for p, x in zip(pi, xi))


@dataclass(frozen=True)
class ContractionCheck:
    before: float
    after: float
    mu: float
    holds: bool


def check_contraction(P, pi, xi, mu: float | None = None, tol: float = 1e-12) -> ContractionCheck:
    """``var(P xi) <= mu^2 var(xi)`` up to ``tol``."""
    if mu is None:
        mu = spectrum(P).mu
    before = float(lyapunov_variance(xi, pi))
    after = float(lyapunov_variance(np.asarray(P) @ np.asarray(xi), pi))
    return ContractionCheck(before, after, mu, after <= mu * mu * before + tol)


# --------------------------------------------------------------------------
# closed-form spectra of the lazy walk on a 2^j-path


@dataclass
class PathSpectrum:
    j: int
    eigenvalues: np.ndarray
    vectors: np.ndarray        # columns u_{j,k}
    pi: np.ndarray

    @property
    def size(self) -> int:
        return 2 ** self.j

    def coefficients(self, theta: int) -> np.ndarray:
        """``mu_{j,k}`` for ``k = 2..2^j`` (index 0 holds k = 2)."""
        m = self.size
        eps = np.array([2.0] * (m - 2) + [1.0])
        return eps / (m - 1) * self.eigenvalues[1:] ** theta

    def power(self, theta: int) -> np.ndarray:
        """Reassemble ``P_j^theta = 1 pi^T + sum_k mu_{j,k} u_k (u_k - z_{k-1}/2)^T``."""
        m = self.size
        out = np.outer(np.ones(m), self.pi)
        for idx, mu in enumerate(self.coefficients(theta)):
            k = idx + 2
            u = self.vectors[:, k - 1]
            z = np.zeros(m)
            z[0], z[-1] = 1.0, (-1.0) ** (k - 1)
            out += mu * np.outer(u, u - z / 2)
        return out


def path_spectrum(j: int) -> PathSpectrum:
    if j < 1:
        raise ValueError("height must be at least 1")
    m = 2 ** j
    k = np.arange(1, m + 1)
    angle = np.pi * (k - 1) / (m - 1)
    lam = 1 / 3 + 2 / 3 * np.cos(angle)
    idx = np.arange(m)
    U = np.cos(np.outer(idx, angle))
    pi = np.ones(m)
    pi[0] = pi[-1] = 0.5
    return PathSpectrum(j, lam, U, pi / (m - 1))
