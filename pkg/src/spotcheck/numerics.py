"""Deterministic numeric kernel shared by the detectors.

Everything works in float64. Randomness comes only from :class:`Prng`, a
SplitMix64 stream, so results are reproducible bit-for-bit across runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg

from .errors import ContractError, SingularSystemError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_M53 = 1.0 / (1 << 53)


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Prng:
    """SplitMix64 generator.

    The bulk methods (``u64s``, ``uniforms``, ``normals``) produce exactly the
    same stream as repeated scalar calls; they are just vectorised.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def u64s(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def uniform(self) -> float:
        """Uniform in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _TWO_M53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64s(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def randbelow(self, n: int) -> int:
        return min(int(self.uniform() * n), n - 1)

    def normals(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes two uniforms per pair."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) variate (Marsaglia & Tsang)."""
        if shape <= 0:
            raise ContractError("gamma shape must be positive")
        if shape < 1.0:
            u = 1.0 - self.uniform()
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - self.uniform()
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, index: int) -> "Prng":
        """Independent stream for work item ``index`` (seed xor index)."""
        return Prng(self.state ^ (int(index) & _MASK64))


def gaussian_sample(prng: Prng, mu, var) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ContractError("negative variance")
    eps = prng.normals(mu.size).reshape(mu.shape)
    return mu + np.sqrt(var) * eps


def log_mean_exp(values, axis=None):
    v = np.asarray(values, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    n = v.size if axis is None else v.shape[axis]
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True) / n) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def check_symmetric(a, tol: float = 1e-9) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    if a.size and np.max(np.abs(a - a.T)) > tol * max(1.0, np.max(np.abs(a))):
        raise ContractError("matrix is not symmetric")
    return a


@numba.njit(cache=True)
def _jacobi_sweeps(A, V, tol, max_sweeps):  # pragma: no cover - compiled
    n = A.shape[0]
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += A[i, j] * A[i, j]
    scale = max(1.0, math.sqrt(scale))
    prev = math.inf
    sweeps = 0
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += 2.0 * A[i, j] * A[i, j]
        off = math.sqrt(off)
        # second test guards against rounding-level stagnation
        if off <= tol * scale or off >= prev:
            break
        prev = off
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(n):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    return sweeps


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm is at most ``tol`` times
    ``max(1, ||A||_F)``, or after ``max_sweeps``.

    Returns ``(w, V)`` with ``w`` descending (ties keep original index order)
    and eigenvectors in the columns of ``V``. Each column's largest-magnitude
    entry is made positive.
    """
    a = check_symmetric(a)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    A = np.ascontiguousarray(0.5 * (a + a.T))
    V = np.eye(n)
    _jacobi_sweeps(A, V, float(tol), int(max_sweeps))
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    V = V[:, order]
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[pivot, np.arange(n)] < 0, -1.0, 1.0)
    return w, V * signs


def rbf_kernel(x, y, gamma: float) -> float:
    if not gamma > 0:
        raise ContractError("gamma must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError("dimension mismatch")
    d = x - y
    return math.exp(-gamma * float(d @ d))


def sq_dists(X, Y) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at 0."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    d = np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def rbf_matrix(X, Y, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ContractError("gamma must be positive")
    return np.exp(-gamma * sq_dists(X, Y))


def ridge_solve(G, B, lam: float = 0.0) -> np.ndarray:
    """Solve ``(G + lam*I) A = B`` through a Cholesky factorisation."""
    G = check_symmetric(G)
    if lam < 0:
        raise ContractError("ridge must be non-negative")
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != G.shape[0]:
        raise ContractError("right-hand side has wrong number of rows")
    M = 0.5 * (G + G.T) + lam * np.eye(G.shape[0])
    try:
        factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"non-positive pivot in ridge solve: {exc}") from None
    return scipy.linalg.cho_solve(factor, B, check_finite=False)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update; mutates ``params`` and ``state`` in place."""
    if set(params) != set(grads):
        raise ContractError("params and grads have different keys")
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ContractError(f"gradient shape mismatch for {key!r}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        elif m.shape != g.shape:
            raise ContractError(f"state shape mismatch for {key!r}")
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return params
