"""
Matrix Tuple Conventions

Helpers for m-tuples of N×N Hermitian matrices stored as complex arrays of
shape (..., m, N, N). Leading axes are batch axes and are carried through
every helper, so a stack of chain states or Monte Carlo paths can be
processed in one call.

Normalizations:
    τ_N(a)      = Tr(a) / N
    ⟨a, b⟩₂     = Σ_j Re τ_N(a_j* b_j)
    ‖x‖₂²       = ⟨x, x⟩₂
Noise is Tr-orthonormal: in the real coordinates given by a Tr-orthonormal
basis of M_N(C)_sa every coordinate is standard normal. A GUE matrix with
E τ_N(S²) = 1 is Tr-orthonormal noise scaled by N^{-1/2}.
"""

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import PotentialError

logger = logging.getLogger('FreeGibbs.matrices')

# Tolerance used when validating Hermiticity of user supplied tuples
HERMITIAN_TOL = 1e-12

MatrixTuple = np.ndarray


def as_matrix_tuple(x: Union[np.ndarray, Sequence[np.ndarray]],
                    m: Optional[int] = None,
                    N: Optional[int] = None,
                    tol: float = HERMITIAN_TOL) -> MatrixTuple:
    """
    Validate and convert input to a MatrixTuple of shape (m, N, N).

    A single N×N matrix is promoted to a 1-tuple.

    Raises:
        PotentialError: wrong shape, inconsistent N, or non-Hermitian entries
    """
    arr = np.asarray(x, dtype=np.complex128)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3 or arr.shape[-1] != arr.shape[-2]:
        raise PotentialError(f"Invalid matrix tuple shape: {arr.shape} (must be (m, N, N))")
    if m is not None and arr.shape[0] != m:
        raise PotentialError(f"Invalid tuple length: {arr.shape[0]} (must be {m})")
    if N is not None and arr.shape[-1] != N:
        raise PotentialError(f"Invalid matrix size: {arr.shape[-1]} (must be {N})")
    scale = max(1.0, float(np.max(np.abs(arr))) if arr.size else 1.0)
    skew = np.max(np.abs(arr - np.conj(np.swapaxes(arr, -1, -2)))) if arr.size else 0.0
    if skew > tol * scale:
        logger.error(f"Non-Hermitian input: deviation {skew:.3e}")
        raise PotentialError(f"Matrix tuple is not Hermitian: deviation {skew:.3e} (must be <= {tol:g})")
    return arr


def hermitize(x: np.ndarray) -> np.ndarray:
    """Hermitian part (x + x*)/2 over the last two axes."""
    return 0.5 * (x + np.conj(np.swapaxes(x, -1, -2)))


def tau(a: np.ndarray) -> np.ndarray:
    """Normalized trace over the last two axes."""
    return np.trace(a, axis1=-2, axis2=-1) / a.shape[-1]


def inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Real inner product ⟨a, b⟩₂ summed over the tuple axis."""
    N = a.shape[-1]
    return np.real(np.sum(np.conj(a) * b, axis=(-3, -2, -1))) / N


def norm2(x: np.ndarray) -> np.ndarray:
    """Normalized Hilbert-Schmidt norm ‖x‖₂ of a tuple."""
    return np.sqrt(np.maximum(inner(x, x), 0.0))


def opnorm(a: np.ndarray) -> np.ndarray:
    """Operator norm of Hermitian matrices over the last two axes."""
    return np.max(np.abs(np.linalg.eigvalsh(hermitize(a))), axis=-1)


def scalar_tuple(alpha: Sequence[float], N: int) -> MatrixTuple:
    """The tuple (α_1 I, ..., α_k I)."""
    alpha = np.asarray(alpha, dtype=float)
    return alpha[:, None, None] * np.eye(N, dtype=np.complex128)[None]


def apply_mixing(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Act with a real k×k matrix on the tuple axis: (A x)_i = Σ_j A_ij x_j."""
    return np.einsum('ij,...jab->...iab', A, x)


def hermitian_noise(rng: np.random.Generator, shape: Tuple[int, ...], N: int) -> np.ndarray:
    """
    Tr-orthonormal Hermitian noise of shape shape + (N, N).

    Diagonal entries are N(0, 1); real and imaginary parts of off-diagonal
    entries are N(0, 1/2).
    """
    full = tuple(shape) + (N, N)
    z = rng.standard_normal(full) + 1j * rng.standard_normal(full)
    return 0.5 * (z + np.conj(np.swapaxes(z, -1, -2)))


def sample_gue(rng: np.random.Generator, m: int, N: int,
               size: Tuple[int, ...] = (), variance: float = 1.0) -> MatrixTuple:
    """GUE tuple(s) with E τ_N(S_j²) = variance, shape size + (m, N, N)."""
    return hermitian_noise(rng, tuple(size) + (m,), N) * np.sqrt(variance / N)


def hermitian_basis(N: int) -> np.ndarray:
    """Tr-orthonormal basis of M_N(C)_sa, shape (N², N, N)."""
    basis = []
    for k in range(N):
        e = np.zeros((N, N), dtype=np.complex128)
        e[k, k] = 1.0
        basis.append(e)
    for k in range(N):
        for l in range(k + 1, N):
            e = np.zeros((N, N), dtype=np.complex128)
            e[k, l] = e[l, k] = 1.0 / np.sqrt(2.0)
            basis.append(e)
            f = np.zeros((N, N), dtype=np.complex128)
            f[k, l] = 1j / np.sqrt(2.0)
            f[l, k] = -1j / np.sqrt(2.0)
            basis.append(f)
    return np.array(basis)


def lobatto_rule(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Lobatto nodes and weights on [0, 1].

    The rule with n nodes integrates polynomials of degree 2n - 3 exactly and
    includes both endpoints.
    """
    if n < 2:
        raise PotentialError(f"Invalid Lobatto order: {n} (must be >= 2)")
    interior = np.polynomial.legendre.Legendre.basis(n - 1).deriv().roots() if n > 2 else np.array([])
    nodes = np.concatenate([[-1.0], np.sort(np.real(interior)), [1.0]])
    p = np.polynomial.legendre.Legendre.basis(n - 1)(nodes)
    weights = 2.0 / (n * (n - 1) * p ** 2)
    return 0.5 * (nodes + 1.0), 0.5 * weights
