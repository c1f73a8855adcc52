"""Dense linear-algebra helpers used throughout the package.

All matrices are small (tens of rows), dense and symmetric; everything here
wraps LAPACK routines with the tolerance conventions used by the rest of the
code: eigenvalues above ``-PSD_RTOL`` times the spectral radius count as
nonnegative, and Cholesky factorizations get one jitter retry before failing.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import NotPositiveDefiniteError, NumericalFailureError

# Relative tolerance below which negative eigenvalues count as zero.
PSD_RTOL = 1e-10
# Relative tolerance for symmetry checks.
SYM_RTOL = 1e-10
# Diagonal jitter, relative to mean diagonal, added once before a
# Cholesky retry.
CHOL_JITTER = 1e-10


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetrize a square matrix."""
    return 0.5 * (a + a.T)


def is_symmetric(a: np.ndarray, rtol: float = SYM_RTOL) -> bool:
    """True if ``max|A - A^T|`` is at most ``rtol * max|A|``."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    scale = np.max(np.abs(a)) if a.size else 0.0
    return np.max(np.abs(a - a.T)) <= rtol * max(scale, 1e-300)


@dataclass(frozen=True)
class EigenSystem:
    """Eigendecomposition with eigenvalues sorted in descending order."""

    values: np.ndarray
    vectors: np.ndarray

    def compose(self, values: np.ndarray | None = None) -> np.ndarray:
        """Rebuild ``Q diag(values) Q^T``, defaulting to the stored values."""
        e = self.values if values is None else values
        return sym((self.vectors * e) @ self.vectors.T)


def eigh_descending(a: np.ndarray) -> EigenSystem:
    """Symmetric eigendecomposition, eigenvalues descending."""
    try:
        values, vectors = np.linalg.eigh(sym(a))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalFailureError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(values)[::-1]
    return EigenSystem(values=values[order], vectors=vectors[:, order])


def clamp_psd(a: np.ndarray) -> np.ndarray:
    """Symmetrize and truncate all negative eigenvalues to zero."""
    es = eigh_descending(a)
    if es.values.size == 0 or es.values.min() >= 0.0:
        return sym(a)
    return es.compose(np.maximum(es.values, 0.0))


def check_psd(a: np.ndarray, name: str = "matrix", rtol: float = PSD_RTOL) -> np.ndarray:
    """Validate that ``a`` is symmetric PSD up to tolerance.

    Eigenvalues in ``[-rtol * spectral_radius, 0)`` are clamped to zero and
    the matrix is rebuilt; anything more negative raises.
    """
    if not is_symmetric(a):
        raise NotPositiveDefiniteError(f"{name} is not symmetric")
    es = eigh_descending(a)
    if es.values.size == 0:
        return a
    lo, hi = es.values[-1], max(es.values[0], 0.0)
    if lo >= 0.0:
        return a
    if lo < -rtol * max(hi, 1e-300):
        raise NotPositiveDefiniteError(
            f"{name} has negative eigenvalue {lo:.3e} (spectral radius {hi:.3e})"
        )
    return es.compose(np.maximum(es.values, 0.0))


def cholesky_with_jitter(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a single jitter retry.

    On failure, ``CHOL_JITTER * tr(a)/R`` is added to the diagonal once; a
    second failure raises ``NumericalFailureError``.
    """
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    r = a.shape[0]
    jitter = CHOL_JITTER * max(np.trace(a) / r, 1e-300)
    try:
        return np.linalg.cholesky(a + jitter * np.eye(r))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(
            f"Cholesky failed even after jitter {jitter:.3e}"
        ) from exc


def solve_psd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``."""
    lower = cholesky_with_jitter(a)
    return scipy.linalg.cho_solve((lower, True), b)


def mvn_logpdf_zero_mean(x: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of ``N(0, cov)`` at each row of ``x``.

    Evaluated through the Cholesky factor of ``cov``; returns an array of
    shape ``(n,)`` for ``x`` of shape ``(n, R)``.
    """
    x = np.atleast_2d(x)
    r = cov.shape[0]
    lower = cholesky_with_jitter(cov)
    logdet = 2.0 * np.sum(np.log(np.diag(lower)))
    z = scipy.linalg.solve_triangular(lower, x.T, lower=True)
    quad = np.sum(z * z, axis=0)
    return -0.5 * (r * np.log(2.0 * np.pi) + logdet + quad)
