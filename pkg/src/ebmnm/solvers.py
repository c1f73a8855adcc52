"""Single-component covariance updates.

Each function solves (or improves) the weighted problem

    maximize over U:   phi(U; w) - rho(U / s)

where ``phi(U; w) = sum_j w_j log N(x_j; 0, U + V_j)`` and ``rho`` is an
optional eigenvalue penalty.  ``ted_update`` solves the shared-noise problem
exactly by truncating (or penalty-adjusting) the eigenvalues of the
transformed weighted sample covariance.  ``ed_update`` and ``fa_update`` are
single EM steps: they never decrease the objective but do not maximize it.
``scaled_update`` handles the one-dimensional problem ``U = c * base``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import minimize_scalar

from . import linalg
from .core import Dataset, Penalty
from .exceptions import (
    InvariantViolationError,
    NumericalFailureError,
    SingularMatrixError,
    UnsupportedNoiseError,
    UnsupportedPenaltyError,
)

# Tolerance of the bounded 1-d searches.
SCALAR_XATOL = 1e-10
SCALAR_MAXITER = 200
# Relative floor applied to eigenvalues before penalty scale updates.
SPECTRUM_FLOOR_RTOL = 1e-8


@dataclass(frozen=True)
class WeightedProblem:
    """One component's weighted estimation problem.

    ``weights`` are per-observation responsibilities in [0, 1] with positive
    sum; ``scale`` is the component's current penalty scale factor.
    """

    dataset: Dataset
    weights: np.ndarray
    scale: float = 1.0
    penalty: Penalty = Penalty.none()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.shape[0] != self.dataset.n_obs:
            raise InvariantViolationError(
                f"weights must have one entry per observation, got shape {w.shape}"
            )
        if np.any(w < 0) or np.any(w > 1 + 1e-12):
            raise InvariantViolationError("weights must lie in [0, 1]")
        if not (w.sum() > 0):
            raise InvariantViolationError("weights must not all be zero")
        if not (self.scale > 0):
            raise InvariantViolationError("scale must be positive")
        object.__setattr__(self, "weights", w)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def component_loglik(dataset: Dataset, cov: np.ndarray) -> np.ndarray:
    """Per-observation log density ``log N(x_j; 0, cov + V_j)``."""
    if dataset.shared_noise:
        return linalg.mvn_logpdf_zero_mean(dataset.x, cov + dataset.noise)
    out = np.empty(dataset.n_obs)
    for j in range(dataset.n_obs):
        out[j] = linalg.mvn_logpdf_zero_mean(dataset.x[j], cov + dataset.noise[j])[0]
    return out


def weighted_loglik(problem: WeightedProblem, cov: np.ndarray) -> float:
    """The weighted objective ``phi(cov; w)`` (no penalty term)."""
    return float(problem.weights @ component_loglik(problem.dataset, cov))


def penalty_from_eigenvalues(penalty: Penalty, eigenvalues: np.ndarray, scale: float) -> float:
    """Penalty value ``rho(U / scale)`` from the eigenvalues of ``U``.

    Returns ``+inf`` when any eigenvalue is nonpositive and the penalty is
    active (both penalties diverge at singular matrices).
    """
    if not penalty.active:
        return 0.0
    e = np.asarray(eigenvalues, dtype=float) / scale
    if np.any(e <= 0):
        return np.inf
    if penalty.kind == "iw":
        return 0.5 * penalty.lam * float(np.sum(np.log(e) + 1.0 / e))
    return 0.25 * penalty.lam * float(np.sum(e + 1.0 / e))


def penalty_value(penalty: Penalty, cov: np.ndarray, scale: float) -> float:
    """Penalty value ``rho(cov / scale)``."""
    if not penalty.active:
        return 0.0
    return penalty_from_eigenvalues(penalty, np.linalg.eigvalsh(linalg.sym(cov)), scale)


def floor_spectrum(cov: np.ndarray, rtol: float = SPECTRUM_FLOOR_RTOL) -> np.ndarray:
    """Raise all eigenvalues to at least ``rtol * (spectral radius + 1)``.

    The penalties diverge at zero eigenvalues, so their scale updates need a
    strictly positive spectrum.
    """
    es = linalg.eigh_descending(cov)
    floor = rtol * (max(es.values[0], 0.0) + 1.0)
    if es.values[-1] >= floor:
        return cov
    return es.compose(np.maximum(es.values, floor))


def _refine_scalar_max(f, grid: np.ndarray, values: np.ndarray, xatol: float) -> float:
    """Polish the best grid point of a 1-d maximization with bounded Brent."""
    i = int(np.argmax(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    best_x, best_f = float(grid[i]), float(values[i])
    if hi > lo:
        res = minimize_scalar(
            lambda t: -f(t),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": xatol, "maxiter": SCALAR_MAXITER},
        )
        if np.isfinite(res.fun) and -res.fun > best_f:
            best_x, best_f = float(res.x), float(-res.fun)
    return best_x


_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def solve_penalized_spectrum(d_values: np.ndarray, total_weight: float,
                             penalty: Penalty, scale: float) -> np.ndarray:
    """Penalized eigenvalue solves for a whole spectrum at once.

    In the noise-whitened basis the objective separates across eigenvalues:
    for sample eigenvalue ``d`` the contribution of prior eigenvalue
    ``e >= 0`` is

        g(e) = -(W/2) [log(1 + e) + d / (1 + e)] - pen(e / scale)

    with ``W`` the total weight.  Without a penalty the maximizer is the
    truncation ``max(d - 1, 0)``; with a penalty each 1-d problem is solved
    by a log-grid scan followed by golden-section refinement, run across all
    eigenvalues simultaneously.
    """
    d_values = np.asarray(d_values, dtype=float)
    if not penalty.active:
        return np.maximum(d_values - 1.0, 0.0)
    w, lam, s = total_weight, penalty.lam, scale
    iw = penalty.kind == "iw"

    def g(e):
        lik = -0.5 * w * (np.log1p(e) + d_values / (1.0 + e))
        if iw:
            return lik - 0.5 * lam * (np.log(e / s) + s / e)
        return lik - 0.25 * lam * (e / s + s / e)

    # The unpenalized optimum is d - 1 and the penalty pulls toward s, so
    # every stationary point lies below max(d, s); the bracket is generous.
    hi = 10.0 * np.maximum(np.maximum(d_values, s), 1.0)
    grid = hi[:, None] * np.geomspace(1e-13, 1.0, 160)[None, :]
    values = (-0.5 * w * (np.log1p(grid) + d_values[:, None] / (1.0 + grid)))
    if iw:
        values -= 0.5 * lam * (np.log(grid / s) + s / grid)
    else:
        values -= 0.25 * lam * (grid / s + s / grid)
    best = np.argmax(values, axis=1)
    rows = np.arange(len(d_values))
    lo = grid[rows, np.maximum(best - 1, 0)]
    up = grid[rows, np.minimum(best + 1, grid.shape[1] - 1)]
    lo0, up0 = lo.copy(), up.copy()
    # Golden-section refinement, vectorized over the eigenvalues.
    c = up - _INV_PHI * (up - lo)
    d_pt = lo + _INV_PHI * (up - lo)
    fc, fd = g(c), g(d_pt)
    for _ in range(SCALAR_MAXITER):
        if np.max(up - lo) <= SCALAR_XATOL:
            break
        move_up = fc < fd  # the maximum lies in the upper part: drop [lo, c]
        lo = np.where(move_up, c, lo)
        up = np.where(move_up, up, d_pt)
        c = up - _INV_PHI * (up - lo)
        d_pt = lo + _INV_PHI * (up - lo)
        fc, fd = g(c), g(d_pt)
    mid = 0.5 * (lo + up)

    # Comparison-based search localizes the maximizer only to about
    # sqrt(machine eps); polish with Newton on g' so that repeated solves of
    # ulp-identical problems agree to machine precision (the end-to-end
    # scale-invariance contract needs this).
    e = mid
    for _ in range(6):
        u1 = 1.0 + e
        gp = -0.5 * w * (u1 - d_values) / u1**2
        gpp = -0.5 * w * (2.0 * d_values - u1) / u1**3
        if iw:
            gp -= 0.5 * lam * (1.0 / e - s / e**2)
            gpp -= 0.5 * lam * (2.0 * s / e**3 - 1.0 / e**2)
        else:
            gp -= 0.25 * lam * (1.0 / s - s / e**2)
            gpp -= 0.5 * lam * s / e**3
        with np.errstate(divide="ignore", invalid="ignore"):
            step = gp / gpp
        e = np.clip(np.where(np.isfinite(step), e - step, e), lo0, up0)
    # Near the optimum g is flat to ulp, so "not worse than mid" must allow
    # rounding slack; a genuinely worse Newton endpoint is still rejected.
    g_mid = g(mid)
    slack = 1e-9 * (1.0 + np.abs(g_mid))
    out = np.where(np.isfinite(e) & (g(e) >= g_mid - slack), e, mid)
    # Never return anything worse than the best grid point.
    return np.where(g(out) >= values[rows, best] - slack, out, grid[rows, best])


def solve_penalized_eigenvalue(d: float, total_weight: float, penalty: Penalty,
                               scale: float) -> float:
    """Single-eigenvalue version of :func:`solve_penalized_spectrum`."""
    return float(solve_penalized_spectrum(np.array([d]), total_weight, penalty, scale)[0])


def _whitened_sample_eigensystem(problem: WeightedProblem):
    """Cholesky-whiten the data and eigendecompose the weighted covariance."""
    dataset = problem.dataset
    if not dataset.shared_noise:
        raise UnsupportedNoiseError("ted requires a shared noise covariance")
    try:
        lower = np.linalg.cholesky(dataset.noise)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"Cholesky of the noise covariance failed: {exc}") from exc
    xt = scipy.linalg.solve_triangular(lower, dataset.x.T, lower=True, check_finite=False).T
    w = problem.weights
    s_cov = (xt * w[:, None]).T @ xt / problem.total_weight
    return lower, linalg.eigh_descending(s_cov)


def ted_update(problem: WeightedProblem) -> np.ndarray:
    """Exact solution of the weighted problem for shared noise.

    Unpenalized, this truncates the negative eigenvalues of the whitened
    weighted sample covariance minus the identity; with a penalty each
    eigenvalue solves its own 1-d problem, keeping the sample eigenvectors.
    The result is mapped back to the original coordinates, so an active
    penalty is measured in the noise-whitened metric (it pulls ``U/s``
    toward the noise covariance rather than the identity).
    """
    lower, es = _whitened_sample_eigensystem(problem)
    e = solve_penalized_spectrum(es.values, problem.total_weight, problem.penalty,
                                 problem.scale)
    return linalg.sym(lower @ es.compose(e) @ lower.T)


def ted_rank1_update(problem: WeightedProblem) -> np.ndarray:
    """Exact rank-1-constrained solution for shared noise (no penalty)."""
    if problem.penalty.active:
        raise UnsupportedPenaltyError("penalties are not supported with rank-1 constraints")
    lower, es = _whitened_sample_eigensystem(problem)
    e = np.zeros_like(es.values)
    e[0] = max(es.values[0] - 1.0, 0.0)
    return linalg.sym(lower @ es.compose(e) @ lower.T)


def ed_update(problem: WeightedProblem, current: np.ndarray) -> np.ndarray:
    """One weighted EM covariance step from the ``current`` estimate.

    Averages the per-observation posterior second moments
    ``B_j + b_j b_j^T`` with ``b_j = U (U + V_j)^{-1} x_j`` and
    ``B_j = U - U (U + V_j)^{-1} U``.  With the "iw" penalty the step is the
    penalized closed form ``(sum_j w_j (B_j + b_j b_j^T) + lam * s * I) /
    (W + lam)``.  Never decreases the penalized objective.
    """
    if problem.penalty.kind == "nn":
        raise UnsupportedPenaltyError("the nuclear-norm penalty has no closed-form ed update")
    dataset = problem.dataset
    u = np.asarray(current, dtype=float)
    w = problem.weights
    total = problem.total_weight
    r = dataset.dim
    if dataset.shared_noise:
        z = linalg.solve_psd(u + dataset.noise, u)          # (U+V)^{-1} U
        p = z.T                                             # U (U+V)^{-1}
        b_cov = linalg.sym(u - p @ u)
        x = dataset.x
        s_w = (x * w[:, None]).T @ x                        # sum_j w_j x_j x_j^T
        moment = total * b_cov + p @ s_w @ p.T
    else:
        moment = np.zeros((r, r))
        for j in range(dataset.n_obs):
            if w[j] == 0.0:
                continue
            t = u + dataset.noise[j]
            sol = linalg.solve_psd(t, np.column_stack([dataset.x[j], u]))
            b = u @ sol[:, 0]
            b_cov = u - u @ sol[:, 1:]
            moment += w[j] * (linalg.sym(b_cov) + np.outer(b, b))
    if problem.penalty.active:
        lam = problem.penalty.lam
        new = (moment + lam * problem.scale * np.eye(r)) / (total + lam)
    else:
        new = moment / total
    return linalg.sym(new)


def fa_update(problem: WeightedProblem, current: np.ndarray) -> np.ndarray:
    """One weighted EM step for a rank-1 component ``U = u u^T``.

    Uses the scalar-loading augmentation: with posterior variance
    ``sigma_j^2 = 1 / (1 + u^T V_j^{-1} u)`` and posterior mean
    ``mu_j = sigma_j^2 u^T V_j^{-1} x_j``, the update solves

        u_new = (sum_j w_j (mu_j^2 + sigma_j^2) V_j^{-1})^{-1}
                (sum_j w_j mu_j V_j^{-1} x_j).

    Never decreases ``phi(u u^T; w)``.
    """
    if problem.penalty.active:
        raise UnsupportedPenaltyError("penalties are not supported with fa")
    dataset = problem.dataset
    u = np.asarray(current, dtype=float)
    w = problem.weights
    x = dataset.x
    if dataset.shared_noise:
        # With shared noise V factors out of the linear system entirely.
        viu = linalg.solve_psd(dataset.noise, u)
        sigma2 = 1.0 / (1.0 + float(u @ viu))
        mu = sigma2 * (x @ viu)
        denom = float(w @ (mu * mu + sigma2))
        return ((w * mu) @ x) / denom
    r = dataset.dim
    system = np.zeros((r, r))
    rhs = np.zeros(r)
    eye = np.eye(r)
    for j in range(dataset.n_obs):
        v_inv = linalg.solve_psd(dataset.noise[j], eye)
        viu = v_inv @ u
        sigma2 = 1.0 / (1.0 + float(u @ viu))
        mu = sigma2 * float(viu @ x[j])
        system += w[j] * (mu * mu + sigma2) * v_inv
        rhs += w[j] * mu * (v_inv @ x[j])
    try:
        return np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"fa system matrix is singular: {exc}") from exc


def scaled_update(problem: WeightedProblem, base: np.ndarray) -> float:
    """Maximize ``phi(c * base; w)`` over ``c >= 0``.

    Scans a geometric grid (expanded until the objective stops growing at
    the upper edge) and polishes the best bracket with bounded Brent.
    """
    base = np.asarray(base, dtype=float)
    dataset = problem.dataset
    w = problem.weights

    def f(c):
        return float(w @ component_loglik(dataset, c * base))

    x = dataset.x
    s_w = float(np.sum((x * w[:, None]) * x)) / problem.total_weight
    guess = max(s_w / max(np.trace(base), 1e-300), 1e-12)
    lo_c, hi_c = 1e-6 * guess, 1e3 * guess
    for _ in range(6):
        grid = np.concatenate([[0.0], np.geomspace(lo_c, hi_c, 80)])
        values = np.array([f(c) for c in grid])
        if np.argmax(values) < len(grid) - 1:
            break
        hi_c *= 1e3
    best = _refine_scalar_max(f, grid, values, xatol=max(1e-9 * guess, 1e-15))
    return max(best, 0.0)


def scale_factor_update(cov: np.ndarray, penalty: Penalty) -> float:
    """Scale ``s`` minimizing ``rho(cov / s)`` over ``s > 0``.

    Closed forms: the harmonic mean of the eigenvalues for "iw",
    ``sqrt(sum(e) / sum(1/e))`` for "nn", and 1 when no penalty is active.
    """
    if not penalty.active:
        return 1.0
    e = np.linalg.eigvalsh(linalg.sym(np.asarray(cov, dtype=float)))
    if np.any(e <= 0):
        raise SingularMatrixError(
            "scale update needs strictly positive eigenvalues; floor the spectrum first"
        )
    inv_sum = float(np.sum(1.0 / e))
    if penalty.kind == "iw":
        return len(e) / inv_sum
    return float(np.sqrt(np.sum(e) / inv_sum))
