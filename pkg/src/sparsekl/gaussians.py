"""Dense multivariate Gaussian algebra built on Cholesky factorizations.

Everything downstream (the finite-dimensional verification oracle, the
sparse variational bounds, the Cox process objective) reduces to a small
set of operations on explicit mean/covariance pairs: factorize, solve,
marginalize, condition, and compute KL divergences.  All solves go
through triangular factors; no explicit matrix inverse is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "NotPositiveDefiniteError",
    "cholesky_jittered",
    "GaussianDist",
    "AffineConditional",
    "mvn_kl",
    "mvn_logpdf",
    "mvn_marginal",
    "mvn_condition",
    "conditional_from_joint",
    "expected_conditional_kl",
    "joint_from_marginal_and_conditional",
]

LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized within the jitter budget.

    Carries the largest jitter attempted in ``jitter``.
    """

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


def _check_symmetric(A, rel_tol, what="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{what} must be square, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > rel_tol * scale:
        raise ValueError(
            f"{what} is not symmetric: max |A - A^T| = {asym:.3e} "
            f"exceeds {rel_tol:.1e} relative"
        )
    return A


def cholesky_jittered(A, base_jitter=None):
    """Lower Cholesky factor of ``A + jitter * I`` with escalating jitter.

    The first attempt uses ``base_jitter`` (default ``1e-10 * mean(diag(A))``)
    and escalates by factors of 10 up to ``1e-2 * mean(diag(A))``.

    Parameters
    ----------
    A : array, shape (n, n)
        Symmetric matrix, expected positive (semi-)definite up to noise.
    base_jitter : float, optional
        First jitter value to try.  Must be positive.

    Returns
    -------
    L : array, shape (n, n)
        Lower triangular with ``L @ L.T == A + jitter * I``.
    jitter : float
        The jitter that succeeded.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization still fails at the jitter cap.  The error
        carries the largest jitter attempted.
    """
    A = _check_symmetric(A, 1e-10, "cholesky input")
    if A.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    diag_mean = float(np.mean(np.diag(A)))
    if diag_mean <= 0:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite: mean diagonal {diag_mean:.3e} "
            "is not positive",
            0.0,
        )
    if base_jitter is None:
        base_jitter = 1e-10 * diag_mean
    if base_jitter <= 0:
        raise ValueError(f"base_jitter must be positive, got {base_jitter}")
    cap = 1e-2 * diag_mean
    jitter = float(base_jitter)
    eye = np.eye(A.shape[0])
    while True:
        try:
            L = np.linalg.cholesky(A + jitter * eye)
            return L, jitter
        except np.linalg.LinAlgError:
            if jitter >= cap:
                raise NotPositiveDefiniteError(
                    "matrix is not positive definite: Cholesky failed at "
                    f"jitter {jitter:.3e} (cap {cap:.3e})",
                    jitter,
                ) from None
            jitter = min(jitter * 10.0, cap)


def _chol_with_fallback(A):
    """Plain Cholesky if it succeeds, otherwise the escalating jitter schedule.

    Returns (L, jitter_used); jitter_used is 0.0 on the exact path.
    """
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        return cholesky_jittered(A)


@dataclass(frozen=True)
class GaussianDist:
    """Multivariate Gaussian with explicit mean and dense covariance.

    The Cholesky factor is computed lazily and cached; it factorizes
    ``cov + jitter * I`` where ``jitter`` is zero whenever the exact
    factorization succeeds.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _check_symmetric(self.cov, 1e-12, "covariance")
        if mean.ndim != 1:
            raise ValueError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape[0] != mean.shape[0]:
            raise ValueError(
                f"mean has dimension {mean.shape[0]} but covariance is "
                f"{cov.shape[0]}x{cov.shape[1]}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("mean and covariance must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def _chol_and_jitter(self):
        return _chol_with_fallback(self.cov)

    @property
    def chol(self) -> np.ndarray:
        """Lower triangular factor of ``cov + jitter * I``."""
        return self._chol_and_jitter[0]

    @property
    def jitter(self) -> float:
        return self._chol_and_jitter[1]

    def half_log_det(self) -> float:
        """``0.5 * log det(cov + jitter * I)`` from the cached factor."""
        return float(np.sum(np.log(np.diag(self.chol))))


def mvn_kl(q: GaussianDist, p: GaussianDist) -> float:
    """KL(q || p) between two Gaussians of the same dimension.

    Computed through the Cholesky factor of ``p.cov``:

        0.5 * (tr(Sp^-1 Sq) + (mq-mp)^T Sp^-1 (mq-mp) - n
               + log det Sp - log det Sq)

    The result is clamped at zero, so round-off on nearly identical
    inputs cannot produce a small negative value.
    """
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    n = q.dim
    if n == 0:
        return 0.0
    Lp = p.chol
    # tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    half = solve_triangular(Lp, q.chol, lower=True)
    trace_term = float(np.sum(half * half))
    alpha = solve_triangular(Lp, q.mean - p.mean, lower=True)
    maha = float(alpha @ alpha)
    kl = 0.5 * (trace_term + maha - n) + p.half_log_det() - q.half_log_det()
    return max(kl, 0.0)


def mvn_logpdf(p: GaussianDist, x) -> float:
    """Log density of ``p`` at the point ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != p.mean.shape:
        raise ValueError(
            f"point has shape {x.shape} but distribution has dimension {p.dim}"
        )
    alpha = solve_triangular(p.chol, x - p.mean, lower=True)
    return float(-0.5 * (p.dim * LOG_2PI + alpha @ alpha) - p.half_log_det())


def _validate_indices(idx, n, what="index"):
    idx = np.atleast_1d(np.asarray(idx, dtype=int))
    if idx.size == 0:
        raise ValueError(f"{what} set must be nonempty")
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError(f"{what} {idx.tolist()} out of range for dimension {n}")
    if np.unique(idx).size != idx.size:
        raise ValueError(f"{what} set contains duplicates: {idx.tolist()}")
    return idx


def mvn_marginal(p: GaussianDist, idx) -> GaussianDist:
    """Marginal of ``p`` on the coordinates ``idx`` (in the given order)."""
    idx = _validate_indices(idx, p.dim, "marginal index")
    return GaussianDist(p.mean[idx], p.cov[np.ix_(idx, idx)])


def mvn_condition(joint: GaussianDist, obs_idx, obs_val) -> GaussianDist:
    """Condition ``joint`` on coordinates ``obs_idx`` taking values ``obs_val``.

    Returns the Gaussian over the remaining coordinates, kept in their
    original ascending order.
    """
    obs_idx = _validate_indices(obs_idx, joint.dim, "observed index")
    obs_val = np.atleast_1d(np.asarray(obs_val, dtype=float))
    if obs_val.shape[0] != obs_idx.shape[0]:
        raise ValueError(
            f"{obs_idx.shape[0]} observed indices but {obs_val.shape[0]} values"
        )
    keep = np.setdiff1d(np.arange(joint.dim), obs_idx)
    if keep.size == 0:
        raise ValueError("cannot condition on all coordinates at once")
    cond = conditional_from_joint(joint, keep, obs_idx)
    return GaussianDist(cond.weights @ obs_val + cond.offset, cond.cov)


@dataclass(frozen=True)
class AffineConditional:
    """Gaussian conditional law ``x | v ~ N(weights @ v + offset, cov)``."""

    weights: np.ndarray
    offset: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.atleast_1d(np.asarray(self.offset, dtype=float))
        C = _check_symmetric(self.cov, 1e-10, "conditional covariance")
        if W.shape[0] != b.shape[0] or W.shape[0] != C.shape[0]:
            raise ValueError(
                f"inconsistent conditional shapes: weights {W.shape}, "
                f"offset {b.shape}, cov {C.shape}"
            )
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "offset", b)
        object.__setattr__(self, "cov", 0.5 * (C + C.T))

    @property
    def out_dim(self) -> int:
        return self.offset.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def at(self, v) -> GaussianDist:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return GaussianDist(self.weights @ v + self.offset, self.cov)


def conditional_from_joint(joint: GaussianDist, dep_idx, given_idx) -> AffineConditional:
    """Extract the conditional of ``dep_idx`` given ``given_idx`` from a joint.

    Solves through the Cholesky factor of the conditioning block, so the
    joint itself is never inverted.
    """
    dep_idx = _validate_indices(dep_idx, joint.dim, "dependent index")
    given_idx = _validate_indices(given_idx, joint.dim, "conditioning index")
    if np.intersect1d(dep_idx, given_idx).size:
        raise ValueError("dependent and conditioning index sets overlap")
    S_dg = joint.cov[np.ix_(dep_idx, given_idx)]
    S_gg = joint.cov[np.ix_(given_idx, given_idx)]
    S_dd = joint.cov[np.ix_(dep_idx, dep_idx)]
    Lg, _ = _chol_with_fallback(S_gg)
    # W = S_dg S_gg^-1 via two triangular solves
    half = solve_triangular(Lg, S_dg.T, lower=True)
    W = solve_triangular(Lg.T, half, lower=False).T
    offset = joint.mean[dep_idx] - W @ joint.mean[given_idx]
    cov = S_dd - W @ S_dg.T
    return AffineConditional(W, offset, cov)


def expected_conditional_kl(
    q_cond: AffineConditional, p_cond: AffineConditional, over: GaussianDist
) -> float:
    """``E_{v ~ over}[ KL( q_cond(.|v) || p_cond(.|v) ) ]`` in closed form.

    With mean difference ``M v + d`` (``M = Wq - Wp``, ``d = bq - bp``)
    the expectation adds ``tr(Cp^-1 M S M^T)`` and a Mahalanobis term at
    the mean of ``over`` to the usual Gaussian KL.
    """
    if q_cond.out_dim != p_cond.out_dim or q_cond.in_dim != p_cond.in_dim:
        raise ValueError("conditional shape mismatch between q and p")
    if over.dim != q_cond.in_dim:
        raise ValueError(
            f"mixing distribution has dimension {over.dim}, conditionals "
            f"expect {q_cond.in_dim}"
        )
    k = q_cond.out_dim
    Lp, _ = _chol_with_fallback(p_cond.cov)
    Lq, _ = _chol_with_fallback(q_cond.cov)
    half = solve_triangular(Lp, Lq, lower=True)
    trace_term = float(np.sum(half * half))
    log_det_p = float(np.sum(np.log(np.diag(Lp))))
    log_det_q = float(np.sum(np.log(np.diag(Lq))))
    M = q_cond.weights - p_cond.weights
    d = q_cond.offset - p_cond.offset
    # tr(Cp^-1 M S M^T) with S = cov of the mixing distribution
    TM = solve_triangular(Lp, M @ over.chol, lower=True)
    spread = float(np.sum(TM * TM))
    alpha = solve_triangular(Lp, M @ over.mean + d, lower=True)
    maha = float(alpha @ alpha)
    kl = 0.5 * (trace_term + spread + maha - k) + log_det_p - log_det_q
    return max(kl, 0.0)


def joint_from_marginal_and_conditional(
    marg: GaussianDist, cond: AffineConditional
) -> GaussianDist:
    """Joint over (v, x) from ``v ~ marg`` and ``x | v ~ cond``.

    The marginal block comes first in the returned ordering.
    """
    if cond.in_dim != marg.dim:
        raise ValueError(
            f"conditional expects input dimension {cond.in_dim}, "
            f"marginal has {marg.dim}"
        )
    W = cond.weights
    S = marg.cov
    cross = S @ W.T
    mean = np.concatenate([marg.mean, W @ marg.mean + cond.offset])
    top = np.hstack([S, cross])
    bottom = np.hstack([cross.T, W @ cross + cond.cov])
    return GaussianDist(mean, np.vstack([top, bottom]))
