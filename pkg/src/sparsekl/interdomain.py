"""Inducing features defined by integrals of the process.

A feature is a scalar random variable obtained from the process ``f``:
either a point evaluation ``u = f(z)`` or a Gaussian-window average

    u = integral N(s; center, diag(widths^2)) f(s) ds,

with the window normalized as a probability density.  For the
squared-exponential kernel both the feature/point and feature/feature
covariances have closed forms; adaptive quadrature versions are kept
alongside as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernels import Kernel, as_points, kernel_matrix

__all__ = [
    "PointFeature",
    "GaussianWindowFeature",
    "feature_point_cov",
    "feature_feature_cov",
    "assemble_Kuu",
    "assemble_Kuf",
    "feature_prior_mean",
    "feature_point_cov_quadrature",
    "feature_feature_cov_quadrature",
    "feature_to_dict",
    "feature_from_dict",
]


@dataclass(frozen=True)
class PointFeature:
    """Point evaluation ``u = f(location)``."""

    location: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        if loc.ndim != 1:
            raise ValueError(f"location must be a vector, got shape {loc.shape}")
        if not np.all(np.isfinite(loc)):
            raise ValueError("location must be finite")
        object.__setattr__(self, "location", loc)

    @property
    def input_dim(self) -> int:
        return self.location.shape[0]


@dataclass(frozen=True)
class GaussianWindowFeature:
    """Average of the process under a normalized Gaussian window.

    ``widths`` are the per-dimension standard deviations of the window.
    """

    center: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        w = np.atleast_1d(np.asarray(self.widths, dtype=float))
        if c.shape != w.shape or c.ndim != 1:
            raise ValueError(
                f"center and widths must be vectors of equal length, got "
                f"shapes {c.shape} and {w.shape}"
            )
        if not np.all(w > 0):
            raise ValueError(f"widths must be positive, got {w.tolist()}")
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(w)):
            raise ValueError("center and widths must be finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "widths", w)

    @property
    def input_dim(self) -> int:
        return self.center.shape[0]


def _check_dim(feature, kernel: Kernel):
    if feature.input_dim != kernel.input_dim:
        raise ValueError(
            f"feature has dimension {feature.input_dim}, kernel expects "
            f"{kernel.input_dim}"
        )


def feature_point_cov(feature, kernel: Kernel, X) -> np.ndarray:
    """Covariances ``cov(u, f(x))`` for each row x of ``X``.

    For a Gaussian window the squared-exponential integral contracts to
    another squared exponential with per-dimension scale
    ``lengthscale^2 + width^2``.
    """
    _check_dim(feature, kernel)
    X = as_points(X, kernel.input_dim)
    if isinstance(feature, PointFeature):
        return kernel_matrix(kernel, feature.location[None, :], X)[0]
    if isinstance(feature, GaussianWindowFeature):
        ell2 = kernel.lengthscales**2
        comb = ell2 + feature.widths**2
        scale = np.prod(np.sqrt(ell2 / comb))
        diff2 = (feature.center[None, :] - X) ** 2
        return kernel.variance * scale * np.exp(-0.5 * np.sum(diff2 / comb, axis=1))
    raise TypeError(f"unknown feature type {type(feature).__name__}")


def feature_feature_cov(f1, f2, kernel: Kernel) -> float:
    """Covariance ``cov(u1, u2)`` between two features.

    Window/window pairs combine widths as ``lengthscale^2 + w1^2 + w2^2``.
    """
    _check_dim(f1, kernel)
    _check_dim(f2, kernel)
    if isinstance(f1, PointFeature) and isinstance(f2, PointFeature):
        return float(
            kernel_matrix(kernel, f1.location[None, :], f2.location[None, :])[0, 0]
        )
    if isinstance(f1, PointFeature):
        return float(feature_point_cov(f2, kernel, f1.location[None, :])[0])
    if isinstance(f2, PointFeature):
        return float(feature_point_cov(f1, kernel, f2.location[None, :])[0])
    ell2 = kernel.lengthscales**2
    comb = ell2 + f1.widths**2 + f2.widths**2
    scale = np.prod(np.sqrt(ell2 / comb))
    diff2 = (f1.center - f2.center) ** 2
    return float(kernel.variance * scale * np.exp(-0.5 * np.sum(diff2 / comb)))


def assemble_Kuu(features, kernel: Kernel) -> np.ndarray:
    """Feature/feature covariance matrix, symmetrized exactly."""
    M = len(features)
    if M == 0:
        raise ValueError("need at least one inducing feature")
    if all(isinstance(g, PointFeature) for g in features):
        Z = np.vstack([g.location for g in features])
        return kernel_matrix(kernel, Z, Z)
    K = np.empty((M, M))
    for i in range(M):
        for j in range(i, M):
            K[i, j] = feature_feature_cov(features[i], features[j], kernel)
            K[j, i] = K[i, j]
    return K


def assemble_Kuf(features, kernel: Kernel, X) -> np.ndarray:
    """Feature/point covariance matrix, one row per feature."""
    if len(features) == 0:
        raise ValueError("need at least one inducing feature")
    X = as_points(X, kernel.input_dim)
    if all(isinstance(g, PointFeature) for g in features):
        Z = np.vstack([g.location for g in features])
        return kernel_matrix(kernel, Z, X)
    return np.vstack([feature_point_cov(g, kernel, X) for g in features])


def feature_prior_mean(features, kernel: Kernel) -> np.ndarray:
    """Prior mean of the feature vector.

    Point evaluations and probability-density windows both map the
    constant mean function to the same constant.
    """
    for g in features:
        _check_dim(g, kernel)
    return np.full(len(features), kernel.mean_const)


@lru_cache(maxsize=8)
def _gl_nodes(order):
    return np.polynomial.legendre.leggauss(order)


def _adaptive_gl(f, lo, hi, abs_tol, order=20, max_depth=40):
    """Adaptive Gauss-Legendre panel integration of a vectorized integrand."""
    nodes, weights = _gl_nodes(order)

    def panel(a, b):
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        return half * float(weights @ f(mid + half * nodes))

    def recurse(a, b, whole, tol, depth):
        mid = 0.5 * (a + b)
        left = panel(a, mid)
        right = panel(mid, b)
        if abs(left + right - whole) <= tol or depth >= max_depth:
            return left + right
        return recurse(a, mid, left, 0.5 * tol, depth + 1) + recurse(
            mid, b, right, 0.5 * tol, depth + 1
        )

    return recurse(lo, hi, panel(lo, hi), abs_tol, 0)


def _window_density(s, center, width):
    z = (s - center) / width
    return np.exp(-0.5 * z * z) / (width * np.sqrt(2.0 * np.pi))


def feature_point_cov_quadrature(feature, kernel: Kernel, x, abs_tol=1e-9):
    """Quadrature evaluation of ``cov(u, f(x))`` for a window feature.

    Integrates dimension by dimension (the squared-exponential kernel
    and the window both factorize).  Bounds extend eight combined widths
    past the window center and the evaluation point.
    """
    if not isinstance(feature, GaussianWindowFeature):
        raise TypeError("quadrature check applies to window features")
    _check_dim(feature, kernel)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != feature.center.shape:
        raise ValueError(
            f"point has shape {x.shape}, feature has dimension {feature.input_dim}"
        )
    total = kernel.variance
    for a in range(feature.input_dim):
        c, w = feature.center[a], feature.widths[a]
        ell = kernel.lengthscales[a]
        reach = 8.0 * np.hypot(w, ell)
        lo = min(c, x[a]) - reach
        hi = max(c, x[a]) + reach

        def integrand(s, a=a, c=c, w=w, ell=ell):
            return _window_density(s, c, w) * np.exp(-0.5 * ((s - x[a]) / ell) ** 2)

        total *= _adaptive_gl(integrand, lo, hi, abs_tol)
    return float(total)


def feature_feature_cov_quadrature(f1, f2, kernel: Kernel, abs_tol=1e-9):
    """Nested quadrature evaluation of ``cov(u1, u2)`` for window features."""
    if not (
        isinstance(f1, GaussianWindowFeature) and isinstance(f2, GaussianWindowFeature)
    ):
        raise TypeError("quadrature check applies to window features")
    _check_dim(f1, kernel)
    _check_dim(f2, kernel)
    total = kernel.variance
    for a in range(f1.input_dim):
        c1, w1 = f1.center[a], f1.widths[a]
        c2, w2 = f2.center[a], f2.widths[a]
        ell = kernel.lengthscales[a]
        s_lo = c1 - 8.0 * np.hypot(w1, ell)
        s_hi = c1 + 8.0 * np.hypot(w1, ell)
        t_lo = c2 - 8.0 * np.hypot(w2, ell)
        t_hi = c2 + 8.0 * np.hypot(w2, ell)

        def outer(s_vec):
            out = np.empty_like(s_vec)
            for i, s in enumerate(s_vec):
                inner = _adaptive_gl(
                    lambda t: _window_density(t, c2, w2)
                    * np.exp(-0.5 * ((s - t) / ell) ** 2),
                    t_lo,
                    t_hi,
                    0.1 * abs_tol,
                )
                out[i] = _window_density(s, c1, w1) * inner
            return out

        total *= _adaptive_gl(outer, s_lo, s_hi, abs_tol)
    return float(total)


def feature_to_dict(feature) -> dict:
    """JSON-ready record for a feature."""
    if isinstance(feature, PointFeature):
        return {"type": "point", "loc": feature.location.tolist()}
    if isinstance(feature, GaussianWindowFeature):
        return {
            "type": "gwindow",
            "center": feature.center.tolist(),
            "widths": feature.widths.tolist(),
        }
    raise TypeError(f"unknown feature type {type(feature).__name__}")


def feature_from_dict(record: dict):
    """Inverse of :func:`feature_to_dict`."""
    if not isinstance(record, dict) or "type" not in record:
        raise ValueError(f"feature record must be a dict with a 'type' key: {record!r}")
    kind = record["type"]
    if kind == "point":
        extra = set(record) - {"type", "loc"}
        if extra or "loc" not in record:
            raise ValueError(f"malformed point feature record: {record!r}")
        return PointFeature(np.asarray(record["loc"], dtype=float))
    if kind == "gwindow":
        extra = set(record) - {"type", "center", "widths"}
        if extra or "center" not in record or "widths" not in record:
            raise ValueError(f"malformed gwindow feature record: {record!r}")
        return GaussianWindowFeature(
            np.asarray(record["center"], dtype=float),
            np.asarray(record["widths"], dtype=float),
        )
    raise ValueError(f"unknown feature type {kind!r}")
