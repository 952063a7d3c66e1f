"""Flat parameter vectors, finite-difference gradients, monotone ascent.

Objectives are treated as black boxes of a flat unconstrained vector.
Named blocks carry a transform tag saying how raw coordinates map to
model values (identity, log, or softplus for positives), so packing and
unpacking are pure reshuffles and constraints can never be violated by
an optimization step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .interdomain import GaussianWindowFeature, PointFeature
from .kernels import Kernel
from .svgp import GaussianNoise, SVGPState

__all__ = [
    "ParamBlock",
    "ParamLayout",
    "ParamVector",
    "pack",
    "from_constrained",
    "numeric_grad",
    "OptimizeResult",
    "maximize",
    "svgp_parameterization",
]

TRANSFORMS = ("identity", "log", "softplus")


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("softplus-constrained values must be positive")
    return x + np.log1p(-np.exp(-x))


def _apply_transform(tag, raw):
    if tag == "identity":
        return np.asarray(raw, dtype=float).copy()
    if tag == "log":
        return np.exp(raw)
    if tag == "softplus":
        return _softplus(raw)
    raise ValueError(f"unknown transform {tag!r}")


def _invert_transform(tag, value):
    value = np.asarray(value, dtype=float)
    if tag == "identity":
        return value.copy()
    if tag == "log":
        if np.any(value <= 0):
            raise ValueError("log-constrained values must be positive")
        return np.log(value)
    if tag == "softplus":
        return _softplus_inv(value)
    raise ValueError(f"unknown transform {tag!r}")


@dataclass(frozen=True)
class ParamBlock:
    name: str
    size: int
    transform: str = "identity"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"block {self.name!r} must have positive size")
        if self.transform not in TRANSFORMS:
            raise ValueError(
                f"block {self.name!r} has unknown transform {self.transform!r}; "
                f"expected one of {TRANSFORMS}"
            )


@dataclass(frozen=True)
class ParamLayout:
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in layout: {names}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def total_size(self) -> int:
        return sum(b.size for b in self.blocks)

    def slices(self) -> dict:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out

    def coordinate_names(self) -> list:
        names = []
        for b in self.blocks:
            names.extend(f"{b.name}[{i}]" for i in range(b.size))
        return names


@dataclass(frozen=True)
class ParamVector:
    """A flat raw vector together with its block layout."""

    layout: ParamLayout
    raw: np.ndarray

    def __post_init__(self):
        raw = np.atleast_1d(np.asarray(self.raw, dtype=float))
        if raw.shape != (self.layout.total_size,):
            raise ValueError(
                f"raw vector has shape {raw.shape}, layout expects "
                f"({self.layout.total_size},)"
            )
        object.__setattr__(self, "raw", raw)

    def unpack(self) -> dict:
        """Raw blocks by name; a pure slicing of the flat vector."""
        return {name: self.raw[sl].copy() for name, sl in self.layout.slices().items()}

    def constrained(self) -> dict:
        """Model-space values by name, with each block's transform applied."""
        sls = self.layout.slices()
        return {
            b.name: _apply_transform(b.transform, self.raw[sls[b.name]])
            for b in self.layout.blocks
        }

    def with_raw(self, raw) -> "ParamVector":
        return ParamVector(self.layout, raw)


def pack(layout: ParamLayout, raw_blocks: dict) -> ParamVector:
    """Concatenate named raw blocks into a flat vector."""
    sls = layout.slices()
    if set(raw_blocks) != set(sls):
        raise ValueError(
            f"blocks {sorted(raw_blocks)} do not match layout {sorted(sls)}"
        )
    out = np.empty(layout.total_size)
    for name, sl in sls.items():
        block = np.atleast_1d(np.asarray(raw_blocks[name], dtype=float))
        if block.shape != (sl.stop - sl.start,):
            raise ValueError(
                f"block {name!r} has shape {block.shape}, expected "
                f"({sl.stop - sl.start},)"
            )
        out[sl] = block
    return ParamVector(layout, out)


def from_constrained(layout: ParamLayout, values: dict) -> ParamVector:
    """Build a raw vector from model-space values; rejects infeasible ones."""
    raw = {}
    for b in layout.blocks:
        if b.name not in values:
            raise ValueError(f"missing block {b.name!r}")
        raw[b.name] = _invert_transform(b.transform, values[b.name])
    if set(values) != {b.name for b in layout.blocks}:
        extra = set(values) - {b.name for b in layout.blocks}
        raise ValueError(f"unexpected blocks {sorted(extra)}")
    return pack(layout, raw)


def numeric_grad(objective, x: ParamVector, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate step ``h * (1 + |x_i|)``.

    Raises if the objective is non-finite at any probe, naming the
    coordinate by block and offset.
    """
    raw = x.raw
    grad = np.empty(raw.shape[0])
    names = x.layout.coordinate_names()
    for i in range(raw.shape[0]):
        step = h * (1.0 + abs(raw[i]))
        plus = raw.copy()
        plus[i] += step
        minus = raw.copy()
        minus[i] -= step
        f_plus = objective(x.with_raw(plus))
        f_minus = objective(x.with_raw(minus))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(
                f"objective is non-finite when probing coordinate {names[i]}: "
                f"f(+)={f_plus}, f(-)={f_minus}"
            )
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class OptimizeResult:
    x: ParamVector
    objective: float
    trace: np.ndarray
    iterations: int
    converged: bool
    records: tuple

    def trace_rows(self) -> list:
        """Rows (iter, objective, step_scale, grad_norm) for the trace file."""
        return list(self.records)


def maximize(
    objective,
    x0: ParamVector,
    max_iters: int = 2000,
    tol: float = 1e-8,
    init_step: float = 0.1,
    grad_h: float = 1e-5,
) -> OptimizeResult:
    """Deterministic full-batch ascent with per-parameter adaptive steps.

    Each iteration moves along the sign of the finite-difference
    gradient with per-coordinate step sizes that grow when the gradient
    sign persists and shrink when it flips.  A proposal that would
    decrease the objective is halved until it does not, so the recorded
    trace is non-decreasing.  Terminates on ``max_iters`` or when the
    accepted improvement falls below ``tol * (1 + |objective|)``.
    """
    x = x0.raw.copy()
    f = float(objective(x0))
    if not math.isfinite(f):
        raise ValueError(f"objective is non-finite at the starting point: {f}")
    steps = init_step * (1.0 + np.abs(x))
    prev_sign = np.zeros_like(x)
    trace = [f]
    records = []
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        g = numeric_grad(objective, x0.with_raw(x), grad_h)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm == 0.0:
            converged = True
            records.append((it, f, float(np.max(steps)), grad_norm))
            trace.append(f)
            break
        sign = np.sign(g)
        agree = sign * prev_sign
        steps = np.where(agree > 0, steps * 1.2, np.where(agree < 0, steps * 0.5, steps))
        prev_sign = sign
        accepted = False
        scale = 1.0
        for _ in range(60):
            cand = x + scale * steps * sign
            fc = float(objective(x0.with_raw(cand)))
            if math.isfinite(fc) and fc >= f:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            records.append((it, f, float(np.max(steps) * scale), grad_norm))
            trace.append(f)
            break
        steps = steps * scale
        delta = fc - f
        x, f = cand, fc
        records.append((it, f, float(np.max(steps)), grad_norm))
        trace.append(f)
        if delta <= tol * (1.0 + abs(f)):
            converged = True
            break
    return OptimizeResult(
        x=x0.with_raw(x),
        objective=f,
        trace=np.asarray(trace),
        iterations=iterations,
        converged=converged,
        records=tuple(records),
    )


def svgp_parameterization(
    state: SVGPState,
    optimize_hypers: bool = True,
    optimize_features: bool = False,
):
    """Expose a variational state as a flat parameter vector.

    Returns ``(x0, rebuild)`` where ``rebuild`` maps any parameter
    vector with the same layout back to a state.  The variational
    Cholesky diagonal lives behind a softplus, scale parameters behind a
    log, everything else is unconstrained.
    """
    M = state.num_inducing
    d = state.kernel.input_dim
    tril = np.tril_indices(M, -1)
    blocks = [
        ParamBlock("q_mean", M),
        ParamBlock("q_chol_diag", M, "softplus"),
    ]
    values = {
        "q_mean": state.q_mean,
        "q_chol_diag": np.diag(state.q_chol),
    }
    if M > 1:
        blocks.append(ParamBlock("q_chol_lower", M * (M - 1) // 2))
        values["q_chol_lower"] = state.q_chol[tril]
    if optimize_hypers:
        blocks.append(ParamBlock("kernel_variance", 1, "log"))
        blocks.append(ParamBlock("kernel_lengthscales", d, "log"))
        blocks.append(ParamBlock("kernel_mean", 1))
        values["kernel_variance"] = np.array([state.kernel.variance])
        values["kernel_lengthscales"] = state.kernel.lengthscales
        values["kernel_mean"] = np.array([state.kernel.mean_const])
        if isinstance(state.likelihood, GaussianNoise):
            blocks.append(ParamBlock("noise_var", 1, "log"))
            values["noise_var"] = np.array([state.likelihood.noise_var])
    if optimize_features:
        kinds = {type(g) for g in state.features}
        if kinds == {PointFeature}:
            blocks.append(ParamBlock("feature_locations", M * d))
            values["feature_locations"] = np.concatenate(
                [g.location for g in state.features]
            )
        elif kinds == {GaussianWindowFeature}:
            blocks.append(ParamBlock("feature_centers", M * d))
            blocks.append(ParamBlock("feature_widths", M * d, "log"))
            values["feature_centers"] = np.concatenate(
                [g.center for g in state.features]
            )
            values["feature_widths"] = np.concatenate(
                [g.widths for g in state.features]
            )
        else:
            raise ValueError(
                "feature optimization needs a homogeneous feature type, got "
                f"{sorted(k.__name__ for k in kinds)}"
            )
    layout = ParamLayout(tuple(blocks))
    x0 = from_constrained(layout, values)

    def rebuild(pv: ParamVector) -> SVGPState:
        vals = pv.constrained()
        q_chol = np.zeros((M, M))
        q_chol[np.diag_indices(M)] = vals["q_chol_diag"]
        if M > 1:
            q_chol[tril] = vals["q_chol_lower"]
        kernel = state.kernel
        likelihood = state.likelihood
        if optimize_hypers:
            kernel = Kernel(
                float(vals["kernel_variance"][0]),
                vals["kernel_lengthscales"],
                float(vals["kernel_mean"][0]),
            )
            if isinstance(state.likelihood, GaussianNoise):
                likelihood = GaussianNoise(float(vals["noise_var"][0]))
        features = state.features
        if optimize_features:
            if kinds == {PointFeature}:
                locs = vals["feature_locations"].reshape(M, d)
                features = tuple(PointFeature(loc) for loc in locs)
            else:
                centers = vals["feature_centers"].reshape(M, d)
                widths = vals["feature_widths"].reshape(M, d)
                features = tuple(
                    GaussianWindowFeature(c, w) for c, w in zip(centers, widths)
                )
        return replace(
            state,
            features=features,
            q_mean=vals["q_mean"],
            q_chol=q_chol,
            kernel=kernel,
            likelihood=likelihood,
        )

    return x0, rebuild
