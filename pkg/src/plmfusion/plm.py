"""Profile least squares for the partially linear model ``Y = m(Z) + X beta + eps``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as scl
from numpy.typing import ArrayLike, NDArray

from plmfusion.errors import RankDeficiencyError, ValidationError
from plmfusion.smoother import Bandwidth, SmootherMatrix, build_smoother

__all__ = [
    "Dataset",
    "PlmFit",
    "Profiled",
    "profile",
    "fit_pls",
    "fit_weighted_pls",
    "estimate_curve",
]

ESTIMATORS = ("pls", "ib1", "ib2")


def _matrix(a, n, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ValidationError(f"{name} must have {n} rows, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains missing or non-finite values")
    return arr


@dataclass
class Dataset:
    """Internal individual-level data.

    ``x`` holds the linearly-modelled covariates (including any covariates
    unavailable to the external study), ``z`` the nonlinear ones. ``extra``
    carries further named columns that a working model may reference but
    that do not enter the PLM, e.g. transformations of Z.

    No centering or standardisation is done anywhere in the package; the
    PLM has no intercept since ``m(Z)`` absorbs it.
    """

    y: NDArray[np.float64]
    x: NDArray[np.float64]
    z: NDArray[np.float64]
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    y_name: str = "y"
    extra: dict[str, NDArray[np.float64]] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 1:
            raise ValidationError(f"y must be 1-D, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValidationError("y contains missing or non-finite values")
        n = y.shape[0]
        self.y = y
        self.x = _matrix(self.x, n, "x")
        self.z = _matrix(self.z, n, "z")
        p, d = self.x.shape[1], self.z.shape[1]
        if not self.x_names:
            self.x_names = tuple(f"x{j + 1}" for j in range(p))
        if not self.z_names:
            self.z_names = ("z",) if d == 1 else tuple(f"z{j + 1}" for j in range(d))
        self.x_names, self.z_names = tuple(self.x_names), tuple(self.z_names)
        if len(self.x_names) != p or len(self.z_names) != d:
            raise ValidationError("column name lists do not match matrix widths")
        if n <= p + d + 1:
            raise ValidationError(f"need n > p + d + 1 = {p + d + 1}, got n={n}")
        self.extra = {k: _matrix(v, n, k)[:, 0] for k, v in self.extra.items()}
        names = [*self.x_names, *self.z_names, *self.extra]
        if len(set(names)) != len(names) or self.y_name in names:
            raise ValidationError("duplicate column names in dataset")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def column(self, name: str) -> NDArray[np.float64]:
        """Look a column up by name across y, x, z and the extra columns."""
        if name == self.y_name:
            return self.y
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        if name in self.z_names:
            return self.z[:, self.z_names.index(name)]
        if name in self.extra:
            return self.extra[name]
        raise ValidationError(f"no column named {name!r} in dataset")

    def columns(self, names) -> NDArray[np.float64]:
        return np.column_stack([self.column(c) for c in names]) if names else np.empty((self.n, 0))


@dataclass
class Profiled:
    """``(I - S) Y`` and ``(I - S) X``, computed once and reused by every fit."""

    smoother: SmootherMatrix
    yt: NDArray[np.float64]
    xt: NDArray[np.float64]


def profile(dataset: Dataset, S: SmootherMatrix) -> Profiled:
    if S.rows != dataset.n or S.cols != dataset.n:
        raise ValidationError(
            f"smoother is {S.rows}x{S.cols}; expected {dataset.n}x{dataset.n} at the sample points"
        )
    return Profiled(S, S.residual_operator(dataset.y), S.residual_operator(dataset.x))


@dataclass
class PlmFit:
    """Fitted partially linear model.

    ``curve`` is ``S (y - x beta)`` at the sample points and ``residuals``
    is ``y - x beta - curve``. ``vcov_beta`` is filled in by the inference
    module and stays ``None`` until then.
    """

    beta: NDArray[np.float64]
    curve: NDArray[np.float64]
    residuals: NDArray[np.float64]
    estimator: str
    bandwidth: Bandwidth
    x_names: tuple[str, ...] = ()
    vcov_beta: NDArray[np.float64] | None = None
    weights: NDArray[np.float64] | None = None


def _check_rank(xt, names, tol=1e-10):
    _, R, piv = scl.qr(xt, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        raise RankDeficiencyError("design has no columns")
    rank = int(np.sum(diag > tol * max(diag[0], 1e-300)))
    if rank < xt.shape[1]:
        bad = sorted(piv[rank:].tolist())
        labels = [names[j] if j < len(names) else str(j) for j in bad]
        raise RankDeficiencyError(
            "(I - S) X is rank deficient; offending column(s): "
            + ", ".join(labels)
            + " (constant or purely Z-driven columns are absorbed by m(Z))",
            columns=labels,
        )


def _solve(xt, yt, w, names):
    _check_rank(xt, names)
    if w is None:
        beta, *_ = np.linalg.lstsq(xt, yt, rcond=None)
    else:
        r = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(xt * r[:, None], yt * r, rcond=None)
    return beta


def _finish(dataset, prof, beta, estimator, weights=None):
    partial = dataset.y - dataset.x @ beta
    curve = prof.smoother.entries @ partial
    return PlmFit(
        beta=beta,
        curve=curve,
        residuals=partial - curve,
        estimator=estimator,
        bandwidth=prof.smoother.bandwidth,
        x_names=dataset.x_names,
        weights=weights,
    )


def fit_pls(dataset: Dataset, S: SmootherMatrix, profiled: Profiled | None = None) -> PlmFit:
    """Profile least squares: ordinary least squares of ``(I-S)Y`` on ``(I-S)X``.

    Raises:
        RankDeficiencyError: naming the columns that make ``(I-S)X`` singular.
    """
    prof = profiled if profiled is not None else profile(dataset, S)
    beta = _solve(prof.xt, prof.yt, None, dataset.x_names)
    return _finish(dataset, prof, beta, "pls")


def fit_weighted_pls(
    dataset: Dataset,
    S: SmootherMatrix,
    weights,
    estimator: str = "ib1",
    profiled: Profiled | None = None,
) -> PlmFit:
    """Weighted profile least squares with diagonal weights ``p_i``.

    ``beta = {X'(I-S)' P (I-S) X}^{-1} X'(I-S)' P (I-S) Y``. ``weights`` may
    be a raw vector or any object with a ``p`` attribute (e.g. EL weights);
    it must be positive and sum to one.
    """
    if estimator not in ESTIMATORS:
        raise ValidationError(f"unknown estimator tag {estimator!r}")
    p = np.asarray(getattr(weights, "p", weights), dtype=np.float64)
    if p.shape != (dataset.n,):
        raise ValidationError(f"weights must have length {dataset.n}, got shape {p.shape}")
    if not np.all(p > 0):
        raise ValidationError("weights must be strictly positive")
    if abs(p.sum() - 1.0) > 1e-10:
        raise ValidationError(f"weights must sum to 1, got {p.sum():.15g}")
    prof = profiled if profiled is not None else profile(dataset, S)
    beta = _solve(prof.xt, prof.yt, p, dataset.x_names)
    return _finish(dataset, prof, beta, estimator, weights=p)


def estimate_curve(
    dataset: Dataset,
    beta: ArrayLike,
    grid: ArrayLike,
    bw: Bandwidth,
    kernel: str = "epanechnikov",
    residuals: ArrayLike | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Evaluate ``m_hat`` on a grid with pointwise variance ``diag(S C S')``.

    ``C = diag(eps_hat**2)`` uses the sample-point residuals; pass them in
    to avoid rebuilding the sample-point smoother.

    Returns:
        ``(values, pointwise_var)``, each of length ``len(grid)``.

    Raises:
        ValidationError: if a grid point lies outside the observed Z range.
    """
    from plmfusion.inference import curve_variance

    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.shape[0] != dataset.p:
        raise ValidationError(f"beta has length {beta.shape[0]}, expected {dataset.p}")
    G = np.asarray(grid, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[1] != dataset.d:
        raise ValidationError(f"grid has {G.shape[1]} columns, z has {dataset.d}")
    lo, hi = dataset.z.min(axis=0), dataset.z.max(axis=0)
    outside = np.any((G < lo) | (G > hi), axis=1)
    if outside.any():
        raise ValidationError(
            f"{int(outside.sum())} grid point(s) outside the observed Z range; extrapolation unsupported"
        )
    partial = dataset.y - dataset.x @ beta
    if residuals is None:
        S_n = build_smoother(dataset.z, bw, kernel=kernel)
        residuals = partial - S_n.entries @ partial
    S_g = build_smoother(dataset.z, bw, eval_points=G, kernel=kernel)
    return S_g.entries @ partial, curve_variance(S_g, residuals)
