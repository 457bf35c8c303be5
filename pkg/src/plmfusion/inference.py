"""Sandwich variances for the PLS / ib1 / ib2 estimators and curve variance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from plmfusion.errors import NegativeVarianceError, SingularDesignError, ValidationError

if TYPE_CHECKING:
    from plmfusion.evidence import WorkingModel
    from plmfusion.plm import Dataset, PlmFit, Profiled
    from plmfusion.smoother import SmootherMatrix

__all__ = [
    "SandwichComponents",
    "WaldRow",
    "sandwich_components",
    "variance_beta",
    "curve_variance",
    "wald_summary",
    "external_fraction",
]


@dataclass(frozen=True)
class SandwichComponents:
    """Sample analogues of the matrices in the asymptotic variance of beta.

    Sigma = E[xt xt'], G = E[xt xt' eps^2], M = E[xt eps H'],
    Omega = {E[H H']}^{-1}, where xt = X - E(X|Z) is estimated by (I - S) X.
    """

    Sigma: NDArray[np.float64]
    G: NDArray[np.float64]
    M: NDArray[np.float64]
    Omega: NDArray[np.float64]
    rho: float = 1.0


def external_fraction(n: int, n_external: int | None, is_truth: bool = False) -> float:
    """``N / (n + N)``, or 1 when the external value is treated as the truth."""
    if is_truth:
        return 1.0
    if n_external is None:
        raise ValidationError("n_external is required to compute the external fraction")
    return n_external / (n + n_external)


def sandwich_components(
    dataset: "Dataset",
    S: "SmootherMatrix | Profiled",
    fit: "PlmFit",
    model: "WorkingModel",
    theta_used: ArrayLike,
    rho: float = 1.0,
) -> SandwichComponents:
    """Plug-in estimates of Sigma, G, M and Omega.

    Args:
        dataset: Internal data the fit was computed on.
        S: Sample-point smoother, or an already profiled design.
        fit: Fitted model supplying the residuals.
        model: External working model.
        theta_used: Value at which the working score is evaluated.
        rho: External fraction stored with the components.
    """
    from plmfusion.evidence import working_score

    if not 0.0 < rho <= 1.0:
        raise ValidationError(f"rho must lie in (0, 1], got {rho}")
    xt = S.xt if hasattr(S, "xt") else S.residual_operator(dataset.x)
    eps = np.asarray(fit.residuals, dtype=np.float64)
    if eps.shape != (dataset.n,):
        raise ValidationError("residual length does not match the dataset")
    H = working_score(model, dataset, theta_used)
    n = dataset.n

    Sigma = xt.T @ xt / n
    xe = xt * eps[:, None]
    G = xe.T @ xe / n
    M = xe.T @ H / n
    HH = H.T @ H / n
    if np.linalg.cond(Sigma) > 1e14:
        raise SingularDesignError("Sigma_hat is singular")
    if np.linalg.cond(HH) > 1e14:
        raise SingularDesignError("mean outer product of the working score is singular")
    Omega = np.linalg.inv(HH)
    return SandwichComponents(
        Sigma=0.5 * (Sigma + Sigma.T),
        G=0.5 * (G + G.T),
        M=M,
        Omega=0.5 * (Omega + Omega.T),
        rho=float(rho),
    )


def variance_beta(components: SandwichComponents, estimator: str, n: int) -> NDArray[np.float64]:
    """Asymptotic covariance of beta_hat divided by ``n``.

    pls: ``Sigma^{-1} G Sigma^{-T} / n``; ib1 subtracts ``M Omega M'`` from
    ``G``; ib2 subtracts ``rho M Omega M'``.

    Raises:
        NegativeVarianceError: if a diagonal entry is below ``-1e-12``.
    """
    c = components
    if estimator == "pls":
        core = c.G
    elif estimator == "ib1":
        core = c.G - c.M @ c.Omega @ c.M.T
    elif estimator == "ib2":
        core = c.G - c.rho * (c.M @ c.Omega @ c.M.T)
    else:
        raise ValidationError(f"unknown estimator {estimator!r}")
    Sinv = np.linalg.inv(c.Sigma)
    V = Sinv @ core @ Sinv.T / n
    V = 0.5 * (V + V.T)
    diag = np.diag(V)
    if np.any(diag < -1e-12):
        raise NegativeVarianceError(
            f"{estimator} variance has negative diagonal {diag.min():.3g}; "
            "the evidence is likely incompatible with the internal data"
        )
    idx = np.diag_indices_from(V)
    V[idx] = np.maximum(diag, 0.0)
    return V


def curve_variance(S: "SmootherMatrix | ArrayLike", residuals: ArrayLike) -> NDArray[np.float64]:
    """Pointwise variance ``diag(S diag(eps^2) S')`` of the fitted curve."""
    S = np.asarray(getattr(S, "entries", S), dtype=np.float64)
    e2 = np.asarray(residuals, dtype=np.float64) ** 2
    if S.ndim != 2 or S.shape[1] != e2.shape[0]:
        raise ValidationError(f"smoother shape {S.shape} does not conform with {e2.shape[0]} residuals")
    return (S * S) @ e2


@dataclass(frozen=True)
class WaldRow:
    name: str
    estimate: float
    ase: float
    z: float
    p_value: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def wald_summary(beta: ArrayLike, vcov: ArrayLike, names=None, level: float = 0.95) -> list[WaldRow]:
    """Per-coefficient Wald table with two-sided normal p-values.

    Raises:
        ValidationError: if ``level`` is outside (0, 1) or a variance is not positive.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    V = np.atleast_2d(np.asarray(vcov, dtype=np.float64))
    if V.shape != (beta.size, beta.size):
        raise ValidationError(f"vcov shape {V.shape} does not match {beta.size} coefficients")
    var = np.diag(V)
    if np.any(var <= 0):
        raise ValidationError("non-positive variance in Wald summary")
    names = list(names) if names is not None else [f"b{j + 1}" for j in range(beta.size)]
    ase = np.sqrt(var)
    z = beta / ase
    pval = 2.0 * stats.norm.sf(np.abs(z))
    crit = stats.norm.ppf(0.5 + level / 2.0)
    return [
        WaldRow(str(nm), float(b), float(se), float(zz), float(pv), float(b - crit * se), float(b + crit * se))
        for nm, b, se, zz, pv in zip(names, beta, ase, z, pval)
    ]
