"""End-to-end fitting: bandwidth, estimator, variance and curve in one call."""

from __future__ import annotations

import warnings
from typing import Any

import numpy as np
from numpy.typing import NDArray

from plmfusion.bandwidth import select_bandwidth
from plmfusion.errors import ValidationError
from plmfusion.evidence import SummaryEvidence, weights_ib1, weights_ib2
from plmfusion.inference import (
    SandwichComponents,
    curve_variance,
    external_fraction,
    sandwich_components,
    variance_beta,
    wald_summary,
)
from plmfusion.io import FitReport, evidence_to_dict
from plmfusion.plm import ESTIMATORS, Dataset, fit_pls, fit_weighted_pls, profile
from plmfusion.smoother import DEFAULT_RATE, Bandwidth, bandwidth_from_rate, build_smoother, fixed_bandwidth

__all__ = ["parse_bandwidth", "resolve_bandwidth", "fit_report", "curve_on_grid"]


def parse_bandwidth(spec: str) -> str | float | tuple[str, float]:
    """Parse ``"auto"``, ``"<b>"`` or ``"s=<s>"``."""
    spec = spec.strip()
    if spec == "auto":
        return "auto"
    try:
        if spec.startswith("s="):
            s = float(spec[2:])
            if not s > 0:
                raise ValueError
            return ("s", s)
        b = float(spec)
        if not b > 0:
            raise ValueError
        return b
    except ValueError:
        raise ValidationError(f"bandwidth must be 'auto', a positive number or 's=<positive>', got {spec!r}") from None


def resolve_bandwidth(dataset: Dataset, spec, a: float = DEFAULT_RATE, kernel: str = "epanechnikov") -> Bandwidth:
    """Turn a parsed bandwidth spec (or a :class:`Bandwidth`) into a bandwidth for ``dataset``."""
    if isinstance(spec, Bandwidth):
        return spec
    if isinstance(spec, str):
        spec = parse_bandwidth(spec)
    if spec == "auto":
        return select_bandwidth(dataset, "dbe-cv", a=a, kernel=kernel)
    if isinstance(spec, tuple):
        return bandwidth_from_rate(spec[1], a, dataset.n, dataset.d)
    return fixed_bandwidth(float(spec), dataset.n, dataset.d)


def _pls_components(prof, residuals) -> SandwichComponents:
    n = prof.xt.shape[0]
    xe = prof.xt * residuals[:, None]
    Sigma = prof.xt.T @ prof.xt / n
    G = xe.T @ xe / n
    return SandwichComponents(
        Sigma=0.5 * (Sigma + Sigma.T),
        G=0.5 * (G + G.T),
        M=np.zeros((Sigma.shape[0], 1)),
        Omega=np.eye(1),
    )


def fit_report(
    dataset: Dataset,
    estimator: str = "pls",
    evidence: SummaryEvidence | None = None,
    bandwidth: Any = "auto",
    level: float = 0.95,
    a: float = DEFAULT_RATE,
    kernel: str = "epanechnikov",
    provenance: dict | None = None,
) -> FitReport:
    """Fit one estimator and collect the coefficient table, curve and diagnostics.

    Args:
        dataset: Internal data.
        estimator: ``"pls"``, ``"ib1"`` or ``"ib2"``.
        evidence: External summary; required for ``ib1`` and ``ib2``.
        bandwidth: ``"auto"``, a fixed ``b``, ``("s", s)``, a spec string or a
            :class:`Bandwidth`.
        level: Confidence level of the Wald intervals.
        a: Rate exponent for rate-rule bandwidths.
        kernel: Smoother kernel.
        provenance: Free-form input description stored in the report.

    Raises:
        ValidationError: for a missing or incomplete evidence object.
        InfeasibleConstraintError: when the EL weights cannot be solved.
    """
    if estimator not in ESTIMATORS:
        raise ValidationError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    if estimator != "pls" and evidence is None:
        raise ValidationError(f"estimator {estimator!r} needs summary evidence")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")

    notes: list[str] = []
    if evidence is not None:
        notes.extend(evidence.repairs)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        bw = resolve_bandwidth(dataset, bandwidth, a, kernel)
        S = build_smoother(dataset.z, bw, kernel=kernel)
    notes.extend(str(w.message) for w in caught if str(w.message) not in notes)
    prof = profile(dataset, S)

    weights_info = None
    if estimator == "pls":
        fit = fit_pls(dataset, S, prof)
        comp = _pls_components(prof, fit.residuals)
    else:
        if estimator == "ib1":
            if not evidence.is_truth:
                notes.append("ib1 treats the external estimate as exact; its variance ignores external uncertainty")
            w = weights_ib1(dataset, evidence)
            rho = 1.0
        else:
            w = weights_ib2(dataset, evidence)
            rho = external_fraction(dataset.n, evidence.n_external, evidence.is_truth)
        fit = fit_weighted_pls(dataset, S, w, estimator, prof)
        comp = sandwich_components(dataset, prof, fit, evidence.model, w.theta_used, rho)
        weights_info = {
            "min_p": float(w.p.min()),
            "max_p": float(w.p.max()),
            "lambda_norm": float(np.linalg.norm(w.lam)),
            "iterations": int(w.iterations),
            "converged": bool(w.converged),
            "theta_used": [float(v) for v in w.theta_used],
            "rho": float(rho),
        }
    V = variance_beta(comp, estimator, dataset.n)
    table = wald_summary(fit.beta, V, dataset.x_names, level)

    partial = dataset.y - dataset.x @ fit.beta
    curve_se = np.sqrt(curve_variance(S, fit.residuals))
    if dataset.d == 1:
        order = np.argsort(dataset.z[:, 0], kind="stable")
        curve = {
            "z": [float(v) for v in dataset.z[order, 0]],
            "m_hat": [float(v) for v in fit.curve[order]],
            "se": [float(v) for v in curve_se[order]],
        }
        z_store: list = [float(v) for v in dataset.z[:, 0]]
    else:
        curve = {
            "z": [[float(v) for v in row] for row in dataset.z],
            "m_hat": [float(v) for v in fit.curve],
            "se": [float(v) for v in curve_se],
        }
        z_store = [[float(v) for v in row] for row in dataset.z]

    return FitReport(
        estimator=estimator,
        level=float(level),
        coefficients=table,
        vcov=[[float(v) for v in row] for row in V],
        bandwidth=bw,
        kernel=kernel,
        columns={"outcome": dataset.y_name, "nonlinear": list(dataset.z_names), "linear": list(dataset.x_names)},
        curve=curve,
        sample={
            "z": z_store,
            "partial_residual": [float(v) for v in partial],
            "residuals": [float(v) for v in fit.residuals],
        },
        weights=weights_info,
        evidence=None if evidence is None else evidence_to_dict(evidence),
        provenance=dict(provenance or {}),
        warnings=notes,
    )


def curve_on_grid(report: FitReport, m: int) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Evaluate the fitted curve on ``m`` equally spaced points spanning the observed Z.

    Returns:
        ``(grid, m_hat, se)``.
    """
    if int(m) != m or m < 2:
        raise ValidationError(f"grid size must be an integer >= 2, got {m}")
    z = np.asarray(report.sample["z"], dtype=np.float64)
    if z.ndim != 1:
        raise ValidationError("curve grids are only available for a scalar nonlinear covariate")
    partial = np.asarray(report.sample["partial_residual"], dtype=np.float64)
    resid = np.asarray(report.sample["residuals"], dtype=np.float64)
    grid = np.linspace(z.min(), z.max(), int(m))
    S_g = build_smoother(z, report.bandwidth, eval_points=grid, kernel=report.kernel)
    return grid, S_g.entries @ partial, np.sqrt(curve_variance(S_g, resid))
