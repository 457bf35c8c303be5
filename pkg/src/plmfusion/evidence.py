"""External summary statistics: working scores, EL weights and meta-combination.

The external study is summarised by an estimate ``theta`` of a (possibly
misspecified) working model with estimating function ``H(Y, Xt; theta)``.
Empirical-likelihood weights ``p_i`` re-weight the internal sample so that
``sum_i p_i H_i(theta) = 0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from plmfusion.errors import (
    ConvergenceError,
    InfeasibleConstraintError,
    RankDeficiencyError,
    SingularDesignError,
    ValidationError,
)
from plmfusion.plm import Dataset

__all__ = [
    "WorkingModel",
    "SummaryEvidence",
    "Weights",
    "repair_vcov",
    "working_score",
    "score_jacobian",
    "solve_internal_theta",
    "meta_combine",
    "solve_el_weights",
    "weights_ib1",
    "weights_ib2",
    "meta_theta",
    "solve_el_joint",
]

MODEL_KINDS = ("linear", "linear_intercept", "mean")


@dataclass(frozen=True)
class WorkingModel:
    """External working model.

    ``kind`` is one of ``"linear"`` (no intercept), ``"linear_intercept"``
    or ``"mean"``; ``covariates`` names the dataset columns forming the
    working design (ignored for the mean model).
    """

    kind: str = "linear"
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown working model kind {self.kind!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.kind == "linear" and not self.covariates:
            raise ValidationError("linear working model needs at least one covariate")

    @property
    def q(self) -> int:
        if self.kind == "mean":
            return 1
        return len(self.covariates) + (self.kind == "linear_intercept")

    @property
    def parameter_names(self) -> tuple[str, ...]:
        if self.kind == "mean":
            return ("mean",)
        lead = ("(intercept)",) if self.kind == "linear_intercept" else ()
        return lead + self.covariates

    def design(self, dataset: Dataset) -> NDArray[np.float64] | None:
        """Working design matrix, or ``None`` for the mean-only model."""
        if self.kind == "mean":
            return None
        cols = dataset.columns(self.covariates)
        if self.kind == "linear_intercept":
            cols = np.column_stack([np.ones(dataset.n), cols])
        return cols


def repair_vcov(V: ArrayLike, name: str = "vcov") -> tuple[NDArray[np.float64], list[str]]:
    """Symmetrise and floor the eigenvalues of a covariance matrix.

    Eigenvalues below ``1e-10 * max_eigenvalue`` are raised to that floor.
    Every change is reported through :mod:`warnings` and the returned notes.
    """
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {V.shape}")
    if not np.all(np.isfinite(V)):
        raise ValidationError(f"{name} contains non-finite entries")
    notes = []
    Vs = 0.5 * (V + V.T)
    if not np.allclose(Vs, V, rtol=1e-12, atol=0.0):
        notes.append(f"{name}: asymmetric input symmetrised")
    evals, evecs = np.linalg.eigh(Vs)
    top = evals.max()
    if top <= 0:
        raise ValidationError(f"{name} has no positive eigenvalue")
    floor = 1e-10 * top
    if evals.min() < floor:
        notes.append(f"{name}: eigenvalue {evals.min():.3g} floored to {floor:.3g}")
        evals = np.maximum(evals, floor)
        Vs = (evecs * evals) @ evecs.T
        Vs = 0.5 * (Vs + Vs.T)
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return Vs, notes


@dataclass
class SummaryEvidence:
    """Summary statistics handed over by an external study.

    When ``is_truth`` is set, ``theta`` is treated as the population value
    and ``vcov`` is ignored. ``repairs`` records any PD-repair applied to
    ``vcov`` on construction.
    """

    theta: NDArray[np.float64]
    model: WorkingModel
    vcov: NDArray[np.float64] | None = None
    n_external: int | None = None
    is_truth: bool = False
    repairs: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64)).reshape(-1)
        if self.theta.shape[0] != self.model.q:
            raise ValidationError(
                f"theta has length {self.theta.shape[0]}, working model expects {self.model.q}"
            )
        if self.vcov is not None:
            V = np.atleast_2d(np.asarray(self.vcov, dtype=np.float64))
            if V.shape != (self.model.q, self.model.q):
                raise ValidationError(
                    f"vcov has shape {V.shape}, expected {(self.model.q, self.model.q)}"
                )
            self.vcov, notes = repair_vcov(V)
            self.repairs = [*self.repairs, *notes]
        if self.n_external is not None:
            if int(self.n_external) != self.n_external or self.n_external < 1:
                raise ValidationError(f"n_external must be a positive integer, got {self.n_external}")
            self.n_external = int(self.n_external)


@dataclass
class Weights:
    """Empirical-likelihood weights with their dual multiplier."""

    p: NDArray[np.float64]
    lam: NDArray[np.float64]
    theta_used: NDArray[np.float64] | None
    converged: bool
    iterations: int

    def log_ratio(self) -> float:
        """``sum log(n p_i)``; zero for uniform weights, negative otherwise."""
        return float(np.sum(np.log(self.p.size * self.p)))


def working_score(model: WorkingModel, dataset: Dataset, theta: ArrayLike) -> NDArray[np.float64]:
    """Rows ``H(Y_i, Xt_i; theta)``, shape ``(n, q)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64)).reshape(-1)
    if theta.shape[0] != model.q:
        raise ValidationError(f"theta has length {theta.shape[0]}, model expects {model.q}")
    W = model.design(dataset)
    if W is None:
        return (dataset.y - theta[0])[:, None]
    return W * (dataset.y - W @ theta)[:, None]


def score_jacobian(model: WorkingModel, dataset: Dataset) -> NDArray[np.float64]:
    """Average derivative ``(1/n) sum dH_i/dtheta`` (free of theta for these models)."""
    W = model.design(dataset)
    if W is None:
        return -np.ones((1, 1))
    return -(W.T @ W) / dataset.n


def solve_internal_theta(dataset: Dataset, model: WorkingModel) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Internal solution of ``sum_i H_i(theta) = 0`` with its robust sandwich covariance.

    The covariance is ``A^{-1} B A^{-T} / n`` with ``A = -(1/n) sum dH_i``
    and ``B = (1/n) sum H_i H_i'``; no small-sample correction is applied.
    """
    n = dataset.n
    W = model.design(dataset)
    if W is None:
        theta = np.array([dataset.y.mean()])
    else:
        if np.linalg.matrix_rank(W) < W.shape[1]:
            raise RankDeficiencyError("working design is rank deficient", columns=model.parameter_names)
        theta = np.linalg.solve(W.T @ W, W.T @ dataset.y)
    H = working_score(model, dataset, theta)
    A_inv = np.linalg.inv(-score_jacobian(model, dataset))
    B = H.T @ H / n
    V = A_inv @ B @ A_inv.T / n
    return theta, 0.5 * (V + V.T)


def meta_combine(sources) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Fixed-effect (inverse-variance) combination of several estimates.

    Minimises ``sum_j (theta - theta_j)' V_j^{-1} (theta - theta_j)``.

    Args:
        sources: Sequence of ``(theta_j, V_j)`` pairs with conformable shapes.

    Returns:
        ``(theta_meta, (sum_j V_j^{-1})^{-1})``.
    """
    sources = list(sources)
    if len(sources) < 2:
        raise ValidationError("meta_combine needs at least two sources")
    q = None
    prec_sum = None
    info_sum = None
    for j, (theta, V) in enumerate(sources):
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64)).reshape(-1)
        if q is None:
            q = theta.shape[0]
            prec_sum, info_sum = np.zeros((q, q)), np.zeros(q)
        if theta.shape[0] != q:
            raise ValidationError(f"source {j} has dimension {theta.shape[0]}, expected {q}")
        V, _ = repair_vcov(V, name=f"source {j} vcov")
        if V.shape != (q, q):
            raise ValidationError(f"source {j} vcov has shape {V.shape}, expected {(q, q)}")
        P = np.linalg.inv(V)
        P = 0.5 * (P + P.T)
        prec_sum += P
        info_sum += P @ theta
    try:
        vcov = np.linalg.inv(prec_sum)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("combined precision matrix is singular") from exc
    if np.linalg.cond(prec_sum) > 1e15:
        raise SingularDesignError("combined precision matrix is numerically singular")
    vcov = 0.5 * (vcov + vcov.T)
    return np.linalg.solve(prec_sum, info_sum), vcov


def solve_el_weights(
    H: ArrayLike,
    max_iter: int = 100,
    max_halvings: int = 20,
    tol: float = 1e-10,
) -> Weights:
    """Maximise ``prod p_i`` subject to ``p_i > 0``, ``sum p_i = 1``, ``sum p_i H_i = 0``.

    Solves the dual ``sum_i H_i / (1 + lam' H_i) = 0`` by damped Newton on the
    concave function ``f(lam) = sum_i log(1 + lam' H_i)``. Steps are halved
    until every ``1 + lam' H_i`` exceeds ``1/n`` and ``f`` increases.

    Raises:
        InfeasibleConstraintError: when zero is not (numerically) inside the
            convex hull of the rows of ``H``.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 1:
        H = H[:, None]
    n, q = H.shape
    if not np.all(np.isfinite(H)):
        raise ValidationError("score matrix contains non-finite values")
    lam = np.zeros(q)
    t = np.ones(n)
    f = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = H.T @ (1.0 / t)
        if np.max(np.abs(g)) < tol:
            # the gradient also vanishes as lam runs off to infinity; a genuine
            # root additionally has implied weights summing to one
            converged = abs(np.sum(1.0 / (n * t)) - 1.0) < 1e-8
            it -= 1
            break
        Hs = H / t[:, None]
        J = Hs.T @ Hs
        try:
            step = np.linalg.solve(J, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, g, rcond=None)[0]
        accepted = False
        for _ in range(max_halvings + 1):
            lam_new = lam + step
            t_new = 1.0 + H @ lam_new
            if np.all(t_new > 1.0 / n):
                f_new = float(np.sum(np.log(t_new)))
                # near the root the ascent is below rounding noise in f
                if f_new >= f - 1e-12 * max(1.0, abs(f)):
                    accepted = True
                    break
            step = 0.5 * step
        if not accepted:
            break
        lam, t, f = lam_new, t_new, f_new
    else:
        g = H.T @ (1.0 / t)
        converged = bool(np.max(np.abs(g)) < tol) and abs(np.sum(1.0 / (n * t)) - 1.0) < 1e-8

    p_raw = 1.0 / (n * t)
    mass = p_raw.sum()
    resid = np.max(np.abs(H.T @ (p_raw / mass))) if q else 0.0
    if not converged and abs(mass - 1.0) < 1e-8 and resid < 1e-8 * max(1.0, np.max(np.abs(H))):
        # stalled at machine precision; constraint already met
        converged = True
    if not converged:
        raise InfeasibleConstraintError(
            "external evidence incompatible with internal data: "
            f"EL weights did not converge after {it} iterations (max |sum p_i H_i| = {resid:.3g})"
        )
    p = p_raw / mass
    return Weights(p=p, lam=lam, theta_used=None, converged=True, iterations=it)


def weights_ib1(dataset: Dataset, evidence: SummaryEvidence) -> Weights:
    """EL weights with the external estimate held fixed as if it were the truth."""
    H = working_score(evidence.model, dataset, evidence.theta)
    w = solve_el_weights(H)
    w.theta_used = evidence.theta.copy()
    return w


def meta_theta(dataset: Dataset, evidence: SummaryEvidence) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Inverse-variance combination of the internal and external estimates."""
    if evidence.is_truth or evidence.vcov is None:
        raise ValidationError("evidence is missing 'vcov'; ib2 requires the external covariance matrix")
    theta0, V0 = solve_internal_theta(dataset, evidence.model)
    return meta_combine([(theta0, V0), (evidence.theta, evidence.vcov)])


def weights_ib2(dataset: Dataset, evidence: SummaryEvidence) -> Weights:
    """EL weights at the meta-combined ``theta`` (internal + external)."""
    if evidence.is_truth or evidence.vcov is None:
        raise ValidationError("evidence is missing 'vcov'; ib2 requires the external covariance matrix")
    if evidence.n_external is None:
        raise ValidationError("evidence is missing 'n_external'; ib2 inference needs the external sample size")
    theta_meta, _ = meta_theta(dataset, evidence)
    H = working_score(evidence.model, dataset, theta_meta)
    w = solve_el_weights(H)
    w.theta_used = theta_meta
    return w


def _profile_loglik(model, dataset, theta, evidence, P):
    H = working_score(model, dataset, theta)
    w = solve_el_weights(H)
    diff = theta - evidence.theta
    return w.log_ratio() - 0.5 * diff @ P @ diff, w, H


def solve_el_joint(
    dataset: Dataset,
    evidence: SummaryEvidence,
    max_outer: int = 500,
    tol: float = 1e-8,
) -> tuple[NDArray[np.float64], Weights]:
    """Jointly maximise ``sum log p_i - (theta - theta_ext)' V^{-1} (theta - theta_ext) / 2``.

    Alternates an exact EL dual solve at fixed ``theta`` with one damped
    ascent step on ``theta`` at fixed ``lam`` (envelope gradient,
    Gauss-Newton preconditioner). Starts from the meta-combined estimate.
    Intended as a cross-check of the plug-in, not for production fits.

    Convergence is declared when the preconditioned gradient (the Newton
    step) has max-norm below ``tol``.
    """
    model = evidence.model
    if evidence.is_truth or evidence.vcov is None:
        raise ValidationError("evidence is missing 'vcov'; the joint solver needs it")
    P = np.linalg.inv(evidence.vcov)
    P = 0.5 * (P + P.T)
    n = dataset.n
    A = score_jacobian(model, dataset)
    W = model.design(dataset)

    theta, _ = meta_theta(dataset, evidence)
    ll, w, H = _profile_loglik(model, dataset, theta, evidence, P)
    for _ in range(max_outer):
        t = 1.0 + H @ w.lam
        # d/dtheta of -sum log(1 + lam' H_i(theta)) at fixed lam
        if W is None:
            dH_lam = -np.full((n, 1), w.lam[0])
        else:
            dH_lam = -W * (W @ w.lam)[:, None]
        grad = -(dH_lam / t[:, None]).sum(axis=0) - P @ (theta - evidence.theta)
        B = H.T @ H / n
        curv = n * A.T @ np.linalg.solve(B, A) + P
        step = np.linalg.solve(curv, grad)
        if np.max(np.abs(step)) < tol:
            w.theta_used = theta
            return theta, w
        for _ in range(30):
            try:
                ll_new, w_new, H_new = _profile_loglik(model, dataset, theta + step, evidence, P)
            except InfeasibleConstraintError:
                step = 0.5 * step
                continue
            if ll_new >= ll - 1e-14 * abs(ll):
                break
            step = 0.5 * step
        else:
            w.theta_used = theta
            return theta, w
        theta, ll, w, H = theta + step, ll_new, w_new, H_new
    raise ConvergenceError(f"joint EL solver did not converge in {max_outer} outer iterations")
