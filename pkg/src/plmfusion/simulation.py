"""Monte Carlo harness for the Case I / Case II simulation designs.

Data model (both cases)::

    Z, X3 ~ U(0, 1);  X1 ~ N(Z, 1);  X2 ~ Bernoulli(e^Z / (1 + e^Z))
    O ~ Bernoulli(e^Z / (2 + e^Z));  eps ~ N(0, 1)
    Y = sin(5 Z) + X1 + X2 + X3 + O + eps

The internal PLM uses X = (X1, X2, X3, O) and Z; the external working
model regresses Y on (Z, X1, X2, X3). Case I treats the external
coefficients as known (computed once from a very large draw); Case II
estimates them from an external sample of size N.

Every replicate draws from its own ``SeedSequence(seed, spawn_key=(run, k))``
stream, so results do not depend on how runs are spread over workers.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy import integrate, stats

from plmfusion.bandwidth import cv_scores
from plmfusion.errors import PlmFusionError, ValidationError
from plmfusion.evidence import (
    SummaryEvidence,
    WorkingModel,
    solve_internal_theta,
    weights_ib1,
    weights_ib2,
)
from plmfusion.inference import curve_variance, external_fraction, sandwich_components, variance_beta
from plmfusion.plm import Dataset, fit_pls, fit_weighted_pls, profile
from plmfusion.smoother import DEFAULT_RATE, bandwidth_from_rate, build_smoother

__all__ = [
    "BETA_TRUE",
    "COEF_NAMES",
    "SimConfig",
    "SimMetrics",
    "RunRecord",
    "SimResult",
    "SimulationAborted",
    "generate_case",
    "true_curve",
    "curve_variance_of_truth",
    "working_model_for",
    "true_theta_oracle",
    "run_monte_carlo",
    "aggregate",
    "write_run_log",
    "write_curve_log",
    "read_logs",
    "write_metrics_csv",
]

BETA_TRUE = np.ones(4)
COEF_NAMES = ("x1", "x2", "x3", "o")
EXTERNAL_COVARIATES = ("z", "x1", "x2", "x3")
CASES = ("I", "II")
DEFAULT_CURVE_S_GRID = tuple(float(s) for s in np.geomspace(0.1, 2.5, 25))
MAX_FAILURE_RATE = 0.02

_INTERNAL, _EXTERNAL, _FIXED_EXTERNAL, _ORACLE = 0, 1, 2, 3


class SimulationAborted(PlmFusionError):
    """Too many replicates failed."""


def true_curve(z: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sin(5.0 * np.asarray(z, dtype=np.float64))


@lru_cache(maxsize=None)
def curve_variance_of_truth() -> float:
    """``Var{m0(Z)}`` for ``Z ~ U(0, 1)``, by quadrature."""
    first, _ = integrate.quad(lambda u: float(true_curve(u)), 0.0, 1.0)
    second, _ = integrate.quad(lambda u: float(true_curve(u)) ** 2, 0.0, 1.0)
    return second - first**2


def generate_case(case: str, n: int, rng: np.random.Generator) -> Dataset:
    """Draw one Case I / Case II dataset of size ``n``.

    Both cases share the same generating model; they differ only in how
    the external summary is obtained.
    """
    if case not in CASES:
        raise ValidationError(f"unknown case {case!r}; expected one of {CASES}")
    if n < 1:
        raise ValidationError(f"n must be positive, got {n}")
    z = rng.uniform(size=n)
    x3 = rng.uniform(size=n)
    x1 = rng.normal(loc=z, scale=1.0)
    ez = np.exp(z)
    x2 = (rng.uniform(size=n) < ez / (1.0 + ez)).astype(np.float64)
    o = (rng.uniform(size=n) < ez / (2.0 + ez)).astype(np.float64)
    eps = rng.normal(size=n)
    x = np.column_stack([x1, x2, x3, o])
    y = true_curve(z) + x @ BETA_TRUE + eps
    return Dataset(y=y, x=x, z=z, x_names=COEF_NAMES, z_names=("z",))


def working_model_for(case: str, intercept: bool = True) -> WorkingModel:
    if case not in CASES:
        raise ValidationError(f"unknown case {case!r}")
    return WorkingModel("linear_intercept" if intercept else "linear", EXTERNAL_COVARIATES)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def true_theta_oracle(
    case: str = "I",
    n_big: int = 1_000_000,
    seed: int = 0,
    intercept: bool = True,
    generator=None,
) -> SummaryEvidence:
    """Population value of the external working-model coefficients.

    Computed by OLS on a single draw of size ``n_big``. ``generator`` may
    replace :func:`generate_case` (signature ``(n, rng) -> Dataset``).
    """
    if n_big < 100_000:
        raise ValidationError(f"n_big must be at least 1e5, got {n_big}")
    return _oracle_cached(case, int(n_big), int(seed), bool(intercept), generator)


@lru_cache(maxsize=16)
def _oracle_cached(case, n_big, seed, intercept, generator):
    rng = _stream(seed, 0, _ORACLE)
    data = generator(n_big, rng) if generator is not None else generate_case(case, n_big, rng)
    model = working_model_for(case, intercept)
    theta, _ = solve_internal_theta(data, model)
    return SummaryEvidence(theta=theta, model=model, is_truth=True)


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo configuration.

    ``n_external=None`` means the external summary is the population truth
    (Case I). ``s`` is the bandwidth scale used for beta; ``"auto"`` picks
    it per replicate by difference-based CV. The fitted curve is evaluated
    with a separately GCV-selected bandwidth unless ``curve_bandwidth`` is
    ``"fit"``.
    """

    case: str = "I"
    n_internal: int = 200
    n_external: int | None = None
    runs: int = 1000
    seed: int = 0
    s: float | str = 1.0
    a: float = DEFAULT_RATE
    refresh_external_per_run: bool = True
    intercept_in_external: bool = True
    curve_bandwidth: str = "gcv"
    curve_s_grid: tuple[float, ...] = DEFAULT_CURVE_S_GRID
    n_oracle: int = 1_000_000
    level: float = 0.95

    def __post_init__(self):
        if self.case not in CASES:
            raise ValidationError(f"case must be one of {CASES}, got {self.case!r}")
        if self.runs < 1:
            raise ValidationError("runs must be >= 1")
        if self.n_internal < 30:
            raise ValidationError("n_internal must be >= 30")
        if self.case == "I" and self.n_external is not None:
            raise ValidationError("Case I uses the true summary; n_external must be 'truth'")
        if self.case == "II" and (self.n_external is None or self.n_external < 30):
            raise ValidationError("Case II needs an integer n_external >= 30")
        if self.curve_bandwidth not in ("gcv", "fit"):
            raise ValidationError(f"curve_bandwidth must be 'gcv' or 'fit', got {self.curve_bandwidth!r}")
        if isinstance(self.s, str) and self.s != "auto":
            raise ValidationError(f"s must be a positive number or 'auto', got {self.s!r}")

    @property
    def truth(self) -> bool:
        return self.n_external is None

    @property
    def estimators(self) -> tuple[str, ...]:
        return ("pls", "ib1") if self.truth else ("pls", "ib1", "ib2")


@dataclass
class RunRecord:
    """Everything a single replicate contributes to the aggregate."""

    run: int
    beta: dict[str, NDArray[np.float64]]
    ase: dict[str, NDArray[np.float64]]
    covered: dict[str, NDArray[np.bool_]]
    z: NDArray[np.float64] | None = None
    m_hat: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    fitted: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    pointwise_var: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    m_true: NDArray[np.float64] | None = None
    mean_true: NDArray[np.float64] | None = None


@dataclass
class SimMetrics:
    """Aggregated metrics for one estimator.

    Coefficient-level arrays follow ``coefficients``. ``mcsd`` is NaN (and
    ``mcsd_defined`` False) when only one replicate is available.
    """

    estimator: str
    coefficients: tuple[str, ...]
    bias: NDArray[np.float64]
    mcsd: NDArray[np.float64]
    ase: NDArray[np.float64]
    cp: NDArray[np.float64]
    re: NDArray[np.float64]
    mse_m: float
    are: float
    amcv: float
    av: float
    aore: float
    n: int
    n_external: int | None
    s: float | str
    runs: int
    failures: int = 0
    mcsd_defined: bool = True


@dataclass
class SimResult:
    config: SimConfig
    metrics: dict[str, SimMetrics]
    records: list[RunRecord]
    failures: list[tuple[int, str]]


def _gcv_select(data, partial, cfg):
    best_score, best_S = math.inf, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for s in cfg.curve_s_grid:
            try:
                S = build_smoother(data.z, bandwidth_from_rate(s, cfg.a, data.n, data.d))
            except PlmFusionError:
                continue
            dof = 1.0 - np.trace(S.entries) / data.n
            if dof <= 1e-8:
                continue
            r = partial - S.entries @ partial
            score = float(np.mean(r * r)) / dof**2
            if score < best_score:
                best_score, best_S = score, S
    if best_S is None:
        raise PlmFusionError("GCV found no usable curve bandwidth")
    return best_S


def _simulate_run(cfg: SimConfig, run: int, oracle: SummaryEvidence | None, fixed_ext: SummaryEvidence | None) -> RunRecord:
    data = generate_case(cfg.case, cfg.n_internal, _stream(cfg.seed, run, _INTERNAL))
    model = working_model_for(cfg.case, cfg.intercept_in_external)
    if cfg.truth:
        evidence = oracle
    elif fixed_ext is not None:
        evidence = fixed_ext
    else:
        evidence = _external_evidence(cfg, _stream(cfg.seed, run, _EXTERNAL))

    if cfg.s == "auto":
        s = cv_scores(data, "dbe-cv", a=cfg.a).best.s
    else:
        s = float(cfg.s)
    bw = bandwidth_from_rate(s, cfg.a, data.n, data.d)
    S = build_smoother(data.z, bw)
    prof = profile(data, S)
    rho = external_fraction(data.n, evidence.n_external, evidence.is_truth)

    fits = {"pls": (fit_pls(data, S, prof), evidence.theta)}
    w1 = weights_ib1(data, evidence)
    fits["ib1"] = (fit_weighted_pls(data, S, w1, "ib1", prof), w1.theta_used)
    if not cfg.truth:
        w2 = weights_ib2(data, evidence)
        fits["ib2"] = (fit_weighted_pls(data, S, w2, "ib2", prof), w2.theta_used)

    crit = stats.norm.ppf(0.5 + cfg.level / 2.0)
    rec = RunRecord(run=run, beta={}, ase={}, covered={})
    for est, (fit, theta_used) in fits.items():
        comp = sandwich_components(data, prof, fit, model, theta_used, rho)
        se = np.sqrt(np.diag(variance_beta(comp, est, data.n)))
        rec.beta[est] = fit.beta
        rec.ase[est] = se
        rec.covered[est] = np.abs(fit.beta - BETA_TRUE) <= crit * se

    if cfg.curve_bandwidth == "gcv":
        S_curve = _gcv_select(data, data.y - data.x @ fits["pls"][0].beta, cfg)
    else:
        S_curve = S
    rec.z = data.z[:, 0].copy()
    rec.m_true = true_curve(rec.z)
    rec.mean_true = rec.m_true + data.x @ BETA_TRUE
    for est, (fit, _) in fits.items():
        partial = data.y - data.x @ fit.beta
        m_hat = S_curve.entries @ partial
        rec.m_hat[est] = m_hat
        rec.fitted[est] = m_hat + data.x @ fit.beta
        rec.pointwise_var[est] = curve_variance(S_curve, partial - m_hat)
    return rec


def _external_evidence(cfg, rng):
    ext = generate_case(cfg.case, cfg.n_external, rng)
    model = working_model_for(cfg.case, cfg.intercept_in_external)
    theta, V = solve_internal_theta(ext, model)
    return SummaryEvidence(theta=theta, model=model, vcov=V, n_external=cfg.n_external)


def _run_chunk(args):
    cfg, runs, oracle, fixed_ext = args
    out = []
    for run in runs:
        try:
            out.append(_simulate_run(cfg, run, oracle, fixed_ext))
        except (PlmFusionError, np.linalg.LinAlgError) as exc:
            out.append((run, f"{type(exc).__name__}: {exc}"))
    return out


def run_monte_carlo(config: SimConfig, workers: int = 1) -> SimResult:
    """Run all replicates and aggregate them.

    Args:
        config: Simulation configuration.
        workers: Process count; results are identical for any value.

    Raises:
        SimulationAborted: when more than 2% of replicates fail.
    """
    cfg = config
    oracle = None
    fixed_ext = None
    if cfg.truth:
        oracle = true_theta_oracle(cfg.case, cfg.n_oracle, cfg.seed, cfg.intercept_in_external)
    elif not cfg.refresh_external_per_run:
        fixed_ext = _external_evidence(cfg, _stream(cfg.seed, 0, _FIXED_EXTERNAL))

    runs = list(range(cfg.runs))
    if workers <= 1:
        outcomes = _run_chunk((cfg, runs, oracle, fixed_ext))
    else:
        size = max(1, math.ceil(len(runs) / (workers * 4)))
        chunks = [(cfg, runs[i : i + size], oracle, fixed_ext) for i in range(0, len(runs), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = [o for part in pool.map(_run_chunk, chunks) for o in part]

    records = [o for o in outcomes if isinstance(o, RunRecord)]
    failures = [o for o in outcomes if not isinstance(o, RunRecord)]
    if len(failures) > MAX_FAILURE_RATE * cfg.runs:
        detail = "; ".join(f"run {r}: {msg}" for r, msg in failures[:5])
        raise SimulationAborted(
            f"{len(failures)} of {cfg.runs} replicates failed (limit {MAX_FAILURE_RATE:.0%}): {detail}"
        )
    if not records:
        raise SimulationAborted("no replicate succeeded")
    metrics = aggregate(records, cfg, n_failures=len(failures))
    return SimResult(config=cfg, metrics=metrics, records=records, failures=failures)


def aggregate(records: list[RunRecord], cfg: SimConfig, n_failures: int = 0) -> dict[str, SimMetrics]:
    """Reduce per-run records to per-estimator metrics.

    Curve metrics are averaged over the internal sample points: AMCV is the
    across-run variance of ``m_hat(Z_i)`` for each index ``i``, averaged over
    ``i``; since Z is redrawn every run its random-design counterpart AV is
    ``Var{m0(Z)}`` plus the mean plug-in variance ``diag(S C S')``.
    """
    records = sorted(records, key=lambda r: r.run)
    R = len(records)
    has_curve = records[0].m_true is not None

    def stack(attr, est):
        return np.array([getattr(r, attr)[est] for r in records])

    out = {}
    mse_pls = np.mean((stack("beta", "pls") - BETA_TRUE) ** 2, axis=0)
    if has_curve:
        m_true = np.array([r.m_true for r in records])
        mean_true = np.array([r.mean_true for r in records])
        curve_mse_pls = float(np.mean((stack("m_hat", "pls") - m_true) ** 2))
        fit_mse_pls = float(np.mean((stack("fitted", "pls") - mean_true) ** 2))
    for est in cfg.estimators:
        B = stack("beta", est)
        err = B - BETA_TRUE
        mse = np.mean(err**2, axis=0)
        mcsd = np.std(B, axis=0, ddof=1) if R > 1 else np.full(B.shape[1], np.nan)
        if has_curve:
            M = stack("m_hat", est)
            curve_mse = float(np.mean((M - m_true) ** 2))
            fit_mse = float(np.mean((stack("fitted", est) - mean_true) ** 2))
            amcv = float(np.mean(np.var(M, axis=0, ddof=1))) if R > 1 else math.nan
            av = curve_variance_of_truth() + float(np.mean(stack("pointwise_var", est)))
            are, aore = curve_mse_pls / curve_mse, fit_mse_pls / fit_mse
        else:
            curve_mse = are = amcv = av = aore = math.nan
        out[est] = SimMetrics(
            estimator=est,
            coefficients=COEF_NAMES,
            bias=err.mean(axis=0),
            mcsd=mcsd,
            ase=stack("ase", est).mean(axis=0),
            cp=stack("covered", est).mean(axis=0),
            re=mse_pls / mse,
            mse_m=curve_mse,
            are=are,
            amcv=amcv,
            av=av,
            aore=aore,
            n=cfg.n_internal,
            n_external=cfg.n_external,
            s=cfg.s,
            runs=R,
            failures=n_failures,
            mcsd_defined=R > 1,
        )
    return out


# --- persistence -----------------------------------------------------------

RUN_LOG_FIELDS = ("run", "estimator", "coefficient", "estimate", "ase", "covered")
CURVE_LOG_FIELDS = ("run", "estimator", "index", "z", "m_hat", "fitted", "pointwise_var", "m_true", "mean_true")
METRIC_FIELDS = (
    "case", "n", "n_external", "s", "runs", "failures", "estimator", "coefficient",
    "bias", "mcsd", "ase", "cp", "re", "mse_m", "are", "amcv", "av", "aore",
)


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _writer(fh, fields):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(fields)
    return w


def write_run_log(path: str | os.PathLike, result: SimResult) -> None:
    """Per-run coefficient log: one row per (run, estimator, coefficient)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, RUN_LOG_FIELDS)
        for rec in result.records:
            for est in result.config.estimators:
                for j, name in enumerate(COEF_NAMES):
                    w.writerow([rec.run, est, name, _num(rec.beta[est][j]), _num(rec.ase[est][j]), _num(rec.covered[est][j])])


def write_curve_log(path: str | os.PathLike, result: SimResult) -> None:
    """Per-run curve log: one row per (run, estimator, sample point)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, CURVE_LOG_FIELDS)
        for rec in result.records:
            for est in result.config.estimators:
                for i in range(rec.z.size):
                    w.writerow([
                        rec.run, est, i, _num(rec.z[i]), _num(rec.m_hat[est][i]), _num(rec.fitted[est][i]),
                        _num(rec.pointwise_var[est][i]), _num(rec.m_true[i]), _num(rec.mean_true[i]),
                    ])


def read_logs(run_log: str | os.PathLike, curve_log: str | os.PathLike | None = None) -> list[RunRecord]:
    """Rebuild run records from persisted logs (curve fields only if given)."""
    recs: dict[int, RunRecord] = {}
    with open(run_log, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    tmp: dict[tuple[int, str], dict[str, tuple]] = {}
    for row in rows:
        key = (int(row["run"]), row["estimator"])
        tmp.setdefault(key, {})[row["coefficient"]] = (
            float(row["estimate"]), float(row["ase"]), row["covered"] == "1"
        )
    for (run, est), coefs in tmp.items():
        rec = recs.setdefault(run, RunRecord(run=run, beta={}, ase={}, covered={}))
        vals = [coefs[c] for c in COEF_NAMES]
        rec.beta[est] = np.array([v[0] for v in vals])
        rec.ase[est] = np.array([v[1] for v in vals])
        rec.covered[est] = np.array([v[2] for v in vals])
    if curve_log is not None:
        cols: dict[tuple[int, str], list] = {}
        with open(curve_log, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                cols.setdefault((int(row["run"]), row["estimator"]), []).append(row)
        for (run, est), rows in cols.items():
            rows.sort(key=lambda r: int(r["index"]))
            rec = recs[run]
            arr = {k: np.array([float(r[k]) for r in rows]) for k in CURVE_LOG_FIELDS[3:]}
            rec.z, rec.m_true, rec.mean_true = arr["z"], arr["m_true"], arr["mean_true"]
            rec.m_hat[est], rec.fitted[est], rec.pointwise_var[est] = arr["m_hat"], arr["fitted"], arr["pointwise_var"]
    return [recs[k] for k in sorted(recs)]


def write_metrics_csv(path: str | os.PathLike, result: SimResult) -> None:
    """Aggregate table: one row per (estimator, coefficient) plus one curve row per estimator."""
    cfg = result.config
    head = [cfg.case, cfg.n_internal, "truth" if cfg.truth else cfg.n_external, cfg.s, None, None]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh, METRIC_FIELDS)
        for est, m in result.metrics.items():
            lead = [*head[:4], m.runs, m.failures, est]
            for j, name in enumerate(m.coefficients):
                w.writerow([*map(str, lead), name, *(_num(v[j]) for v in (m.bias, m.mcsd, m.ase, m.cp, m.re)),
                            "", "", "", "", ""])
            w.writerow([*map(str, lead), "curve", "", "", "", "", "",
                        *(_num(v) for v in (m.mse_m, m.are, m.amcv, m.av, m.aore))])
