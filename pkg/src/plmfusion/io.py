"""Reading and writing datasets, summary evidence and fit reports.

CSV files are UTF-8 with a header row and LF line endings; numbers are
written with ``repr`` so every float survives a write/read cycle bit for
bit. Columns are always selected by name.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from plmfusion.errors import ValidationError
from plmfusion.evidence import MODEL_KINDS, SummaryEvidence, WorkingModel
from plmfusion.inference import WaldRow
from plmfusion.plm import Dataset
from plmfusion.smoother import Bandwidth

__all__ = [
    "MISSING_TOKENS",
    "MIN_ROWS_WARNING",
    "read_dataset",
    "write_dataset",
    "read_evidence",
    "write_evidence",
    "evidence_to_dict",
    "FitReport",
    "write_curve_csv",
]

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})
MIN_ROWS_WARNING = 30


def _fmt(x: float) -> str:
    return repr(float(x))


def read_dataset(
    path: str | os.PathLike,
    outcome: str,
    nonlinear: Sequence[str],
    working_covariates: Sequence[str] = (),
    linear: Sequence[str] | None = None,
) -> Dataset:
    """Load a CSV file into a :class:`Dataset`.

    Args:
        path: CSV file with a header row.
        outcome: Name of the response column.
        nonlinear: Names of the columns entering ``m(Z)``.
        working_covariates: Columns the external working model refers to.
            Any that are not already linear or nonlinear covariates are kept
            as extra columns.
        linear: Linear covariates. Defaults to every remaining column.

    Raises:
        ValidationError: on a missing column, a missing or non-numeric cell
            (the message lists the 1-based data row numbers) or an empty file.
    """
    nonlinear = [nonlinear] if isinstance(nonlinear, str) else list(nonlinear)
    working_covariates = list(working_covariates)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: file is empty") from None
        rows = list(reader)
    if len(set(header)) != len(header):
        raise ValidationError(f"{path}: duplicate column names in header")
    if not nonlinear:
        raise ValidationError("at least one nonlinear column is required")
    if linear is None:
        linear = [h for h in header if h != outcome and h not in nonlinear]
    linear = list(linear)
    wanted = [outcome, *nonlinear, *linear, *working_covariates]
    missing_cols = [c for c in dict.fromkeys(wanted) if c not in header]
    if missing_cols:
        raise ValidationError(f"{path}: missing column(s) {missing_cols}; header is {header}")
    overlap = set(linear) & set(nonlinear) | ({outcome} & set(linear + nonlinear))
    if overlap:
        raise ValidationError(f"column(s) {sorted(overlap)} assigned to more than one role")
    extra_names = [c for c in dict.fromkeys(working_covariates) if c not in linear and c not in nonlinear]

    used = [outcome, *nonlinear, *linear, *extra_names]
    idx = [header.index(c) for c in used]
    values = np.empty((len(rows), len(used)))
    missing_rows, bad_cells = [], []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ValidationError(f"{path}: data row {r} has {len(row)} cells, header has {len(header)}")
        for k, j in enumerate(idx):
            cell = row[j].strip()
            if cell.lower() in MISSING_TOKENS:
                missing_rows.append(r)
                break
            try:
                values[r - 1, k] = float(cell)
            except ValueError:
                bad_cells.append((r, header[j], cell))
                break
            if not math.isfinite(values[r - 1, k]):
                missing_rows.append(r)
                break
    if missing_rows:
        raise ValidationError(f"{path}: missing values in data row(s) {sorted(set(missing_rows))}")
    if bad_cells:
        desc = ", ".join(f"row {r} column {c!r} ({v!r})" for r, c, v in bad_cells[:10])
        raise ValidationError(f"{path}: non-numeric cell(s): {desc}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    if len(rows) < MIN_ROWS_WARNING:
        warnings.warn(f"{path}: only {len(rows)} complete rows", RuntimeWarning, stacklevel=2)

    k1, k2 = 1 + len(nonlinear), 1 + len(nonlinear) + len(linear)
    return Dataset(
        y=values[:, 0],
        z=values[:, 1:k1],
        x=values[:, k1:k2],
        x_names=tuple(linear),
        z_names=tuple(nonlinear),
        y_name=outcome,
        extra={name: values[:, k2 + i] for i, name in enumerate(extra_names)},
    )


def write_dataset(path: str | os.PathLike, dataset: Dataset) -> None:
    """Write ``dataset`` as CSV: outcome, nonlinear, linear, then extra columns."""
    names = [dataset.y_name, *dataset.z_names, *dataset.x_names, *dataset.extra]
    cols = np.column_stack([dataset.y, dataset.z, dataset.x, *dataset.extra.values()])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in cols:
            w.writerow([_fmt(v) for v in row])


def _number_list(value, key, path):
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise ValidationError(f"{path}: {key!r} must be an array of numbers")
    return [float(v) for v in value]


def evidence_from_dict(data: dict, source: str = "<evidence>") -> SummaryEvidence:
    """Validate a decoded evidence JSON object and build :class:`SummaryEvidence`."""
    if not isinstance(data, dict):
        raise ValidationError(f"{source}: top level must be a JSON object")
    allowed = {"working_model", "covariates", "theta", "vcov", "n_external", "is_truth"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValidationError(f"{source}: unknown key(s) {unknown}")
    for key in ("working_model", "theta"):
        if key not in data:
            raise ValidationError(f"{source}: missing required field {key!r}")
    kind = data["working_model"]
    if kind not in MODEL_KINDS:
        raise ValidationError(f"{source}: 'working_model' must be one of {list(MODEL_KINDS)}, got {kind!r}")
    covariates = data.get("covariates", [])
    if not isinstance(covariates, list) or not all(isinstance(c, str) for c in covariates):
        raise ValidationError(f"{source}: 'covariates' must be an array of column names")
    if kind == "linear" and not covariates:
        raise ValidationError(f"{source}: 'covariates' is required for working_model {kind!r}")
    model = WorkingModel(kind, tuple(covariates))
    theta = _number_list(data["theta"], "theta", source)
    if len(theta) != model.q:
        raise ValidationError(
            f"{source}: 'theta' has {len(theta)} entries but {len(covariates)} covariate(s) "
            f"under {kind!r} imply {model.q}"
        )
    vcov = data.get("vcov")
    if vcov is not None:
        if not isinstance(vcov, list) or not all(isinstance(r, list) for r in vcov):
            raise ValidationError(f"{source}: 'vcov' must be an array of arrays")
        rows = [_number_list(r, "vcov", source) for r in vcov]
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise ValidationError(f"{source}: 'vcov' rows have unequal lengths {sorted(widths)}")
        shape = (len(rows), widths.pop() if widths else 0)
        if shape[0] != shape[1]:
            raise ValidationError(f"{source}: 'vcov' must be square, got shape {shape}")
        if shape[0] != model.q:
            raise ValidationError(f"{source}: 'vcov' is {shape[0]}x{shape[1]}, expected {model.q}x{model.q}")
        vcov = np.array(rows)
    n_ext = data.get("n_external")
    if n_ext is not None and (isinstance(n_ext, bool) or not isinstance(n_ext, int) or n_ext < 1):
        raise ValidationError(f"{source}: 'n_external' must be a positive integer")
    is_truth = data.get("is_truth", False)
    if not isinstance(is_truth, bool):
        raise ValidationError(f"{source}: 'is_truth' must be true or false")
    if is_truth:
        vcov = None
    return SummaryEvidence(theta=np.array(theta), model=model, vcov=vcov, n_external=n_ext, is_truth=is_truth)


def read_evidence(path: str | os.PathLike) -> SummaryEvidence:
    """Parse a summary-evidence JSON file.

    Schema: ``working_model`` (``"linear"``, ``"linear_intercept"`` or
    ``"mean"``), ``covariates`` (ordered column names), ``theta``,
    optional ``vcov``, optional ``n_external`` and ``is_truth``
    (default false). A non-PSD ``vcov`` is repaired and the repair listed
    in ``SummaryEvidence.repairs``.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return evidence_from_dict(data, str(path))


def evidence_to_dict(ev: SummaryEvidence) -> dict:
    out: dict[str, Any] = {
        "working_model": ev.model.kind,
        "covariates": list(ev.model.covariates),
        "theta": [float(v) for v in ev.theta],
    }
    if ev.vcov is not None and not ev.is_truth:
        out["vcov"] = [[float(v) for v in row] for row in ev.vcov]
    if ev.n_external is not None:
        out["n_external"] = int(ev.n_external)
    out["is_truth"] = bool(ev.is_truth)
    return out


def write_evidence(path: str | os.PathLike, ev: SummaryEvidence) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(evidence_to_dict(ev), fh, indent=2)
        fh.write("\n")


def _floats(values) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)]


@dataclass
class FitReport:
    """Everything a fit produces, in a JSON-serialisable form.

    ``sample`` keeps the nonlinear covariate, the partial residual
    ``Y - X beta_hat`` and the fitted residuals so the curve can be
    re-evaluated on any grid without the original data file.
    """

    estimator: str
    level: float
    coefficients: list[WaldRow]
    vcov: list[list[float]]
    bandwidth: Bandwidth
    kernel: str
    columns: dict[str, Any]
    curve: dict[str, list[float]]
    sample: dict[str, list]
    weights: dict[str, Any] | None = None
    evidence: dict[str, Any] | None = None
    provenance: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "level": float(self.level),
            "coefficients": [r.to_dict() for r in self.coefficients],
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "bandwidth": self.bandwidth.to_dict(),
            "kernel": self.kernel,
            "columns": self.columns,
            "curve": self.curve,
            "sample": self.sample,
            "weights": self.weights,
            "evidence": self.evidence,
            "provenance": self.provenance,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitReport":
        try:
            return cls(
                estimator=data["estimator"],
                level=float(data["level"]),
                coefficients=[WaldRow(**row) for row in data["coefficients"]],
                vcov=[[float(v) for v in row] for row in data["vcov"]],
                bandwidth=Bandwidth.from_dict(data["bandwidth"]),
                kernel=data["kernel"],
                columns=data["columns"],
                curve=data["curve"],
                sample=data["sample"],
                weights=data.get("weights"),
                evidence=data.get("evidence"),
                provenance=data.get("provenance", {}),
                warnings=list(data.get("warnings", [])),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed fit report: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid fit report JSON ({exc})") from None
        return cls.from_dict(data)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def read(cls, path: str | os.PathLike) -> "FitReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    @property
    def beta(self) -> np.ndarray:
        return np.array([r.estimate for r in self.coefficients])


def write_curve_csv(path: str | os.PathLike, z, values, se) -> None:
    """Plot-ready curve table with columns ``z, m_hat, se``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z", "m_hat", "se"])
        for row in zip(_floats(z), _floats(values), _floats(se)):
            w.writerow([_fmt(v) for v in row])
