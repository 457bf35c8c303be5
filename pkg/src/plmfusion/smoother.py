"""Kernels, bandwidth rule and the local-linear smoother matrix."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from plmfusion.errors import RateOutOfRangeError, SingularDesignError, ValidationError

__all__ = [
    "Bandwidth",
    "SmootherMatrix",
    "KERNELS",
    "epanechnikov",
    "gaussian",
    "get_kernel",
    "bandwidth_from_rate",
    "fixed_bandwidth",
    "build_smoother",
]

DEFAULT_RATE = 0.2
# local normal matrices with condition number above this are treated as singular
_COND_LIMIT = 1e12
_MAX_DOUBLINGS = 5
_BLOCK_ROWS = 512


def epanechnikov(u: ArrayLike) -> NDArray[np.float64] | float:
    """Epanechnikov kernel ``0.75 * (1 - u**2)`` on ``|u| < 1``, zero elsewhere."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
    return float(out) if out.ndim == 0 else out


def gaussian(u: ArrayLike) -> NDArray[np.float64] | float:
    """Standard normal density."""
    u = np.asarray(u, dtype=np.float64)
    out = np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


KERNELS: dict[str, Callable] = {"epanechnikov": epanechnikov}
_OPTIONAL_KERNELS: dict[str, Callable] = {"gaussian": gaussian}


def get_kernel(name: str, allow_optional: bool = False) -> Callable:
    """Look up a kernel by name.

    The Gaussian kernel is only handed out when ``allow_optional`` is set,
    so the compact-support assumptions of the default path stay explicit.
    """
    if name in KERNELS:
        return KERNELS[name]
    if name in _OPTIONAL_KERNELS:
        if not allow_optional:
            raise ValidationError(
                f"kernel {name!r} is disabled by default; pass allow_optional=True"
            )
        return _OPTIONAL_KERNELS[name]
    raise ValidationError(f"unknown kernel {name!r}")


@dataclass(frozen=True)
class Bandwidth:
    """Scalar bandwidth ``b`` shared by every coordinate of Z.

    ``s`` and ``a`` are set when ``b`` came from the rate rule
    ``b = s * n**(-a)``; for a directly supplied ``b`` they are ``None``.
    """

    b: float
    n: int
    d: int = 1
    s: float | None = None
    a: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.b) or self.b <= 0:
            raise ValidationError(f"bandwidth must be positive, got {self.b}")

    def to_dict(self) -> dict:
        return {"b": self.b, "n": self.n, "d": self.d, "s": self.s, "a": self.a}

    @classmethod
    def from_dict(cls, data: dict) -> "Bandwidth":
        return cls(
            b=float(data["b"]),
            n=int(data["n"]),
            d=int(data.get("d", 1)),
            s=None if data.get("s") is None else float(data["s"]),
            a=None if data.get("a") is None else float(data["a"]),
        )


def bandwidth_from_rate(s: float, a: float = DEFAULT_RATE, n: int = 2, d: int = 1) -> Bandwidth:
    """Rate-rule bandwidth ``b = s * n**(-a)``.

    Raises:
        RateOutOfRangeError: if ``a`` is not strictly inside ``(1/8, 1/(2d))``.
        ValidationError: if ``s <= 0``, ``n < 2`` or ``d < 1``.
    """
    if d < 1:
        raise ValidationError(f"dimension d must be >= 1, got {d}")
    if n < 2:
        raise ValidationError(f"need n >= 2 for the rate rule, got n={n}")
    if not s > 0:
        raise ValidationError(f"scale s must be positive, got {s}")
    lo, hi = 1.0 / 8.0, 1.0 / (2.0 * d)
    if not lo < a < hi:
        raise RateOutOfRangeError(
            f"rate a={a} outside admissible interval ({lo:g}, {hi:g}) for d={d}"
        )
    return Bandwidth(b=float(s) * float(n) ** (-float(a)), n=int(n), d=int(d), s=float(s), a=float(a))


def fixed_bandwidth(b: float, n: int, d: int = 1) -> Bandwidth:
    return Bandwidth(b=float(b), n=int(n), d=int(d))


@dataclass(frozen=True)
class SmootherMatrix:
    """Local-linear hat matrix evaluated at ``eval_points``.

    Row ``k`` maps a length-n response onto the local-linear intercept at
    ``eval_points[k]``. ``row_bandwidths`` differs from ``bandwidth.b`` only
    for rows that needed the widening fallback; ``warnings`` lists every
    repair applied while building the matrix.
    """

    entries: NDArray[np.float64]
    bandwidth: Bandwidth
    eval_points: NDArray[np.float64]
    kernel: str = "epanechnikov"
    row_bandwidths: NDArray[np.float64] | None = None
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def __matmul__(self, other):
        return self.entries @ other

    def residual_operator(self, v: ArrayLike) -> NDArray[np.float64]:
        """Apply ``(I - S)`` to a vector or to every column of a matrix.

        Only meaningful for a square smoother built at the sample points.
        """
        if self.rows != self.cols:
            raise ValidationError("(I - S) needs a smoother evaluated at the sample points")
        v = np.asarray(v, dtype=np.float64)
        return v - self.entries @ v


def _as_2d(a: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _kernel_weights(kern, Z, E, b):
    U = Z[None, :, :] - E[:, None, :]
    W = np.prod(kern(U / b), axis=-1) / b ** Z.shape[1]
    return U, W


def _solve_rows(U, W, ridge):
    """Return the smoother rows for a block plus a per-row singularity mask."""
    m, n, d = U.shape
    if d == 1 and not ridge:
        return _solve_rows_1d(U[..., 0], W)
    D = np.concatenate([np.ones((m, n, 1)), U], axis=-1)
    M = np.einsum("mn,mni,mnj->mij", W, D, D)
    if ridge:
        # slope block only: (M + R) e1 = M e1 keeps constants reproduced exactly
        tr = np.trace(M, axis1=1, axis2=2)
        R = np.zeros((d + 1, d + 1))
        R[1:, 1:] = np.eye(d)
        M = M + (1e-8 * tr / (d + 1))[:, None, None] * R
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(M)
    bad = ~np.isfinite(cond) | (cond > _COND_LIMIT)
    rhs = np.zeros((m, d + 1))
    rhs[:, 0] = 1.0
    Msafe = M.copy()
    Msafe[bad] = np.eye(d + 1)
    c = np.linalg.solve(Msafe, rhs[..., None])[..., 0]
    rows = W * np.einsum("mnj,mj->mn", D, c)
    return rows, bad


def _solve_rows_1d(U, W):
    # closed-form inverse of [[s0, s1], [s1, s2]]
    WU = W * U
    s0 = W.sum(axis=1)
    s1 = WU.sum(axis=1)
    s2 = (WU * U).sum(axis=1)
    det = s0 * s2 - s1 * s1
    half_tr = 0.5 * (s0 + s2)
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lo, hi = half_tr - disc, half_tr + disc
    with np.errstate(divide="ignore", invalid="ignore"):
        bad = ~(lo > 0) | (hi > _COND_LIMIT * lo) | ~(det > 0)
        safe_det = np.where(bad, 1.0, det)
        rows = (W * s2[:, None] - WU * s1[:, None]) / safe_det[:, None]
    return rows, bad


def build_smoother(
    z: ArrayLike,
    bw: Bandwidth,
    eval_points: ArrayLike | None = None,
    kernel: str = "epanechnikov",
    allow_optional_kernels: bool = False,
) -> SmootherMatrix:
    """Build the local-linear smoother matrix.

    Row ``k`` is ``e1' (D' W D)^{-1} D' W`` where ``D`` has rows
    ``(1, Z_i - z_k)`` and ``W = diag(K_b(Z_i - z_k))`` with the product
    kernel ``K_b(u) = prod_j K(u_j / b) / b**d``.

    A singular local normal matrix first gets a small ridge
    (``1e-8 * trace / (d+1)``) on its slope block; if that is not enough
    the bandwidth for that evaluation point is doubled, at most five times.

    Args:
        z: Sample covariates, shape ``(n,)`` or ``(n, d)``.
        bw: Bandwidth record.
        eval_points: Points to evaluate at; defaults to ``z`` itself.
        kernel: Kernel name from the registry.
        allow_optional_kernels: Enables kernels outside the default registry.

    Returns:
        SmootherMatrix with ``m`` rows and ``n`` columns.

    Raises:
        SingularDesignError: if some row stays singular after all fallbacks.
    """
    Z = _as_2d(z, "z")
    E = Z if eval_points is None else _as_2d(eval_points, "eval_points")
    n, d = Z.shape
    if E.shape[1] != d:
        raise ValidationError(f"eval_points has {E.shape[1]} columns, z has {d}")
    if n < d + 2:
        raise ValidationError(f"need n >= d + 2 = {d + 2} sample points, got {n}")
    kern = get_kernel(kernel, allow_optional_kernels)
    b = bw.b

    m = E.shape[0]
    S = np.empty((m, n))
    row_b = np.full(m, b)
    notes: list[str] = []
    ridged = 0
    for start in range(0, m, _BLOCK_ROWS):
        sl = slice(start, min(start + _BLOCK_ROWS, m))
        U, W = _kernel_weights(kern, Z, E[sl], b)
        rows, bad = _solve_rows(U, W, ridge=False)
        if bad.any():
            idx = np.flatnonzero(bad)
            ridged += idx.size
            fixed, still = _solve_rows(U[idx], W[idx], ridge=True)
            rows[idx] = fixed
            for k in idx[still]:
                rows[k], row_b[start + k] = _widen(kern, Z, E[start + k], b)
        S[sl] = rows

    if ridged:
        notes.append(f"ridge applied to {ridged} singular local design(s)")
    widened = np.flatnonzero(row_b != b)
    if widened.size:
        notes.append(f"bandwidth widened for {widened.size} evaluation point(s)")
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    S.setflags(write=False)
    E = np.array(E)
    E.setflags(write=False)
    row_b.setflags(write=False)
    return SmootherMatrix(
        entries=S,
        bandwidth=bw,
        eval_points=E,
        kernel=kernel,
        row_bandwidths=row_b,
        warnings=tuple(notes),
    )


def _widen(kern, Z, point, b):
    bb = b
    for _ in range(_MAX_DOUBLINGS):
        bb *= 2.0
        U, W = _kernel_weights(kern, Z, point[None, :], bb)
        rows, bad = _solve_rows(U, W, ridge=True)
        if not bad[0]:
            return rows[0], bb
    raise SingularDesignError(
        f"local design at z={point.tolist()} singular even at bandwidth {bb:g}"
    )
