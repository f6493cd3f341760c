"""Closed-form detection and crosstalk models, plus the least-squares fits.

Detection model per trial and coincidence window:

    p_s  = eta_c*eta_s + eta_n
    p_i  = eta_c*eta_i + eta_n
    p_si = eta_c*eta_s*eta_i + p_s*p_i
    g2   = p_si / (p_s*p_i)  ~  1/(eta_c + 1/SNR) + 1,  SNR = eta_s/eta_n
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .channel_memory import HoleDecayParams


@dataclass(frozen=True)
class EfficiencyBudget:
    """Per-trial probabilities of the detection model.

    ``eta_n_idler`` overrides the idler-arm noise (defaults to ``eta_n``).
    """

    eta_c: float
    eta_s: float
    eta_i: float
    eta_n: float
    eta_n_idler: float | None = None

    def __post_init__(self):
        for name in ("eta_c", "eta_s", "eta_i", "eta_n"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eta_n_idler is not None and not 0 <= self.eta_n_idler <= 1:
            raise ValueError("eta_n_idler must lie in [0, 1]")

    @property
    def snr(self) -> float:
        if self.eta_n == 0:
            return math.inf
        return self.eta_s / self.eta_n


def predict_probabilities(b: EfficiencyBudget) -> tuple[float, float, float]:
    """(p_s, p_i, p_si) of the detection model."""
    n_i = b.eta_n if b.eta_n_idler is None else b.eta_n_idler
    p_s = b.eta_c * b.eta_s + b.eta_n
    p_i = b.eta_c * b.eta_i + n_i
    p_si = b.eta_c * b.eta_s * b.eta_i + p_s * p_i
    return p_s, p_i, p_si


def g2_from_budget(b: EfficiencyBudget) -> float:
    p_s, p_i, p_si = predict_probabilities(b)
    if p_s == 0 or p_i == 0:
        raise ValueError("g2 undefined for a zero singles probability")
    return p_si / (p_s * p_i)


def g2_vs_snr(eta_c: float, snr):
    """Large-SNR approximation ``1/(eta_c + 1/snr) + 1``. Vectorised over snr."""
    if not eta_c > 0:
        raise ValueError("eta_c must be positive")
    s = np.asarray(snr, dtype=float)
    if np.any(s <= 0):
        raise ValueError("snr must be positive")
    with np.errstate(divide="ignore"):
        g = 1.0 / (eta_c + 1.0 / s) + 1.0
    return float(g) if g.ndim == 0 else g


def snr_for_g2(eta_c: float, g2: float) -> float:
    """Inverse of ``g2_vs_snr``."""
    if not g2 > 1:
        raise ValueError("g2 must exceed 1")
    d = 1.0 / (g2 - 1.0) - eta_c
    if d <= 0:
        return math.inf
    return 1.0 / d


# ---------------------------------------------------------------------------
# Crosstalk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrosstalkMatrix:
    """Leakage matrix ``C[i][j]``: probability a channel-i photon exits channel j."""

    C: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1] or p.shape != (C.shape[0],):
            raise ValueError("C must be N x N and p of length N")
        if np.any(C < 0) or np.any(C > 1):
            raise ValueError("leakage entries must lie in [0, 1]")
        if not np.allclose(C.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("rows of C must sum to 1")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("pair probabilities must lie in [0, 1]")
        C.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.C.shape[0]


def crosstalk_g2(x: CrosstalkMatrix, i: int, j: int) -> float:
    """g2 between idler channel ``i`` and output channel ``j`` (1-based).

    ``C[i][j] / sum_k p_k C[k][j] + 1``.
    """
    if not (1 <= i <= x.n and 1 <= j <= x.n):
        raise IndexError("channel index out of range")
    den = float(np.dot(x.p, x.C[:, j - 1]))
    if den == 0:
        raise ValueError(f"g2 undefined: no photons reach channel {j}")
    return x.C[i - 1, j - 1] / den + 1.0


def crosstalk_g2_matrix(x: CrosstalkMatrix) -> np.ndarray:
    """All entries; row = idler (source) channel, column = output channel."""
    den = x.p @ x.C
    with np.errstate(divide="ignore", invalid="ignore"):
        return x.C / den[None, :] + 1.0


def invert_crosstalk(g_uncorrelated: float, p_own: float, p_leak: float | None = None, c_diag: float = 1.0) -> float:
    """Leakage ``C_ij`` that yields ``g_uncorrelated`` at output j.

    Solves ``g - 1 = C_ij / (p_own C_jj + p_leak C_ij)`` for C_ij, where
    ``p_own`` is the pair probability of the channel that owns output j and
    ``p_leak`` that of the leaking channel (defaults to ``p_own``).
    """
    if g_uncorrelated < 1:
        raise ValueError("g2 below 1 is inconsistent with the leakage model")
    p_leak = p_own if p_leak is None else p_leak
    x = g_uncorrelated - 1.0
    if x == 0:
        return 0.0
    den = 1.0 - x * p_leak
    if den <= 0:
        raise ValueError("no finite leakage reproduces this g2")
    return x * p_own * c_diag / den


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Least-squares fit outcome.

    ``params`` maps parameter names to values; ``covariance`` is in the same
    order as ``names``.
    """

    names: tuple[str, ...]
    values: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    message: str = ""
    n_samples: int = 0
    model: Callable | None = field(default=None, repr=False)

    @property
    def params(self) -> dict:
        return dict(zip(self.names, (float(v) for v in self.values)))

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def __getitem__(self, name):
        return self.params[name]

    def predict(self, x):
        if self.model is None:
            raise ValueError("fit has no model attached")
        return self.model(np.asarray(x, dtype=float), *self.values)

    def report(self) -> str:
        lines = [f"converged: {self.converged}", f"samples: {self.n_samples}"]
        for n, v, s in zip(self.names, self.values, self.stderr):
            lines.append(f"{n} = {v:.9g} +- {s:.3g}")
        lines.append(f"residual_norm: {self.residual_norm:.6g}")
        if self.message:
            lines.append(f"message: {self.message}")
        return "\n".join(lines) + "\n"

    def curve_csv(self, path, x) -> None:
        xs = np.asarray(x, dtype=float)
        ys = self.predict(xs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "fit"])
            for a, b in zip(xs, ys):
                w.writerow([repr(float(a)), repr(float(b))])


class FitError(RuntimeError):
    """Raised for degenerate designs."""


def _samples(samples, min_n: int):
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be a sequence of (x, y) pairs")
    if arr.shape[0] < min_n:
        raise ValueError(f"need at least {min_n} samples, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    return arr[:, 0], arr[:, 1]


def _covariance(res, dof: int) -> np.ndarray:
    J = res.jac
    s2 = 2 * res.cost / dof if dof > 0 else 0.0
    try:
        return np.linalg.pinv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        return np.full((J.shape[1], J.shape[1]), np.nan)


def _wrap(names, res, n, sigma_given, model) -> FitResult:
    dof = n - len(names)
    cov = _covariance(res, dof)
    if sigma_given:
        # Absolute sigmas: do not rescale by the reduced chi-square.
        cov = np.linalg.pinv(res.jac.T @ res.jac)
    return FitResult(
        tuple(names), res.x.copy(), cov, float(np.linalg.norm(res.fun)), bool(res.success and res.status > 0),
        str(res.message), n, model,
    )


def _double_exp(t, Ia, Ta, Ib, Tb):
    return Ia * np.exp(-t / Ta) + Ib * np.exp(-t / Tb)


def _tail_slope(t, y, sel):
    tt, yy = t[sel], y[sel]
    ok = yy > 0
    if ok.sum() < 2:
        return None
    k, c = np.polyfit(tt[ok], np.log(yy[ok]), 1)
    if k >= 0:
        return None
    return -1.0 / k, math.exp(c)


def fit_double_exponential(samples, sigma=None, n_starts: int = 6) -> tuple[HoleDecayParams, FitResult]:
    """Fit ``I_a e^{-t/T_a} + I_b e^{-t/T_b}`` with T_a <= T_b.

    Starts are seeded from log-linear slopes of the late tail (slow component)
    and of the early data after removing that tail (fast component), plus a
    geometric spread of fast/slow ratios. The best converged start wins.
    """
    t, y = _samples(samples, 8)
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    order = np.argsort(t)
    t, y, w = t[order], y[order], w[order]
    n = t.size
    scale = float(np.max(np.abs(y))) or 1.0

    starts = []
    tail = _tail_slope(t, y, np.arange(n) >= n // 2)
    if tail is not None:
        Tb0, Ib0 = tail
        fast = y - Ib0 * np.exp(-t / Tb0)
        head = _tail_slope(t, fast, (np.arange(n) < n // 2) & (fast > 0))
        if head is not None and head[0] < Tb0:
            starts.append((head[1], head[0], Ib0, Tb0))
        starts.append((max(y[0] - Ib0, scale * 1e-3), Tb0 / 30, Ib0, Tb0))
    span = (t[-1] - t[0]) or 1.0
    for r in np.geomspace(1e-3, 0.3, n_starts):
        starts.append((y[0] / 2, r * span, y[0] / 2, span))

    def resid(p):
        return (_double_exp(t, *p) - y) * w

    best = None
    lb = [0.0, 1e-12, 0.0, 1e-12]
    for s in starts:
        p0 = np.array([max(s[0], 0), max(s[1], 1e-9), max(s[2], 0), max(s[3], 1e-9)], dtype=float)
        try:
            res = optimize.least_squares(
                resid, p0, bounds=(lb, np.inf), method="trf", x_scale="jac",
                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000,
            )
        except (ValueError, FloatingPointError):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitError("double-exponential fit failed from every start")
    Ia, Ta, Ib, Tb = best.x
    if Ta > Tb:
        best.x = np.array([Ib, Tb, Ia, Ta])
        best.jac = best.jac[:, [2, 3, 0, 1]]
    fr = _wrap(("I_a", "T_a", "I_b", "T_b"), best, n, sigma is not None, _double_exp)
    Ia, Ta, Ib, Tb = fr.values
    return HoleDecayParams(I_a=float(Ia), T_a=float(Ta), I_b=float(Ib), T_b=float(Tb)), fr


def _exp(t, A, tau):
    return A * np.exp(-t / tau)


def fit_exponential(samples, sigma=None) -> FitResult:
    """Fit ``eta0 * exp(-T/tau)``; started from a log-linear fit."""
    t, y = _samples(samples, 4)
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    start = _tail_slope(t, y, np.ones(t.size, bool))
    if start is None:
        raise FitError("data are not decaying; exponential fit is degenerate")
    tau0, A0 = start
    res = optimize.least_squares(
        lambda p: (_exp(t, *p) - y) * w, [A0, tau0], bounds=([0, 1e-300], np.inf),
        x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=10000,
    )
    return _wrap(("eta0", "tau"), res, t.size, sigma is not None, _exp)


def _linear_fit(X, y, w, names, model) -> FitResult:
    Xw = X * w[:, None]
    yw = y * w
    rank = np.linalg.matrix_rank(Xw)
    if rank < X.shape[1]:
        raise FitError("degenerate design matrix")
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    r = Xw @ coef - yw
    dof = X.shape[0] - X.shape[1]
    s2 = float(r @ r) / dof if dof > 0 else 0.0
    cov = np.linalg.inv(Xw.T @ Xw) * s2
    return FitResult(tuple(names), coef, cov, float(np.linalg.norm(r)), True, "linear least squares", X.shape[0], model)


def fit_quadratic_linear(samples, sigma=None) -> FitResult:
    """Fit ``a P^2 + b P`` (no constant term)."""
    P, y = _samples(samples, 4)
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    X = np.column_stack([P * P, P])
    return _linear_fit(X, y, w, ("a", "b"), lambda p, a, b: a * p * p + b * p)


def fit_inverse(samples, sigma=None) -> FitResult:
    """Fit ``A / P + c`` with a free intercept."""
    P, y = _samples(samples, 4)
    if np.any(P == 0):
        raise FitError("inverse model undefined at P = 0")
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    X = np.column_stack([1.0 / P, np.ones_like(P)])
    return _linear_fit(X, y, w, ("A", "c"), lambda p, A, c: A / p + c)


# ---------------------------------------------------------------------------
# Consistency tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlatnessTest:
    chi2: float
    dof: int
    p_value: float
    weighted_mean: float
    passed: bool


def chi2_flatness(values, sigmas, alpha: float = 0.05) -> FlatnessTest:
    """Chi-square test that all values share one mean (weighted by 1/sigma^2)."""
    v = np.asarray(values, dtype=float)
    s = np.asarray(sigmas, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two values")
    if np.any(s <= 0):
        raise ValueError("sigmas must be positive")
    w = 1.0 / s**2
    mean = float(np.sum(w * v) / np.sum(w))
    chi2 = float(np.sum(w * (v - mean) ** 2))
    dof = v.size - 1
    p = float(stats.chi2.sf(chi2, dof))
    return FlatnessTest(chi2, dof, p, mean, p >= alpha)


def predicted_g2_matrix(
    eta_c: Sequence[float],
    eta_s: Sequence[float],
    eta_i: Sequence[float],
    eta_n: Sequence[float],
    eta_n_idler: Sequence[float] | None = None,
    crosstalk: np.ndarray | None = None,
) -> np.ndarray:
    """Expected g2 over N spectral x M temporal modes without simulation.

    Modes are independent except through optional spectral leakage
    ``crosstalk`` (N x N) applied to the recalled signal. Arrays are per
    mode (length N*M, row-major by channel) or scalars. Rows are recalled
    modes, columns idler modes.
    """
    eta_c = np.atleast_1d(np.asarray(eta_c, dtype=float))
    n = max(eta_c.size, np.size(eta_s), np.size(eta_i), np.size(eta_n))
    ec = np.broadcast_to(eta_c, (n,))
    es = np.broadcast_to(np.asarray(eta_s, dtype=float), (n,))
    ei = np.broadcast_to(np.asarray(eta_i, dtype=float), (n,))
    ns = np.broadcast_to(np.asarray(eta_n, dtype=float), (n,))
    ni = ns if eta_n_idler is None else np.broadcast_to(np.asarray(eta_n_idler, dtype=float), (n,))
    L = np.eye(n) if crosstalk is None else np.asarray(crosstalk, dtype=float)
    if L.shape != (n, n):
        raise ValueError("crosstalk must be square over the modes")
    # Signal singles at output r: sum over sources k of eta_c_k eta_s_k L[k, r].
    p_s = (ec * es) @ L + ns
    p_i = ec * ei + ni
    corr = (ec * ei)[None, :] * (es[:, None] * L).T  # [r, i] = eta_c_i eta_i_i eta_s_i L[i, r]
    p_si = corr + np.outer(p_s, p_i)
    return p_si / np.outer(p_s, p_i)


__all__ = [
    "CrosstalkMatrix",
    "EfficiencyBudget",
    "FitError",
    "FitResult",
    "FlatnessTest",
    "chi2_flatness",
    "crosstalk_g2",
    "crosstalk_g2_matrix",
    "fit_double_exponential",
    "fit_exponential",
    "fit_inverse",
    "fit_quadratic_linear",
    "g2_from_budget",
    "g2_vs_snr",
    "invert_crosstalk",
    "predict_probabilities",
    "predicted_g2_matrix",
    "snr_for_g2",
]
