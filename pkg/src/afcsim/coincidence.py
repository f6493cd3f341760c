"""Windowed coincidence counting and g2 estimation over time-tag streams.

Streams are tag arrays (``detection.TAG_DTYPE``) sorted by (trial, time).
Two tags coincide when they share a trial and their times differ by at most
``window`` ps. Every tag is used at most once; the matcher returns a maximum
matching, which on sorted streams is found by a single two-pointer pass.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import sparse


class UndefinedEstimateError(ValueError):
    """g2 is undefined because a singles count (or the trial count) is zero."""


@dataclass(frozen=True)
class CoincidenceTally:
    C_si: int
    C_s: int
    C_i: int
    m: int
    window: int = 0

    def __post_init__(self):
        if min(self.C_si, self.C_s, self.C_i) < 0:
            raise ValueError("counts must be non-negative")
        if self.C_si > min(self.C_s, self.C_i):
            raise ValueError("C_si cannot exceed C_s or C_i")
        if self.m < 1:
            raise ValueError("trial count m must be >= 1")

    def __add__(self, other: "CoincidenceTally") -> "CoincidenceTally":
        if self.window != other.window:
            raise ValueError("cannot merge tallies with different windows")
        return CoincidenceTally(
            self.C_si + other.C_si, self.C_s + other.C_s, self.C_i + other.C_i, self.m + other.m, self.window
        )

    @property
    def p_si(self) -> float:
        return self.C_si / self.m

    @property
    def p_s(self) -> float:
        return self.C_s / self.m

    @property
    def p_i(self) -> float:
        return self.C_i / self.m


@dataclass(frozen=True)
class G2Estimate:
    value: float
    sigma: float
    tally: CoincidenceTally

    def __str__(self):
        return f"{self.value:.6g}±{self.sigma:.3g}"


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _match(trial_a, time_a, trial_b, time_b, window):
    na, nb = trial_a.size, trial_b.size
    ia = np.empty(min(na, nb), dtype=np.int64)
    ib = np.empty(min(na, nb), dtype=np.int64)
    i = j = k = 0
    while i < na and j < nb:
        ta, tb = trial_a[i], trial_b[j]
        if tb < ta or (tb == ta and time_b[j] < time_a[i] - window):
            j += 1
        elif ta < tb or time_a[i] < time_b[j] - window:
            i += 1
        else:
            ia[k] = i
            ib[k] = j
            k += 1
            i += 1
            j += 1
    return ia[:k], ib[:k]


def _fields(tags):
    if isinstance(tags, np.ndarray) and tags.dtype.names:
        return np.asarray(tags["trial"], dtype=np.int64), np.asarray(tags["time"], dtype=np.int64)
    trial, time = tags
    return np.asarray(trial, dtype=np.int64), np.asarray(time, dtype=np.int64)


def is_sorted(trial: np.ndarray, time: np.ndarray) -> bool:
    dtr = np.diff(trial)
    return bool(np.all((dtr > 0) | ((dtr == 0) & (np.diff(time) >= 0))))


def match_indices(tags_a, tags_b, window: int, offset_b: int = 0):
    """Indices of matched pairs ``(ia, ib)`` with ``|t_a + offset_b - t_b| <= window``.

    ``tags_*`` are tag arrays or ``(trial, time)`` tuples sorted by
    (trial, time).
    """
    if window < 0:
        raise ValueError("window must be non-negative")
    ta, xa = _fields(tags_a)
    tb, xb = _fields(tags_b)
    if not (is_sorted(ta, xa) and is_sorted(tb, xb)):
        raise ValueError("tag streams must be sorted by (trial, time)")
    return _match(ta, xa + np.int64(offset_b), tb, xb, np.int64(window))


def find_coincidences(tags_a, tags_b, window: int) -> int:
    """Number of coincident pairs between two streams (each tag used once)."""
    return int(match_indices(tags_a, tags_b, window)[0].size)


@dataclass(frozen=True)
class PeriodicTrigger:
    """One trigger per trial at a fixed time (ps) from the trial start."""

    n_trials: int
    time: int = 0
    first_trial: int = 0

    def tags(self) -> tuple[np.ndarray, np.ndarray]:
        tr = np.arange(self.first_trial, self.first_trial + self.n_trials, dtype=np.int64)
        return tr, np.full(self.n_trials, self.time, dtype=np.int64)


def hit_trials(tags, reference: int, tolerance: int) -> np.ndarray:
    """Sorted unique trials with a tag within ``reference +- tolerance``."""
    tr, t = _fields(tags)
    sel = np.abs(t - np.int64(reference)) <= tolerance
    return np.unique(tr[sel])


def threefold(
    trigger,
    signal_tags,
    idler_tags,
    window: int,
    n_trials: int | None = None,
    signal_offset: int = 0,
    idler_offset: int = 0,
) -> CoincidenceTally:
    """Trigger-conditioned three-fold tally.

    Signal (idler) tags are matched against trigger times shifted by
    ``signal_offset`` (``idler_offset``). ``C_si`` counts triggers matched in
    both arms. ``trigger`` is a ``PeriodicTrigger`` or a tag stream; in the
    latter case ``n_trials`` is required.
    """
    if isinstance(trigger, PeriodicTrigger):
        m = trigger.n_trials if n_trials is None else n_trials
        if m < 1:
            raise ValueError("trial count m must be >= 1")
        lo, hi = trigger.first_trial, trigger.first_trial + trigger.n_trials
        hs = hit_trials(signal_tags, trigger.time + signal_offset, window)
        hi_ = hit_trials(idler_tags, trigger.time + idler_offset, window)
        hs = hs[(hs >= lo) & (hs < hi)]
        hi_ = hi_[(hi_ >= lo) & (hi_ < hi)]
        c_si = np.intersect1d(hs, hi_, assume_unique=True).size
        return CoincidenceTally(int(c_si), int(hs.size), int(hi_.size), int(m), int(window))
    if n_trials is None or n_trials < 1:
        raise ValueError("trial count m must be >= 1")
    ts, _ = match_indices(trigger, signal_tags, window, signal_offset)
    ti, _ = match_indices(trigger, idler_tags, window, idler_offset)
    c_si = np.intersect1d(ts, ti, assume_unique=True).size
    return CoincidenceTally(int(c_si), int(ts.size), int(ti.size), int(n_trials), int(window))


def pairwise_tallies(signal_hits: Sequence[np.ndarray], idler_hits: Sequence[np.ndarray]):
    """Singles vectors and the three-fold count matrix from per-mode hit trials.

    ``C_si[r, i] = |signal_hits[r] & idler_hits[i]|`` via a sparse incidence
    product over the trials that saw any hit.
    """
    allh = [np.asarray(h, dtype=np.int64) for h in list(signal_hits) + list(idler_hits)]
    c_s = np.array([h.size for h in signal_hits], dtype=np.int64)
    c_i = np.array([h.size for h in idler_hits], dtype=np.int64)
    nz = [h for h in allh if h.size]
    if not nz:
        return c_s, c_i, np.zeros((len(signal_hits), len(idler_hits)), dtype=np.int64)
    universe = np.unique(np.concatenate(nz))

    def incidence(hits):
        rows = np.concatenate([np.searchsorted(universe, h) for h in hits] or [np.zeros(0, np.int64)])
        cols = np.concatenate([np.full(h.size, k, dtype=np.int64) for k, h in enumerate(hits)] or [np.zeros(0, np.int64)])
        data = np.ones(rows.size, dtype=np.int64)
        return sparse.csr_matrix((data, (rows, cols)), shape=(universe.size, len(hits)))

    S = incidence([np.asarray(h, dtype=np.int64) for h in signal_hits])
    I = incidence([np.asarray(h, dtype=np.int64) for h in idler_hits])
    return c_s, c_i, np.asarray((S.T @ I).toarray(), dtype=np.int64)


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


def g2_from_tally(
    t: CoincidenceTally,
    method: str = "poisson",
    n_resamples: int = 2000,
    rng: np.random.Generator | None = None,
) -> G2Estimate:
    """g2 = C_si * m / (C_s * C_i) with a standard error.

    ``method="poisson"`` propagates independent Poisson errors on the three
    counts to first order (a zero three-fold count is given unit variance).
    ``method="montecarlo"`` resamples each count from a Poisson distribution
    with the observed mean and reports the spread.
    """
    if t.C_s == 0 or t.C_i == 0:
        raise UndefinedEstimateError("g2 undefined: zero singles count")
    scale = t.m / (t.C_s * t.C_i)
    value = t.C_si * scale
    if method == "poisson":
        var = scale**2 * max(t.C_si, 1) + value**2 / t.C_s + value**2 / t.C_i
        sigma = math.sqrt(var)
    elif method == "montecarlo":
        rng = np.random.default_rng(0) if rng is None else rng
        si = rng.poisson(t.C_si, n_resamples)
        s = rng.poisson(t.C_s, n_resamples)
        i = rng.poisson(t.C_i, n_resamples)
        ok = (s > 0) & (i > 0)
        g = si[ok] * t.m / (s[ok].astype(float) * i[ok])
        sigma = float(np.std(g, ddof=1)) if g.size > 1 else float("nan")
    else:
        raise ValueError(f"unknown sigma method {method!r}")
    return G2Estimate(float(value), float(sigma), t)


@dataclass
class G2Matrix:
    """g2 estimates for recalled-mode rows and idler-mode columns.

    ``entries[r][i]`` is a ``G2Estimate`` or ``None`` when undefined.
    """

    rows: list[str]
    cols: list[str]
    entries: list[list[G2Estimate | None]]
    tallies: list[list[CoincidenceTally]] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.rows)) != len(self.rows) or len(set(self.cols)) != len(self.cols):
            raise ValueError("mode labels must be unique")
        if len(self.entries) != len(self.rows) or any(len(r) != len(self.cols) for r in self.entries):
            raise ValueError("entry dimensions do not match labels")

    @property
    def shape(self):
        return len(self.rows), len(self.cols)

    def value(self, r: int, i: int) -> float:
        e = self.entries[r][i]
        return float("nan") if e is None else e.value

    def summary(self) -> dict:
        """Mean, standard error of the mean and entry spread for diagonal and
        off-diagonal entries (undefined entries excluded and counted)."""
        out = {}
        nr, nc = self.shape
        groups = {"diagonal": [], "off_diagonal": []}
        undefined = {"diagonal": 0, "off_diagonal": 0}
        for r in range(nr):
            for i in range(nc):
                key = "diagonal" if r == i else "off_diagonal"
                e = self.entries[r][i]
                if e is None:
                    undefined[key] += 1
                else:
                    groups[key].append(e)
        for key, es in groups.items():
            vals = np.array([e.value for e in es])
            sig = np.array([e.sigma for e in es])
            out[key] = {
                "n": int(vals.size),
                "undefined": undefined[key],
                "mean": float(vals.mean()) if vals.size else None,
                "sem": float(math.sqrt(np.sum(sig**2)) / vals.size) if vals.size else None,
                "std": float(vals.std(ddof=1)) if vals.size > 1 else None,
            }
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + list(self.cols))
            for lab, row in zip(self.rows, self.entries):
                w.writerow([lab] + ["undefined" if e is None else f"{e.value:.6g}±{e.sigma:.3g}" for e in row])

    def counts_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "C_si", "C_s", "C_i", "m", "window_ps"])
            for lab, trow in zip(self.rows, self.tallies):
                for col, t in zip(self.cols, trow):
                    w.writerow([lab, col, t.C_si, t.C_s, t.C_i, t.m, t.window])


def g2_matrix_from_counts(
    rows: Sequence[str],
    cols: Sequence[str],
    c_s: np.ndarray,
    c_i: np.ndarray,
    c_si: np.ndarray,
    m: int,
    window: int,
    method: str = "poisson",
    rng: np.random.Generator | None = None,
) -> G2Matrix:
    entries, tallies = [], []
    for r in range(len(rows)):
        erow, trow = [], []
        for i in range(len(cols)):
            t = CoincidenceTally(int(c_si[r, i]), int(c_s[r]), int(c_i[i]), int(m), int(window))
            trow.append(t)
            try:
                erow.append(g2_from_tally(t, method, rng=rng))
            except UndefinedEstimateError:
                erow.append(None)
        entries.append(erow)
        tallies.append(trow)
    return G2Matrix(list(rows), list(cols), entries, tallies)


def g2_matrix(
    recalled: Sequence,
    idlers: Sequence,
    window: int,
    m: int,
    rows: Sequence[str] | None = None,
    cols: Sequence[str] | None = None,
    trigger: PeriodicTrigger | None = None,
    signal_offsets: Sequence[int] | None = None,
    idler_offsets: Sequence[int] | None = None,
    method: str = "poisson",
) -> G2Matrix:
    """g2 matrix over recalled streams R_r and idler streams I_i.

    Each entry is ``g2_from_tally(threefold(trigger, R_r, I_i, window))``.
    Entries with a zero singles count are stored as ``None``.
    """
    if m < 1:
        raise ValueError("trial count m must be >= 1")
    trigger = PeriodicTrigger(m) if trigger is None else trigger
    so = [0] * len(recalled) if signal_offsets is None else list(signal_offsets)
    io = [0] * len(idlers) if idler_offsets is None else list(idler_offsets)
    lo, hi = trigger.first_trial, trigger.first_trial + trigger.n_trials

    def hits(tags, off):
        h = hit_trials(tags, trigger.time + off, window)
        return h[(h >= lo) & (h < hi)]

    sh = [hits(s, o) for s, o in zip(recalled, so)]
    ih = [hits(s, o) for s, o in zip(idlers, io)]
    c_s, c_i, c_si = pairwise_tallies(sh, ih)
    rows = [f"R{k + 1}" for k in range(len(recalled))] if rows is None else rows
    cols = [f"I{k + 1}" for k in range(len(idlers))] if cols is None else cols
    return g2_matrix_from_counts(rows, cols, c_s, c_i, c_si, m, window, method)


__all__ = [
    "CoincidenceTally",
    "G2Estimate",
    "G2Matrix",
    "PeriodicTrigger",
    "UndefinedEstimateError",
    "find_coincidences",
    "g2_from_tally",
    "g2_matrix",
    "g2_matrix_from_counts",
    "hit_trials",
    "is_sorted",
    "match_indices",
    "pairwise_tallies",
    "threefold",
]
