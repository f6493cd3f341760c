"""Transmission loss and SNSPD click model producing integer-ps time tags.

Tag files come in two equivalent encodings:

* text: a header line ``detector,trial,time_ps`` followed by one decimal
  record per line, ``\\n`` terminated;
* binary: headerless packed little-endian records of 14 bytes each,
  ``uint16 detector | uint32 trial | int64 time_ps``.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numba
import numpy as np

TAG_DTYPE = np.dtype([("detector", "u2"), ("trial", "i8"), ("time", "i8")])
FILE_DTYPE = np.dtype([("detector", "<u2"), ("trial", "<u4"), ("time", "<i8")])  # packed, 14 B
TEXT_HEADER = "detector,trial,time_ps"
JITTER_TRUNCATION = 5.0  # sigma


@dataclass(frozen=True)
class TimeTag:
    detector: int
    trial: int
    time: int


@dataclass(frozen=True)
class DetectorParams:
    """SNSPD model.

    Attributes:
        efficiency: click probability per incident photon.
        dark_rate: dark counts per second.
        jitter_sigma: Gaussian timing jitter, ps.
        dead_time: ns.
        id: detector index written to tags.
        paralyzable: dead time restarts on every (also suppressed) click.
    """

    efficiency: float = 0.6
    dark_rate: float = 100.0
    jitter_sigma: float = 100.0
    dead_time: float = 50.0
    id: int = 0
    paralyzable: bool = False

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0 or self.jitter_sigma < 0 or self.dead_time < 0:
            raise ValueError("dark rate, jitter and dead time must be non-negative")
        if not 0 <= self.id < 2**16:
            raise ValueError("detector id must fit in 16 bits")

    @property
    def dead_time_ps(self) -> int:
        return int(round(self.dead_time * 1e3))


def db_to_transmittance(loss_db: float) -> float:
    """Convert a loss in dB to a power transmittance."""
    return 10.0 ** (-loss_db / 10.0)


def apply_loss(events: np.ndarray, transmittance: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each event independently with probability ``transmittance``."""
    if not 0 <= transmittance <= 1:
        raise ValueError("transmittance must lie in [0, 1]")
    if transmittance == 1:
        return events
    return events[rng.random(events.size) < transmittance]


@numba.njit(cache=True)
def _dead_time_mask(trial, time, dead_ps, paralyzable):
    n = trial.size
    keep = np.zeros(n, dtype=np.bool_)
    last_trial = np.int64(-(2**62))
    last_t = np.int64(0)
    for k in range(n):
        if trial[k] != last_trial:
            keep[k] = True
            last_trial = trial[k]
            last_t = time[k]
        elif time[k] - last_t >= dead_ps:
            keep[k] = True
            last_t = time[k]
        elif paralyzable:
            last_t = time[k]
    return keep


def dead_time_filter(trial: np.ndarray, time: np.ndarray, dead_ps: int, paralyzable: bool = False) -> np.ndarray:
    """Boolean mask of clicks surviving the dead time. Input sorted by (trial, time)."""
    if trial.size == 0:
        return np.zeros(0, dtype=bool)
    return _dead_time_mask(
        np.ascontiguousarray(trial, dtype=np.int64),
        np.ascontiguousarray(time, dtype=np.int64),
        np.int64(dead_ps),
        bool(paralyzable),
    )


@dataclass
class DetectStats:
    photons_in: int
    clicks: int
    dark: int
    dead_time_dropped: int


def detect(
    events: np.ndarray,
    params: DetectorParams,
    rng: np.random.Generator,
    n_trials: int,
    first_trial: int = 0,
    span: int = 1_000_000,
    return_stats: bool = False,
):
    """Turn photon events into time tags.

    Each photon clicks with probability ``efficiency``; its tag time is the
    event time plus Gaussian jitter (truncated at 5 sigma) rounded to 1 ps.
    Dark counts are Poisson with mean ``dark_rate * span`` per trial, uniform
    over ``[0, span)`` ps. The merged stream is then dead-time filtered.

    Args:
        events: structured array with ``trial`` and ``time`` fields.
        n_trials, first_trial: trials covered by this call (for dark counts).
        span: observation span per trial, ps.

    Returns:
        ``TAG_DTYPE`` array sorted by (trial, time), plus ``DetectStats`` when
        ``return_stats`` is set.
    """
    clicked = events[rng.random(events.size) < params.efficiency] if params.efficiency < 1 else events
    t = clicked["time"].astype(np.int64, copy=True)
    if params.jitter_sigma > 0 and t.size:
        j = rng.normal(0.0, params.jitter_sigma, size=t.size)
        lim = JITTER_TRUNCATION * params.jitter_sigma
        j = np.clip(j, -lim, lim)
        t += np.rint(j).astype(np.int64)
    mean_dark = params.dark_rate * span * 1e-12 * n_trials
    n_dark = int(rng.poisson(mean_dark)) if mean_dark > 0 else 0
    trial = np.concatenate([clicked["trial"].astype(np.int64), first_trial + rng.integers(0, n_trials, size=n_dark)])
    time = np.concatenate([t, rng.integers(0, span, size=n_dark)])
    order = np.lexsort((time, trial))
    trial, time = trial[order], time[order]
    keep = dead_time_filter(trial, time, params.dead_time_ps, params.paralyzable)
    tags = np.empty(int(keep.sum()), dtype=TAG_DTYPE)
    tags["detector"] = params.id
    tags["trial"] = trial[keep]
    tags["time"] = time[keep]
    if return_stats:
        return tags, DetectStats(events.size, clicked.size, n_dark, int(keep.size - keep.sum()))
    return tags


def check_dead_time(tags: np.ndarray, dead_time_ns: float) -> bool:
    """True when, per detector and trial, consecutive tags are >= dead time apart."""
    if tags.size < 2:
        return True
    d = np.int64(round(dead_time_ns * 1e3))
    order = np.lexsort((tags["time"], tags["trial"], tags["detector"]))
    s = tags[order]
    same = (s["detector"][1:] == s["detector"][:-1]) & (s["trial"][1:] == s["trial"][:-1])
    gaps = np.diff(s["time"].astype(np.int64))
    return bool(np.all(gaps[same] >= d))


def merge_tags(*streams: np.ndarray) -> np.ndarray:
    """Concatenate tag streams sorted by (trial, time, detector)."""
    if not streams:
        return np.zeros(0, dtype=TAG_DTYPE)
    t = np.concatenate([np.asarray(s, dtype=TAG_DTYPE) for s in streams])
    return t[np.lexsort((t["detector"], t["time"], t["trial"]))]


def _is_binary(path) -> bool:
    return os.fspath(path).endswith(".bin")


def write_tags(path, tags: np.ndarray) -> None:
    """Write tags; ``.bin`` paths get the packed binary encoding, others text."""
    tags = np.asarray(tags, dtype=TAG_DTYPE)
    if _is_binary(path):
        if tags.size and (tags["trial"].min() < 0 or tags["trial"].max() >= 2**32):
            raise ValueError("trial index does not fit the 32-bit binary field")
        out = np.empty(tags.size, dtype=FILE_DTYPE)
        for f in ("detector", "trial", "time"):
            out[f] = tags[f]
        out.tofile(path)
        return
    with open(path, "w", newline="\n") as fh:
        fh.write(TEXT_HEADER + "\n")
        if tags.size:
            np.savetxt(fh, np.column_stack([tags["detector"], tags["trial"], tags["time"]]).astype(np.int64),
                       fmt="%d", delimiter=",")


def read_tags(path) -> np.ndarray:
    """Read a tag file written by ``write_tags`` (format chosen by extension)."""
    if _is_binary(path):
        raw = np.fromfile(path, dtype=FILE_DTYPE)
    else:
        with open(path) as fh:
            header = fh.readline().strip()
            if header != TEXT_HEADER:
                raise ValueError(f"unexpected tag file header {header!r}")
            body = fh.read()
        if not body.strip():
            return np.zeros(0, dtype=TAG_DTYPE)
        raw = np.loadtxt(io.StringIO(body), dtype=np.int64, delimiter=",", ndmin=2)
        tags = np.empty(raw.shape[0], dtype=TAG_DTYPE)
        tags["detector"], tags["trial"], tags["time"] = raw[:, 0], raw[:, 1], raw[:, 2]
        return tags
    tags = np.empty(raw.size, dtype=TAG_DTYPE)
    for f in ("detector", "trial", "time"):
        tags[f] = raw[f]
    return tags


def to_timetags(tags: np.ndarray) -> list[TimeTag]:
    return [TimeTag(int(d), int(tr), int(t)) for d, tr, t in zip(tags["detector"], tags["trial"], tags["time"])]


def gaussian_gate_acceptance(pulse_ps: float, jitter_ps: float, half_window_ps: float) -> float:
    """Probability that a uniform-in-pulse emission plus Gaussian jitter lands
    within +-half_window of the pulse centre."""
    from scipy import integrate, stats

    if jitter_ps == 0:
        return min(1.0, (2 * half_window_ps + 1) / pulse_ps) if pulse_ps > 0 else 1.0
    L = float(pulse_ps)

    def f(u):
        c = u - L / 2
        return stats.norm.cdf((half_window_ps - c) / jitter_ps) - stats.norm.cdf((-half_window_ps - c) / jitter_ps)

    val, _ = integrate.quad(f, 0.0, L)
    return val / L


__all__ = [
    "DetectStats",
    "DetectorParams",
    "FILE_DTYPE",
    "TAG_DTYPE",
    "TEXT_HEADER",
    "TimeTag",
    "apply_loss",
    "check_dead_time",
    "db_to_transmittance",
    "dead_time_filter",
    "detect",
    "gaussian_gate_acceptance",
    "merge_tags",
    "read_tags",
    "to_timetags",
    "write_tags",
]
