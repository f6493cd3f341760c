"""AFC preparation and storage models.

Covers the spectral channel layout, the comb profile of a single channel,
trough-fill dynamics during the waiting period, the empirical recall law and
a discrete-atom rephasing engine used to check echo timing from first
principles.

Units: optical frequencies in GHz, tooth spacings in MHz, storage times in
ns, Zeeman/hole lifetimes in s. Event times are integer picoseconds.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s


def _exact(x) -> Fraction:
    """Convert a user-supplied number to an exact rational.

    Floats go through their shortest repr so that ``0.1`` becomes 1/10
    rather than the nearest binary fraction.
    """
    if isinstance(x, Rational):
        return Fraction(x)
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise ValueError(f"non-finite value {x!r}")
        return Fraction(repr(float(x)))
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x)
    raise TypeError(f"cannot convert {type(x).__name__} to an exact number")


def wavelength_to_frequency(wavelength_nm: float) -> float:
    """Vacuum wavelength (nm) to optical frequency (GHz)."""
    return SPEED_OF_LIGHT / wavelength_nm  # m/s / nm = GHz


# ---------------------------------------------------------------------------
# Channel plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Channel:
    """One storage channel. Offsets and widths are exact rationals in GHz."""

    index: int
    center_offset: Fraction
    bandwidth: Fraction

    @property
    def low(self) -> Fraction:
        return self.center_offset - self.bandwidth / 2

    @property
    def high(self) -> Fraction:
        return self.center_offset + self.bandwidth / 2


@dataclass(frozen=True)
class ChannelPlan:
    """Spectral layout of N storage channels around a reference frequency.

    Attributes:
        reference_frequency: absolute optical frequency of offset zero (GHz).
        channels: channels ordered by increasing frequency, indices 1..N.
        guard: gap between adjacent channel edges (GHz, exact).
    """

    reference_frequency: float
    channels: tuple[Channel, ...]
    guard: Fraction

    def __post_init__(self):
        if not self.channels:
            raise ValueError("a channel plan needs at least one channel")
        for k, ch in enumerate(self.channels, start=1):
            if ch.index != k:
                raise ValueError("channel indices must run 1..N in order")
            if ch.bandwidth <= 0:
                raise ValueError("channel bandwidth must be positive")
        for a, b in zip(self.channels, self.channels[1:]):
            if b.low - a.high != self.guard:
                raise ValueError("adjacent channel gap differs from guard")
            if self.guard <= 0:
                raise ValueError("channels overlap")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def span(self) -> Fraction:
        """Distance between the outermost channel edges (GHz, exact)."""
        return self.channels[-1].high - self.channels[0].low

    def channel(self, index: int) -> Channel:
        if not 1 <= index <= self.n_channels:
            raise IndexError(f"channel {index} outside 1..{self.n_channels}")
        return self.channels[index - 1]

    def channel_at(self, offset):
        """Channel index containing each frequency offset, 0 when outside.

        Channel edges are inclusive. Accepts a scalar or an array.
        """
        lows = np.array([float(c.low) for c in self.channels])
        highs = np.array([float(c.high) for c in self.channels])
        x = np.asarray(offset, dtype=float)
        pos = np.searchsorted(lows, x, side="right") - 1
        safe = np.clip(pos, 0, len(lows) - 1)
        inside = (pos >= 0) & (x <= highs[safe])
        out = np.where(inside, safe + 1, 0).astype(np.int16)
        return int(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "reference_frequency_ghz": self.reference_frequency,
            "guard_ghz": float(self.guard),
            "span_ghz": float(self.span),
            "channels": [
                {
                    "index": c.index,
                    "center_offset_ghz": float(c.center_offset),
                    "bandwidth_ghz": float(c.bandwidth),
                    "absolute_center_ghz": self.reference_frequency + float(c.center_offset),
                }
                for c in self.channels
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelPlan":
        chans = tuple(
            Channel(int(c["index"]), _exact(c["center_offset_ghz"]), _exact(c["bandwidth_ghz"]))
            for c in d["channels"]
        )
        return cls(float(d["reference_frequency_ghz"]), chans, _exact(d["guard_ghz"]))


def plan_channels(comb_spacing, chirp_span, n_teeth: int, reference_frequency: float = 0.0) -> ChannelPlan:
    """Lay out ``n_teeth`` channels of width ``chirp_span`` on a frequency comb.

    Channels are centred on comb teeth placed symmetrically about the
    reference frequency. All arithmetic is exact.

    Args:
        comb_spacing: spacing of the comb teeth (GHz).
        chirp_span: frequency range swept by the chirp, i.e. channel width (GHz).
        n_teeth: number of comb teeth, one channel per tooth.
        reference_frequency: absolute frequency of offset 0 (GHz).

    Raises:
        ValueError: non-positive inputs or ``chirp_span >= comb_spacing``.
    """
    if isinstance(n_teeth, bool) or int(n_teeth) != n_teeth or n_teeth < 1:
        raise ValueError("n_teeth must be a positive integer")
    n = int(n_teeth)
    spacing = _exact(comb_spacing)
    bw = _exact(chirp_span)
    if spacing <= 0 or bw <= 0:
        raise ValueError("comb spacing and chirp span must be positive")
    if bw >= spacing:
        raise ValueError("chirp span must be smaller than comb spacing (channels would merge)")
    mid = Fraction(n + 1, 2)
    chans = tuple(Channel(k, (k - mid) * spacing, bw) for k in range(1, n + 1))
    guard = spacing - bw if n > 1 else Fraction(0)
    # A single channel has no neighbour, so guard is reported as zero.
    return ChannelPlan(float(reference_frequency), chans, guard)


# ---------------------------------------------------------------------------
# Comb profile and storage law
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AfcProfile:
    """Comb structure of one channel.

    Attributes:
        delta: tooth spacing (MHz).
        finesse: tooth spacing over tooth width.
        d_peak: peak optical depth.
        d0: background optical depth in the troughs at the end of preparation.
        bandwidth: comb bandwidth (GHz).
    """

    delta: float
    finesse: float = 2.0
    d_peak: float = 0.8
    d0: float = 0.1
    bandwidth: float = 10.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.finesse >= 1:
            raise ValueError("finesse must be >= 1")
        if not 0 <= self.d0 <= self.d_peak:
            raise ValueError("require 0 <= d0 <= d_peak")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def storage_time(profile: AfcProfile) -> float:
    """Echo time 1/delta in ns (delta in MHz)."""
    return 1e3 / profile.delta


def storage_delay_ps(profile: AfcProfile) -> int:
    """Echo time rounded to integer picoseconds, as applied to event times."""
    return int(round(1e6 / profile.delta))


@dataclass(frozen=True)
class StorageLaw:
    """Empirical recall efficiency versus storage time.

    ``eta0 * exp(-T/tau)``, optionally multiplied by a short-time beat
    ``1 + beat_amplitude*cos(2*pi*T/beat_period)`` (off by default).
    """

    eta0: float
    tau: float = 48.0
    beat_amplitude: float = 0.0
    beat_period: float | None = None

    def __post_init__(self):
        if not 0 <= self.eta0 <= 1:
            raise ValueError("eta0 must lie in [0, 1]")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.beat_amplitude and not (self.beat_period and self.beat_period > 0):
            raise ValueError("a beat needs a positive beat_period")


def recall_efficiency(law: StorageLaw, T):
    """Recall probability after storage time ``T`` (ns). Vectorised over T."""
    t = np.asarray(T, dtype=float)
    if np.any(t < 0):
        raise ValueError("storage time must be non-negative")
    eta = law.eta0 * np.exp(-t / law.tau)
    if law.beat_amplitude:
        eta = eta * (1.0 + law.beat_amplitude * np.cos(2 * np.pi * t / law.beat_period))
    eta = np.clip(eta, 0.0, 1.0)
    return float(eta) if eta.ndim == 0 else eta


def background_factor(profile: AfcProfile, d0_effective: float) -> float:
    """Extra recall loss from trough filling, ``exp(-(d0_eff - d0))``."""
    return math.exp(-(d0_effective - profile.d0))


# ---------------------------------------------------------------------------
# Discrete-atom rephasing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomEnsemble:
    """Collective excitation over W atoms.

    ``amplitudes`` are the complex weights c_j (spatial phase folded in),
    ``detunings`` are delta_j in MHz.
    """

    amplitudes: np.ndarray
    detunings: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex)
        d = np.asarray(self.detunings, dtype=float)
        if a.shape != d.shape or a.ndim != 1:
            raise ValueError("amplitudes and detunings must be 1-D of equal length")
        if a.size and not np.isclose(np.sum(np.abs(a) ** 2), 1.0, rtol=1e-9, atol=0):
            raise ValueError("ensemble is not normalised (sum |c|^2 != 1)")
        a.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "detunings", d)

    @property
    def count(self) -> int:
        return int(self.amplitudes.size)

    @classmethod
    def from_detunings(cls, detunings, phases=None) -> "AtomEnsemble":
        """Equal-weight ensemble with optional spatial phases (radians)."""
        d = np.asarray(detunings, dtype=float)
        ph = np.zeros_like(d) if phases is None else np.asarray(phases, dtype=float)
        amps = np.exp(1j * ph) / math.sqrt(d.size)
        return cls(amps, d)


def comb_ensemble(
    delta: float,
    n_atoms: int,
    rng: np.random.Generator,
    finesse: float = np.inf,
    bandwidth: float = 10.0,
) -> AtomEnsemble:
    """Sample W atoms on an AFC.

    Each atom sits on a random tooth m*delta within the bandwidth, displaced
    by a uniform jitter of full width delta/finesse, and carries a random
    spatial phase. ``finesse=inf`` gives an ideal comb.
    """
    if n_atoms < 1:
        raise ValueError("need at least one atom")
    half = int(bandwidth * 1e3 / (2 * delta))
    m = rng.integers(-half, half + 1, size=n_atoms)
    det = m * float(delta)
    if np.isfinite(finesse):
        width = delta / finesse
        det = det + rng.uniform(-width / 2, width / 2, size=n_atoms)
    phases = rng.uniform(0, 2 * np.pi, size=n_atoms)
    return AtomEnsemble.from_detunings(det, phases)


def dephasing_amplitude(ensemble: AtomEnsemble, t, chunk: int = 256):
    """Collective rephasing amplitude A(t) for times ``t`` in ns.

    ``A(t) = sum_j |c_j|^2 exp(i 2 pi delta_j t)``: the overlap of the evolved
    collective state with the initial one. Spatial phases cancel in the
    overlap; |A|^2 is the relative re-emission weight.
    """
    if ensemble.count == 0:
        raise ValueError("empty ensemble")
    w = np.abs(ensemble.amplitudes) ** 2
    f = ensemble.detunings * 1e-3  # MHz -> 1/ns
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(tt.shape, dtype=complex)
    flat_t, flat_o = tt.ravel(), out.reshape(-1)
    for s in range(0, flat_t.size, chunk):
        ts = flat_t[s : s + chunk]
        flat_o[s : s + chunk] = np.exp(2j * np.pi * np.outer(ts, f)) @ w
    return complex(out[0]) if np.ndim(t) == 0 else out


# ---------------------------------------------------------------------------
# Hole decay and trough filling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HoleDecayParams:
    """Double-exponential spectral-hole decay ``I_a e^{-t/T_a} + I_b e^{-t/T_b}``."""

    I_a: float
    T_a: float
    I_b: float = 0.0
    T_b: float = 10.0

    def __post_init__(self):
        if not (self.T_a > 0 and self.T_b > 0):
            raise ValueError("decay times must be positive")
        if self.I_a < 0 or self.I_b < 0:
            raise ValueError("amplitudes must be non-negative")


def hole_decay(params: HoleDecayParams, t):
    """Hole intensity at time ``t`` (s). Vectorised."""
    tt = np.asarray(t, dtype=float)
    if np.any(tt < 0):
        raise ValueError("t must be non-negative")
    out = params.I_a * np.exp(-tt / params.T_a) + params.I_b * np.exp(-tt / params.T_b)
    return float(out) if out.ndim == 0 else out


def effective_d0(d0_end_of_prep: float, wait_time, params: HoleDecayParams, d_peak: float = 0.8):
    """Trough optical depth after waiting ``wait_time`` seconds.

    The hole left in the troughs relaxes with the normalised Zeeman decay, so
    ``d0(t) = d_peak - (d_peak - d0_end) * I(t)/I(0)``.
    """
    if not 0 <= d0_end_of_prep <= d_peak:
        raise ValueError("require 0 <= d0_end_of_prep <= d_peak")
    total = params.I_a + params.I_b
    if total <= 0:
        raise ValueError("hole decay has zero initial intensity")
    frac = np.asarray(hole_decay(params, wait_time)) / total
    out = d_peak - (d_peak - d0_end_of_prep) * frac
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Routing through the memory
# ---------------------------------------------------------------------------


class Outcome(enum.IntEnum):
    ABSORBED = 0
    RECALLED = 1
    TRANSMITTED = 2


@dataclass(frozen=True)
class RouteResult:
    outcome: Outcome
    time: int | None  # output time in ps, None when absorbed


def route_photon(profile: AfcProfile, plan: ChannelPlan, event, law: StorageLaw, rng) -> RouteResult:
    """Send one photon through the memory.

    Out-of-channel photons are transmitted untouched. In-channel photons are
    recalled after 1/delta with probability ``recall_efficiency(law, 1/delta)``
    and otherwise lost.
    """
    if isinstance(event, np.void):
        freq, t = float(event["freq"]), int(event["time"])
    else:
        freq, t = float(event.frequency_offset), int(event.time)
    if plan.channel_at(freq) == 0:
        return RouteResult(Outcome.TRANSMITTED, t)
    eta = recall_efficiency(law, storage_time(profile))
    if rng.random() < eta:
        return RouteResult(Outcome.RECALLED, t + storage_delay_ps(profile))
    return RouteResult(Outcome.ABSORBED, None)


def route_batch(events: np.ndarray, plan: ChannelPlan, eta, delay_ps: int, rng: np.random.Generator):
    """Vectorised routing of an event array (see ``pair_source.EVENT_DTYPE``).

    Args:
        events: structured event array with ``freq`` and ``time`` fields.
        plan: channel plan deciding which events are in-band.
        eta: recall probability, scalar or per-channel array indexed 1..N
            (index 0 unused).
        delay_ps: echo delay added to recalled events.

    Returns:
        ``(output, outcome)`` where ``output`` holds recalled events (time
        shifted, channel set to the storing channel) and transmitted events in
        input order, and ``outcome`` gives an ``Outcome`` code per input event.
    """
    n = events.size
    chan = plan.channel_at(events["freq"]) if n else np.zeros(0, np.int16)
    chan = np.atleast_1d(chan)
    inband = chan > 0
    eta_arr = np.asarray(eta, dtype=float)
    p = eta_arr[chan] if eta_arr.ndim else np.full(n, float(eta_arr))
    u = rng.random(n)
    recalled = inband & (u < p)
    outcome = np.full(n, Outcome.ABSORBED, dtype=np.int8)
    outcome[recalled] = Outcome.RECALLED
    outcome[~inband] = Outcome.TRANSMITTED
    keep = outcome != Outcome.ABSORBED
    out = events[keep].copy()
    rec = recalled[keep]
    out["time"][rec] += int(delay_ps)
    out["channel"][rec] = chan[keep][rec]
    return out, outcome


# ---------------------------------------------------------------------------
# Spontaneous emission after the waiting period
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpontaneousEmission:
    """Photons emitted by the memory during the storage window.

    The rate per ns at the memory output decays from ``rate0_per_ns`` with
    the excited-state lifetime and levels off at ``floor_per_ns``.
    """

    rate0_per_ns: float = 0.0
    lifetime_ms: float = 10.0
    floor_per_ns: float = 0.0

    def __post_init__(self):
        if self.rate0_per_ns < 0 or self.floor_per_ns < 0:
            raise ValueError("rates must be non-negative")
        if not self.lifetime_ms > 0:
            raise ValueError("lifetime must be positive")

    def rate(self, wait_s):
        """Photons per ns after waiting ``wait_s`` seconds. Vectorised."""
        w = np.asarray(wait_s, dtype=float)
        if np.any(w < 0):
            raise ValueError("wait time must be non-negative")
        r = self.rate0_per_ns * np.exp(-w * 1e3 / self.lifetime_ms) + self.floor_per_ns
        return float(r) if r.ndim == 0 else r


def poisson_times(rng: np.random.Generator, rate_per_trial: float, first_trial: int, n_trials: int, span_ps: int):
    """Homogeneous Poisson events over ``n_trials`` trials of length ``span_ps``.

    Returns ``(trial, time)`` sorted lexicographically.
    """
    n = rng.poisson(rate_per_trial * n_trials) if rate_per_trial > 0 else 0
    trial = first_trial + rng.integers(0, n_trials, size=n)
    time = rng.integers(0, span_ps, size=n)
    order = np.lexsort((time, trial))
    return trial[order].astype(np.int64), time[order].astype(np.int64)


__all__ = [
    "AfcProfile",
    "AtomEnsemble",
    "Channel",
    "ChannelPlan",
    "HoleDecayParams",
    "Outcome",
    "RouteResult",
    "SpontaneousEmission",
    "StorageLaw",
    "background_factor",
    "comb_ensemble",
    "dephasing_amplitude",
    "effective_d0",
    "hole_decay",
    "plan_channels",
    "poisson_times",
    "recall_efficiency",
    "route_batch",
    "route_photon",
    "storage_delay_ps",
    "storage_time",
    "wavelength_to_frequency",
]
