"""Heralded photon-pair source.

Pairs are drawn per pulse slot with Poisson (default) or thermal statistics.
Each slot is one temporal mode of a pulse train; the train is the trial unit.
Generation is sparse: for Poisson statistics the total pair count of a block
of S slots is Poisson(mu*S) and pairs are scattered uniformly over the slots,
which has the same law as independent per-slot draws but costs O(pairs).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel_memory import SPEED_OF_LIGHT

EVENT_DTYPE = np.dtype(
    [
        ("trial", "i8"),
        ("mode", "i2"),
        ("channel", "i2"),
        ("kind", "i1"),
        ("arm", "i1"),
        ("pair_id", "i8"),
        ("time", "i8"),  # ps from train start
        ("freq", "f8"),  # GHz offset from the arm's reference frequency
    ]
)


class Kind(enum.IntEnum):
    SIGNAL = 0
    IDLER = 1
    NOISE = 2


class Arm(enum.IntEnum):
    SIGNAL = 0
    IDLER = 1


# Central wavelengths (nm) of the five signal / idler bands.
SIGNAL_WAVELENGTHS = (1532.11, 1532.00, 1531.88, 1531.76, 1531.65)
IDLER_WAVELENGTHS = (1549.08, 1549.20, 1549.32, 1549.44, 1549.56)
SIGNAL_REFERENCE_NM = SIGNAL_WAVELENGTHS[2]
IDLER_REFERENCE_NM = IDLER_WAVELENGTHS[2]


def channel_wavelengths(channel: int) -> tuple[float, float]:
    """(signal, idler) central wavelengths in nm for channel 1..5."""
    if isinstance(channel, bool) or not 1 <= int(channel) <= 5 or int(channel) != channel:
        raise ValueError(f"channel must be in 1..5, got {channel!r}")
    return SIGNAL_WAVELENGTHS[channel - 1], IDLER_WAVELENGTHS[channel - 1]


def wavelength_to_ghz(wavelength_nm: float, reference_nm: float) -> float:
    """Frequency offset (GHz) of ``wavelength_nm`` from ``reference_nm``."""
    return SPEED_OF_LIGHT / wavelength_nm - SPEED_OF_LIGHT / reference_nm


def signal_center_offset(channel: int) -> float:
    """Signal band centre of ``channel`` relative to channel 3 (GHz)."""
    return wavelength_to_ghz(channel_wavelengths(channel)[0], SIGNAL_REFERENCE_NM)


def singles_vs_power(a: float, b: float, P):
    """Count rate ``a P^2 + b P``: pair part quadratic, noise part linear."""
    p = np.asarray(P, dtype=float)
    if np.any(p < 0):
        raise ValueError("pump power must be non-negative")
    r = a * p * p + b * p
    return float(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class SourceParams:
    """Pair-source settings.

    Attributes:
        eta_c: pair probability per pulse slot.
        noise_rate: mean noise photons per arm per train.
        pulse_duration: ps; emission times are uniform within the pulse.
        period: train period in ns.
        modes_per_train: temporal slots per train.
        slot_spacing: ps between slot starts.
        pair_bandwidth: GHz; signal detuning is uniform within +-bw/2.
        a, b: quadratic and linear power-scaling coefficients.
        statistics: ``"poisson"`` or ``"thermal"``.
    """

    eta_c: float = 0.0354
    noise_rate: float = 0.0
    pulse_duration: int = 300
    period: float = 1000.0
    modes_per_train: int = 330
    slot_spacing: int = 300
    pair_bandwidth: float = 6.0
    a: float = 0.0
    b: float = 0.0
    statistics: str = "poisson"

    def __post_init__(self):
        if not 0 <= self.eta_c <= 1:
            raise ValueError("eta_c must lie in [0, 1]")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be non-negative")
        if self.modes_per_train < 1:
            raise ValueError("modes_per_train must be >= 1")
        if self.pulse_duration < 1 or self.slot_spacing < 1:
            raise ValueError("pulse duration and slot spacing must be >= 1 ps")
        if self.a < 0 or self.b < 0:
            raise ValueError("power coefficients must be non-negative")
        if self.statistics not in ("poisson", "thermal"):
            raise ValueError("statistics must be 'poisson' or 'thermal'")
        if self.modes_per_train * self.slot_spacing > self.period * 1e3:
            raise ValueError("temporal modes do not fit in the train period")

    @property
    def train_span_ps(self) -> int:
        return int(self.modes_per_train * self.slot_spacing)


@dataclass
class PhotonEvent:
    trial: int
    temporal_mode: int
    channel: int
    kind: Kind
    pair_id: int
    time: int
    frequency_offset: float


@dataclass
class SourceBlock:
    """Events of one channel over a block of trains, sorted by (trial, time)."""

    signal: np.ndarray
    idler: np.ndarray
    n_pairs: int


def _pair_keys(params: SourceParams, n_slots: int, rng: np.random.Generator):
    """Sorted keys ``slot * pulse_duration + offset``, one per pair.

    The key packs the flat slot index and the intra-pulse emission offset
    (ps), so a single sort orders pairs by slot and then by time.
    """
    mu = params.eta_c
    P = params.pulse_duration
    if mu == 0 or n_slots == 0:
        return np.zeros(0, dtype=np.int64)
    if params.statistics == "poisson":
        n = rng.poisson(mu * n_slots)
        key = rng.integers(0, n_slots * P, size=n, dtype=np.int64)
    else:
        # Thermal: occupied slots ~ Binomial, multiplicity ~ Geometric given >= 1.
        k = rng.binomial(n_slots, mu / (1.0 + mu))
        occ = rng.choice(n_slots, size=k, replace=False)
        mult = rng.geometric(1.0 / (1.0 + mu), size=k)
        slots = np.repeat(occ.astype(np.int64), mult)
        key = slots * P + rng.integers(0, P, size=slots.size)
    key.sort()
    return key


def generate_block(
    params: SourceParams,
    first_trial: int,
    n_trials: int,
    channel: int,
    rng: np.random.Generator,
    slots: Sequence[int] | None = None,
    center_offset: float | None = None,
    pair_id_base: int = 0,
) -> SourceBlock:
    """Generate pairs and noise for ``n_trials`` trains of one channel.

    Args:
        params: source settings.
        first_trial: index of the first train.
        channel: channel label stored on every event.
        rng: generator; the block is a pure function of its state.
        slots: 1-based temporal slots that are pumped (default all).
        center_offset: signal band centre (GHz); defaults to the tabulated
            band for channels 1..5 and 0 otherwise.
        pair_id_base: first pair id; ids are consecutive.
    """
    slots_arr = (
        np.arange(1, params.modes_per_train + 1, dtype=np.int64)
        if slots is None
        else np.unique(np.asarray(slots, dtype=np.int64))
    )
    if slots_arr.size and (slots_arr.min() < 1 or slots_arr.max() > params.modes_per_train):
        raise ValueError("slot index outside 1..modes_per_train")
    if center_offset is None:
        center_offset = signal_center_offset(channel) if 1 <= channel <= 5 else 0.0
    n_slots = int(n_trials) * slots_arr.size
    key = _pair_keys(params, n_slots, rng)
    idx, u = np.divmod(key, params.pulse_duration)
    n = key.size

    trial = first_trial + idx // slots_arr.size
    mode = slots_arr[idx % slots_arr.size]
    # Signal and idler are born together: one intra-pulse offset per pair.
    t = (mode - 1) * params.slot_spacing + u
    eps = rng.uniform(-params.pair_bandwidth / 2, params.pair_bandwidth / 2, size=n)
    ids = pair_id_base + np.arange(n, dtype=np.int64)

    if params.pulse_duration > params.slot_spacing:
        o = np.lexsort((t, trial))
        trial, mode, t, eps = trial[o], mode[o], t[o], eps[o]
    # Composite sort key for merging noise into the sorted pair stream.
    K = np.int64(max(params.train_span_ps + params.pulse_duration, int(params.period * 1e3)) + 1)
    pair_key = (trial - first_trial) * K + t

    arms = []
    for arm in (Arm.SIGNAL, Arm.IDLER):
        sign = 1.0 if arm == Arm.SIGNAL else -1.0  # energy matching mirrors the idler
        k = rng.poisson(params.noise_rate * n_trials) if params.noise_rate > 0 else 0
        ev = np.empty(n + k, dtype=EVENT_DTYPE)
        if k:
            ntr = first_trial + rng.integers(0, n_trials, size=k)
            nt = rng.integers(0, params.train_span_ps, size=k)
            nf = sign * (center_offset + rng.uniform(-params.pair_bandwidth / 2, params.pair_bandwidth / 2, size=k))
            o = np.lexsort((nt, ntr))
            ntr, nt, nf = ntr[o], nt[o], nf[o]
            pos = np.searchsorted(pair_key, (ntr - first_trial) * K + nt, side="right") + np.arange(k)
            is_pair = np.ones(n + k, dtype=bool)
            is_pair[pos] = False
            noise = ev[pos]
            noise["trial"], noise["time"], noise["freq"] = ntr, nt, nf
            noise["mode"] = nt // params.slot_spacing + 1
            noise["kind"], noise["pair_id"] = Kind.NOISE, -1
            ev[pos] = noise
            dst = ev[is_pair]
        else:
            is_pair = slice(None)
            dst = ev
        dst["trial"], dst["mode"], dst["time"] = trial, mode, t
        dst["kind"] = Kind.SIGNAL if arm == Arm.SIGNAL else Kind.IDLER
        dst["pair_id"] = ids
        dst["freq"] = sign * (center_offset + eps)
        if k:
            ev[is_pair] = dst
        ev["channel"] = channel
        ev["arm"] = arm
        arms.append(ev)
    return SourceBlock(arms[0], arms[1], n)


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """Generator for one train, derived from (master_seed, trial)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(0xA11CE, int(trial))))


def generate_train(params: SourceParams, trial: int, channel: int, rng: np.random.Generator) -> list[PhotonEvent]:
    """Events of a single train as ``PhotonEvent`` objects.

    Convenience wrapper over ``generate_block`` for small-scale use; bulk
    simulation works on the structured arrays directly.
    """
    block = generate_block(params, trial, 1, channel, rng, pair_id_base=trial * (1 << 20))
    ev = np.concatenate([block.signal, block.idler])
    ev = ev[np.lexsort((ev["arm"], ev["time"]))]
    return [
        PhotonEvent(
            int(e["trial"]), int(e["mode"]), int(e["channel"]), Kind(int(e["kind"])),
            int(e["pair_id"]), int(e["time"]), float(e["freq"]),
        )
        for e in ev
    ]


def noise_photons_per_train(eta_n_window: float, arm_efficiency: float, window_ps: float, span_ps: float) -> float:
    """Source noise photons per train that give ``eta_n_window`` detected
    noise probability per coincidence window after ``arm_efficiency``."""
    if arm_efficiency <= 0:
        return 0.0
    return eta_n_window / arm_efficiency * span_ps / window_ps


def noise_from_coincidence(p_noise_coinc: float, eta_c: float, eta_i: float) -> float:
    """Noise probability per window implied by an idler-noise coincidence
    probability ``eta_c * eta_i * eta_n``."""
    return p_noise_coinc / (eta_c * eta_i)


__all__ = [
    "Arm",
    "EVENT_DTYPE",
    "IDLER_WAVELENGTHS",
    "Kind",
    "PhotonEvent",
    "SIGNAL_WAVELENGTHS",
    "SourceBlock",
    "SourceParams",
    "channel_wavelengths",
    "generate_block",
    "generate_train",
    "noise_from_coincidence",
    "noise_photons_per_train",
    "signal_center_offset",
    "singles_vs_power",
    "trial_rng",
    "wavelength_to_ghz",
]
