"""Experiment configuration: defaults, schema validation, presets and hashing.

A configuration is a single JSON document (see ``config.schema.json``).
Missing keys take the defaults below. Structural problems are caught by the
JSON schema, cross-field constraints by ``semantic_errors``; both report
dotted field paths.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from . import analytics
from .channel_memory import (
    AfcProfile,
    ChannelPlan,
    HoleDecayParams,
    SpontaneousEmission,
    StorageLaw,
    background_factor,
    effective_d0,
    plan_channels,
    recall_efficiency,
    storage_time,
    wavelength_to_frequency,
)
from .detection import DetectorParams, db_to_transmittance, gaussian_gate_acceptance
from .pair_source import SourceParams, noise_from_coincidence, signal_center_offset

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "master_seed": 20240601,
    "cycle": {"prep_ms": 300.0, "wait_ms": 200.0, "storage_ms": 500.0, "cycle_ms": 1000.0},
    "plan": {"comb_spacing_ghz": 15, "chirp_span_ghz": 10, "n_channels": 5, "reference_wavelength_nm": 1531.88},
    "afc": {
        "delta_mhz": 5.0,
        "finesse": 2.0,
        "d_peak": 0.8,
        "d0": 0.1,
        "eta0": 0.005,
        "tau_ns": 48.0,
        "beat_amplitude": 0.0,
        "beat_period_ns": None,
        "trough_fill": True,
        "bypass": False,
    },
    "zeeman": {"I_a": 1.0, "T_a_s": 0.278, "I_b": 0.0, "T_b_s": 10.0},
    "spontaneous": {"rate0_per_ns": 0.0, "lifetime_ms": 10.0, "floor_per_ns": 0.0},
    "source": {
        "eta_c": 0.0354,
        "noise_per_train": 0.0,
        "pulse_ps": 300,
        "period_ns": 1000.0,
        "pair_bandwidth_ghz": 6.0,
        "statistics": "poisson",
        "center_offsets_ghz": None,
    },
    "transmission": {"coupling": 0.7165, "signal_loss_db": 5.5, "idler_loss_db": 3.9},
    "detectors": {
        "signal": {"efficiency": 0.6, "dark_rate_hz": 100.0, "jitter_sigma_ps": 100.0, "dead_time_ns": 50.0, "paralyzable": False},
        "idler": {"efficiency": 0.6, "dark_rate_hz": 100.0, "jitter_sigma_ps": 100.0, "dead_time_ns": 50.0, "paralyzable": False},
    },
    "window_ps": 600,
    "delays_ps": {"signal": 0, "idler": 0},
    "modes": {
        "channels_used": [1, 2, 3, 4, 5],
        "temporal_modes": 330,
        "slot_spacing_ps": 300,
        "analyzed": [1],
        "pump": "analyzed",
        "trains": 100000,
    },
    "crosstalk": None,
    "run": {"workers": 1, "shard_slots": 20_000_000, "sigma": "poisson"},
    "output": {"dir": None, "dump_tags": False},
}

# Idler-noise coincidence probability per 600 ps window at the operating point.
NOISE_COINCIDENCE = 0.86e-9
TARGET_SNR = 730.0
CALIBRATION_DELTA_MHZ = 4.35
# Spontaneous emission at zero wait relative to the residual floor.
SPONTANEOUS_CONTRAST = 1e3

_NON_HASHED = {("run", "workers"), ("output", "dir"), ("output", "dump_tags")}


class ConfigError(ValueError):
    """Invalid configuration. ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p or '<root>'}: {m}" for p, m in self.errors))


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(parts) -> str:
    s = ""
    for p in parts:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else str(p))
    return s


def schema_errors(doc: dict) -> list[tuple[str, str]]:
    v = jsonschema.Draft202012Validator(load_schema())
    return sorted((_path(e.absolute_path), e.message) for e in v.iter_errors(doc))


def semantic_errors(d: dict) -> list[tuple[str, str]]:
    """Cross-field checks that the schema cannot express."""
    errs = []
    c = d["cycle"]
    if not math.isclose(c["prep_ms"] + c["wait_ms"] + c["storage_ms"], c["cycle_ms"], rel_tol=1e-12):
        errs.append(("cycle", "prep_ms + wait_ms + storage_ms must equal cycle_ms"))
    p = d["plan"]
    if p["chirp_span_ghz"] >= p["comb_spacing_ghz"]:
        errs.append(("plan.chirp_span_ghz", "must be smaller than comb_spacing_ghz"))
    m = d["modes"]
    n = p["n_channels"]
    for k, ch in enumerate(m["channels_used"]):
        if ch > n:
            errs.append((f"modes.channels_used[{k}]", f"channel {ch} exceeds plan.n_channels={n}"))
    if len(m["channels_used"]) > n:
        errs.append(("modes.channels_used", "more channels than plan.n_channels"))
    for k, t in enumerate(m["analyzed"]):
        if t > m["temporal_modes"]:
            errs.append((f"modes.analyzed[{k}]", f"slot {t} exceeds modes.temporal_modes"))
    period_ps = d["source"]["period_ns"] * 1e3
    span = m["temporal_modes"] * m["slot_spacing_ps"]
    if span > period_ps:
        errs.append(("modes.temporal_modes", "temporal_modes * slot_spacing_ps exceeds the train period"))
    a = d["afc"]
    if a["d0"] > a["d_peak"]:
        errs.append(("afc.d0", "must not exceed afc.d_peak"))
    if isinstance(a["eta0"], list) and len(a["eta0"]) != n:
        errs.append(("afc.eta0", f"per-channel list must have {n} entries"))
    if a["beat_amplitude"] and a["beat_period_ns"] is None:
        errs.append(("afc.beat_period_ns", "required when beat_amplitude is non-zero"))
    if not a["bypass"]:
        jit = max(d["detectors"]["signal"]["jitter_sigma_ps"], d["detectors"]["idler"]["jitter_sigma_ps"])
        last = span + 1e6 / a["delta_mhz"] + d["source"]["pulse_ps"] + 5 * jit + d["window_ps"]
        if last > period_ps:
            errs.append(("afc.delta_mhz", "echo of the last slot falls outside the train period"))
    off = d["source"]["center_offsets_ghz"]
    if off is not None and len(off) != n:
        errs.append(("source.center_offsets_ghz", f"must have {n} entries"))
    if off is None and n > 5:
        errs.append(("source.center_offsets_ghz", "required when more than 5 channels are planned"))
    x = d["crosstalk"]
    if x is not None:
        arr = np.asarray(x, dtype=float)
        if arr.shape != (n, n):
            errs.append(("crosstalk", f"must be a {n}x{n} matrix"))
        elif not np.allclose(arr.sum(axis=1), 1.0, atol=1e-9):
            errs.append(("crosstalk", "every row must sum to 1"))
    return errs


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration. ``data`` is the full document with defaults."""

    data: dict

    @classmethod
    def from_dict(cls, doc: dict | None = None) -> "ExperimentConfig":
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError([("", "configuration must be a JSON object")])
        errs = schema_errors(doc)
        if errs:
            raise ConfigError(errs)
        full = _merge(DEFAULTS, doc)
        errs = semantic_errors(full)
        if errs:
            raise ConfigError(errs)
        return cls(full)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError([("", f"invalid JSON: {e}")]) from e
        return cls.from_dict(doc)

    def replace(self, **sections) -> "ExperimentConfig":
        """New config with sections deep-merged in, e.g. ``replace(afc={"delta_mhz": 10})``."""
        return ExperimentConfig.from_dict(_merge(self.data, sections))

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    def __getitem__(self, key):
        return self.data[key]

    # -- derived objects -----------------------------------------------------

    def hash(self) -> str:
        d = copy.deepcopy(self.data)
        for sec, key in _NON_HASHED:
            d.get(sec, {}).pop(key, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def plan(self) -> ChannelPlan:
        p = self.data["plan"]
        return plan_channels(
            p["comb_spacing_ghz"], p["chirp_span_ghz"], p["n_channels"],
            wavelength_to_frequency(p["reference_wavelength_nm"]),
        )

    @property
    def profile(self) -> AfcProfile:
        a = self.data["afc"]
        return AfcProfile(a["delta_mhz"], a["finesse"], a["d_peak"], a["d0"], float(self.data["plan"]["chirp_span_ghz"]))

    def storage_law(self, channel: int) -> StorageLaw:
        a = self.data["afc"]
        eta0 = a["eta0"][channel - 1] if isinstance(a["eta0"], list) else a["eta0"]
        return StorageLaw(eta0, a["tau_ns"], a["beat_amplitude"], a["beat_period_ns"])

    @property
    def zeeman(self) -> HoleDecayParams:
        z = self.data["zeeman"]
        return HoleDecayParams(z["I_a"], z["T_a_s"], z["I_b"], z["T_b_s"])

    @property
    def spontaneous(self) -> SpontaneousEmission:
        s = self.data["spontaneous"]
        return SpontaneousEmission(s["rate0_per_ns"], s["lifetime_ms"], s["floor_per_ns"])

    @property
    def d0_effective(self) -> float:
        a = self.data["afc"]
        if not a["trough_fill"]:
            return a["d0"]
        return effective_d0(a["d0"], self.data["cycle"]["wait_ms"] * 1e-3, self.zeeman, a["d_peak"])

    def recall_probability(self, channel: int) -> float:
        """Recall probability of ``channel`` including trough filling."""
        if self.data["afc"]["bypass"]:
            return 1.0
        prof = self.profile
        eta = recall_efficiency(self.storage_law(channel), storage_time(prof))
        return min(1.0, eta * background_factor(prof, self.d0_effective))

    @property
    def source(self) -> SourceParams:
        s, m = self.data["source"], self.data["modes"]
        return SourceParams(
            eta_c=s["eta_c"], noise_rate=s["noise_per_train"], pulse_duration=s["pulse_ps"],
            period=s["period_ns"], modes_per_train=m["temporal_modes"], slot_spacing=m["slot_spacing_ps"],
            pair_bandwidth=s["pair_bandwidth_ghz"], statistics=s["statistics"],
        )

    def center_offset(self, channel: int) -> float:
        off = self.data["source"]["center_offsets_ghz"]
        return off[channel - 1] if off is not None else signal_center_offset(channel)

    def detector(self, arm: str, det_id: int) -> DetectorParams:
        d = self.data["detectors"][arm]
        return DetectorParams(d["efficiency"], d["dark_rate_hz"], d["jitter_sigma_ps"], d["dead_time_ns"], det_id, d["paralyzable"])

    def transmittance(self, arm: str) -> float:
        t = self.data["transmission"]
        return t["coupling"] * db_to_transmittance(t[f"{arm}_loss_db"])

    def chain_efficiency(self, arm: str) -> float:
        """Transmission times detector efficiency (no memory, no gating)."""
        return self.transmittance(arm) * self.data["detectors"][arm]["efficiency"]

    def gate_acceptance(self, arm: str) -> float:
        return gaussian_gate_acceptance(
            self.data["source"]["pulse_ps"], self.data["detectors"][arm]["jitter_sigma_ps"], self.data["window_ps"] // 2
        )

    @property
    def period_ps(self) -> int:
        return int(round(self.data["source"]["period_ns"] * 1e3))

    @property
    def crosstalk(self) -> np.ndarray | None:
        x = self.data["crosstalk"]
        return None if x is None else np.asarray(x, dtype=float)

    # -- analytic expectations -----------------------------------------------

    def noise_per_window(self, arm: str, channel: int) -> float:
        """Expected detected noise probability per coincidence gate."""
        w = self.data["window_ps"] + 1  # inclusive integer window
        det = self.data["detectors"][arm]
        dark = det["dark_rate_hz"] * w * 1e-12
        chain = self.chain_efficiency(arm)
        span = self.data["modes"]["temporal_modes"] * self.data["modes"]["slot_spacing_ps"]
        src = self.data["source"]["noise_per_train"] * w / span
        if arm == "idler":
            return dark + src * chain
        spont = 0.0
        if not self.data["afc"]["bypass"]:
            spont = float(self.spontaneous.rate(self.data["cycle"]["wait_ms"] * 1e-3)) * w * 1e-3 * chain
            src = src * self.recall_probability(channel)
        return dark + spont + src * chain

    def budget(self, channel: int) -> analytics.EfficiencyBudget:
        eta_s = self.recall_probability(channel) * self.chain_efficiency("signal") * self.gate_acceptance("signal")
        eta_i = self.chain_efficiency("idler") * self.gate_acceptance("idler")
        return analytics.EfficiencyBudget(
            self.data["source"]["eta_c"], eta_s, eta_i,
            self.noise_per_window("signal", channel), self.noise_per_window("idler", channel),
        )


def from_json_file(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(path)


def calibrate(cfg: ExperimentConfig, target_snr: float = TARGET_SNR, delta_mhz: float = CALIBRATION_DELTA_MHZ) -> ExperimentConfig:
    """Set noise levels and eta0 to the published operating point.

    * detected signal-arm noise per window equals the value implied by the
      idler-noise coincidence probability (dark counts plus a residual
      spontaneous-emission floor after the memory);
    * source noise photons, per arm, give the same detected signal-arm noise
      when the memory is bypassed;
    * eta0 makes the signal-to-noise ratio ``target_snr`` at ``delta_mhz``.
    """
    d = copy.deepcopy(cfg.data)
    base = ExperimentConfig(d)
    eta_c = d["source"]["eta_c"]
    eta_i = base.chain_efficiency("idler")
    eta_n = noise_from_coincidence(NOISE_COINCIDENCE, eta_c, eta_i)
    w = d["window_ps"] + 1
    dark = d["detectors"]["signal"]["dark_rate_hz"] * w * 1e-12
    chain_s = base.chain_efficiency("signal")
    excess = max(eta_n - dark, 0.0)
    floor = excess / (chain_s * w * 1e-3)
    span = d["modes"]["temporal_modes"] * d["modes"]["slot_spacing_ps"]
    d["spontaneous"]["floor_per_ns"] = floor
    d["spontaneous"]["rate0_per_ns"] = floor * SPONTANEOUS_CONTRAST
    d["source"]["noise_per_train"] = excess / chain_s * span / w

    probe = ExperimentConfig(_merge(d, {"afc": {"delta_mhz": delta_mhz, "eta0": 1.0, "bypass": False}}))
    # SNR = c*eta0 / (a + b*eta0) with signal c and noise a + b*eta0.
    fill = probe.recall_probability(1)  # eta0 = 1 here
    acc = probe.gate_acceptance("signal")
    c = fill * chain_s * acc
    a = dark + float(probe.spontaneous.rate(d["cycle"]["wait_ms"] * 1e-3)) * w * 1e-3 * chain_s
    b = d["source"]["noise_per_train"] * w / span * fill * chain_s
    eta0 = target_snr * a / (c - target_snr * b)
    if not 0 < eta0 <= 1:
        raise ConfigError([("afc.eta0", f"calibration gives eta0={eta0:.4g} outside (0, 1]")])
    d["afc"]["eta0"] = eta0
    return ExperimentConfig.from_dict(d)


def calibrated_config(**overrides) -> ExperimentConfig:
    """Calibrated operating point (see ``calibrate``) with optional overrides."""
    cfg = calibrate(ExperimentConfig.from_dict({}))
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {
    "default": lambda: ExperimentConfig.from_dict({}),
    "calibrated": calibrated_config,
}


__all__ = [
    "ConfigError",
    "DEFAULTS",
    "ExperimentConfig",
    "PRESETS",
    "calibrate",
    "load_schema",
    "calibrated_config",
    "schema_errors",
    "semantic_errors",
]
