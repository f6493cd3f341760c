"""End-to-end runner: source -> memory -> leakage -> loss -> detection -> g2.

Trains are the trial unit. A run is split into shards of a fixed number of
trains derived from the configuration only; each shard draws from its own
``SeedSequence(master_seed, spawn_key=(shard,))`` and returns integer
tallies. Shard results are summed in shard order, so reports are identical
for any worker count.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import analytics
from .channel_memory import Outcome, poisson_times, route_batch, storage_delay_ps, storage_time
from .coincidence import G2Matrix, g2_matrix_from_counts, hit_trials, pairwise_tallies
from .config import SCHEMA_VERSION, ExperimentConfig
from .detection import TAG_DTYPE, apply_loss, detect, merge_tags
from .pair_source import EVENT_DTYPE, Kind, generate_block

IDLER_DETECTOR_BASE = 100


def mode_index(channel: int, temporal: int, n_channels: int = 5, n_temporal: int = 330) -> int:
    """Row-major linear index (1-based) of spectro-temporal mode (channel, temporal)."""
    if not (1 <= channel <= n_channels and 1 <= temporal <= n_temporal):
        raise ValueError(f"mode ({channel}, {temporal}) outside {n_channels}x{n_temporal}")
    return (channel - 1) * n_temporal + temporal


def mode_from_index(index: int, n_channels: int = 5, n_temporal: int = 330) -> tuple[int, int]:
    """Inverse of ``mode_index``."""
    if not 1 <= index <= n_channels * n_temporal:
        raise ValueError(f"index {index} outside 1..{n_channels * n_temporal}")
    c, t = divmod(index - 1, n_temporal)
    return c + 1, t + 1


# ---------------------------------------------------------------------------
# Sharding
# ---------------------------------------------------------------------------


def shard_layout(cfg: ExperimentConfig, trains: int | None = None) -> list[tuple[int, int]]:
    """``(first_trial, n_trains)`` per shard; depends on the config only."""
    m = cfg["modes"]
    trains = m["trains"] if trains is None else trains
    pumped = len(m["analyzed"]) if m["pump"] == "analyzed" else m["temporal_modes"]
    per_train = max(1, len(m["channels_used"]) * pumped)
    size = max(1, cfg["run"]["shard_slots"] // per_train)
    return [(s, min(size, trains - s)) for s in range(0, trains, size)]


def _signal_ref(cfg: ExperimentConfig, slot: int, delay: int) -> int:
    s = cfg["modes"]["slot_spacing_ps"]
    return (slot - 1) * s + cfg["source"]["pulse_ps"] // 2 + delay + cfg["delays_ps"]["signal"]


def _idler_ref(cfg: ExperimentConfig, slot: int) -> int:
    s = cfg["modes"]["slot_spacing_ps"]
    return (slot - 1) * s + cfg["source"]["pulse_ps"] // 2 + cfg["delays_ps"]["idler"]


def _simulate_shard(args) -> dict:
    data, shard, first, n, keep_tags = args
    cfg = ExperimentConfig(data)
    rng = np.random.default_rng(np.random.SeedSequence(cfg["master_seed"], spawn_key=(shard,)))
    m = cfg["modes"]
    channels = list(m["channels_used"])
    analyzed = sorted(m["analyzed"])
    pumped = analyzed if m["pump"] == "analyzed" else None
    bypass = cfg["afc"]["bypass"]
    plan = cfg.plan
    delay = 0 if bypass else storage_delay_ps(cfg.profile)
    eta = np.zeros(plan.n_channels + 1)
    for c in range(1, plan.n_channels + 1):
        eta[c] = cfg.recall_probability(c)
    src = cfg.source
    period = cfg.period_ps
    tol = cfg["window_ps"] // 2

    routing = np.zeros((len(channels), 4), dtype=np.int64)  # generated, recalled, transmitted, absorbed
    sig_parts, idler_by_ch, pairs = [], {}, 0
    for k, c in enumerate(channels):
        base = (shard << 40) | (c << 34)
        blk = generate_block(src, first, n, c, rng, slots=pumped, center_offset=cfg.center_offset(c), pair_id_base=base)
        pairs += blk.n_pairs
        is_sig = blk.signal["kind"] == Kind.SIGNAL
        routing[k, 0] = int(is_sig.sum())
        if bypass:
            routing[k, 2] = routing[k, 0]
            out = blk.signal
        else:
            out, outcome = route_batch(blk.signal, plan, eta, delay, rng)
            cnt = np.bincount(outcome[is_sig], minlength=3)
            routing[k, 1] = cnt[Outcome.RECALLED]
            routing[k, 2] = cnt[Outcome.TRANSMITTED]
            routing[k, 3] = cnt[Outcome.ABSORBED]
        sig_parts.append(out)
        idler_by_ch[c] = blk.idler
    sig = np.concatenate(sig_parts) if sig_parts else np.zeros(0, EVENT_DTYPE)

    xt = cfg.crosstalk
    if xt is not None and sig.size:
        cum = np.cumsum(xt, axis=1)
        cum[:, -1] = 1.0
        u = rng.random(sig.size)
        rows = cum[sig["channel"].astype(np.int64) - 1]
        sig["channel"] = (u[:, None] >= rows).sum(axis=1) + 1

    spont_rate = 0.0 if bypass else float(cfg.spontaneous.rate(cfg["cycle"]["wait_ms"] * 1e-3))
    t_sig = cfg.transmittance("signal")
    t_idl = cfg.transmittance("idler")
    s_hits, i_hits, timing = [], [], []
    tags_out = []
    for c in channels:
        ev = sig[sig["channel"] == c]
        if spont_rate > 0:
            tr, tt = poisson_times(rng, spont_rate * period * 1e-3, first, n, period)
            sp = np.zeros(tr.size, dtype=EVENT_DTYPE)
            sp["trial"], sp["time"], sp["channel"], sp["kind"], sp["pair_id"] = tr, tt, c, Kind.NOISE, -1
            ev = np.concatenate([ev, sp])
        ev = apply_loss(ev, t_sig, rng)
        tags = detect(ev, cfg.detector("signal", c), rng, n, first, period)
        tags["time"] += cfg["delays_ps"]["signal"]
        for slot in analyzed:
            ref = _signal_ref(cfg, slot, delay)
            s_hits.append(hit_trials(tags, ref, tol))
            sel = np.abs(tags["time"] - ref) <= tol
            off = tags["time"][sel] - ((slot - 1) * m["slot_spacing_ps"] + cfg["delays_ps"]["signal"])
            timing.append((int(off.size), int(off.sum()), int((off * off).sum())))
        if keep_tags:
            tags_out.append(tags)
    for c in channels:
        ev = apply_loss(idler_by_ch[c], t_idl, rng)
        tags = detect(ev, cfg.detector("idler", IDLER_DETECTOR_BASE + c), rng, n, first, period)
        tags["time"] += cfg["delays_ps"]["idler"]
        for slot in analyzed:
            i_hits.append(hit_trials(tags, _idler_ref(cfg, slot), tol))
        if keep_tags:
            tags_out.append(tags)

    c_s, c_i, c_si = pairwise_tallies(s_hits, i_hits)
    return {
        "c_s": c_s,
        "c_i": c_i,
        "c_si": c_si,
        "routing": routing,
        "timing": np.array(timing, dtype=np.int64).reshape(-1, 3),
        "pairs": pairs,
        "tags": merge_tags(*tags_out) if keep_tags else None,
    }


def _run_shards(cfg: ExperimentConfig, layout, keep_tags: bool = False):
    jobs = [(cfg.data, k, first, n, keep_tags) for k, (first, n) in enumerate(layout)]
    workers = min(cfg["run"]["workers"], len(jobs)) or 1
    if workers == 1:
        results = map(_simulate_shard, jobs)
        return _reduce(results, keep_tags)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return _reduce(ex.map(_simulate_shard, jobs), keep_tags)


def _reduce(results, keep_tags):
    total, tags = None, []
    for r in results:
        if keep_tags:
            tags.append(r.pop("tags"))
        else:
            r.pop("tags")
        if total is None:
            total = r
        else:
            for k in total:
                total[k] = total[k] + r[k]
    if keep_tags:
        total["tags"] = np.concatenate(tags) if tags else np.zeros(0, TAG_DTYPE)
    return total


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """Result of ``run``. ``data`` is JSON-serialisable; ``matrix`` the g2 matrix."""

    data: dict
    matrix: G2Matrix
    tags: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1, allow_nan=False) + "\n"

    def to_bytes(self) -> bytes:
        return self.to_json().encode()

    @property
    def summary(self) -> dict:
        return self.data["summary"]

    @property
    def has_undefined(self) -> bool:
        return self.data["summary"]["undefined_entries"] > 0

    def write(self, outdir) -> dict:
        os.makedirs(outdir, exist_ok=True)
        paths = {
            "report": os.path.join(outdir, "report.json"),
            "g2": os.path.join(outdir, "g2_matrix.csv"),
            "counts": os.path.join(outdir, "g2_counts.csv"),
        }
        with open(paths["report"], "w") as fh:
            fh.write(self.to_json())
        self.matrix.to_csv(paths["g2"])
        self.matrix.counts_to_csv(paths["counts"])
        return paths


def _clean(x):
    """JSON-safe float (None for nan/inf)."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _efficiency(c_si: int, c_s: int, c_i: int, m: int):
    """Accidental-subtracted heralded efficiency and its Poisson error."""
    if c_i == 0:
        return None, None
    val = (c_si - c_s * c_i / m) / c_i
    sig = math.sqrt(max(c_si, 1)) / c_i
    return val, sig


def run(config: ExperimentConfig, trains: int | None = None, keep_tags: bool = False) -> RunReport:
    """Simulate ``trains`` trains (default ``modes.trains``) and analyse them.

    Raises:
        ConfigError: via config construction; never emits partial results.
    """
    cfg = config
    m = cfg["modes"]
    trains = m["trains"] if trains is None else int(trains)
    if trains < 1:
        raise ValueError("trains must be >= 1")
    layout = shard_layout(cfg, trains)
    tot = _run_shards(cfg, layout, keep_tags)

    channels = list(m["channels_used"])
    analyzed = sorted(m["analyzed"])
    M = m["temporal_modes"]
    N = cfg["plan"]["n_channels"]
    modes = [(c, k) for c in channels for k in analyzed]
    idx = [mode_index(c, k, N, M) for c, k in modes]
    rows = [f"R{i}" for i in idx]
    cols = [f"I{i}" for i in idx]
    matrix = g2_matrix_from_counts(rows, cols, tot["c_s"], tot["c_i"], tot["c_si"], trains, cfg["window_ps"] // 2,
                                   cfg["run"]["sigma"], rng=np.random.default_rng(cfg["master_seed"]))

    bypass = cfg["afc"]["bypass"]
    prof = cfg.profile
    T = 0.0 if bypass else storage_time(prof)
    delay = 0 if bypass else storage_delay_ps(prof)

    # Analytic expectation per mode pair.
    budgets = {c: cfg.budget(c) for c in channels}
    per_mode = [budgets[c] for c, _ in modes]
    xt = cfg.crosstalk
    L = None
    if xt is not None:
        sub = xt[np.ix_([c - 1 for c in channels], [c - 1 for c in channels])]
        L = np.kron(sub, np.eye(len(analyzed)))
    pred = analytics.predicted_g2_matrix(
        [b.eta_c for b in per_mode], [b.eta_s for b in per_mode], [b.eta_i for b in per_mode],
        [b.eta_n for b in per_mode], [b.eta_n_idler for b in per_mode], L,
    )

    entries = []
    for r in range(len(rows)):
        row = []
        for i in range(len(cols)):
            e = matrix.entries[r][i]
            row.append(None if e is None else {"value": e.value, "sigma": e.sigma})
        entries.append(row)
    summ = matrix.summary()
    undefined = sum(e is None for row in matrix.entries for e in row)
    diag_pred = [float(pred[k, k]) for k in range(len(rows))]
    off_pred = [float(pred[r, i]) for r in range(len(rows)) for i in range(len(cols)) if r != i]

    routing = {}
    eff = {}
    for k, c in enumerate(channels):
        g, rc, tr, ab = (int(v) for v in tot["routing"][k])
        routing[str(c)] = {"generated": g, "recalled": rc, "transmitted": tr, "absorbed": ab}
        sl = [j for j, (cc, _) in enumerate(modes) if cc == c]
        c_si = int(sum(tot["c_si"][j, j] for j in sl))
        c_s = int(sum(tot["c_s"][j] for j in sl))
        c_i = int(sum(tot["c_i"][j] for j in sl))
        val, sig = _efficiency(c_si, c_s, c_i, trains)
        b = budgets[c]
        eff[str(c)] = {
            "recall_model": cfg.recall_probability(c),
            "eta_s_model": b.eta_s,
            "eta_s_measured": _clean(val),
            "eta_s_sigma": _clean(sig),
            "snr_model": _clean(b.snr),
        }

    timing = []
    for j, (c, k) in enumerate(modes):
        cnt, s1, s2 = (int(v) for v in tot["timing"][j])
        mean = s1 / cnt if cnt else None
        std = math.sqrt(max(s2 / cnt - mean * mean, 0.0)) if cnt else None
        timing.append({
            "label": rows[j], "n": cnt,
            "mean_offset_ps": mean, "std_offset_ps": std,
            "expected_offset_ps": delay + (cfg["source"]["pulse_ps"] - 1) / 2,
        })

    data = {
        "metadata": {
            "config_hash": cfg.hash(),
            "master_seed": cfg["master_seed"],
            "version": __version__,
            "schema_version": SCHEMA_VERSION,
            "trains": trains,
            "shards": len(layout),
            "storage_time_ns": T,
            "storage_delay_ps": delay,
            "bypass": bypass,
            "pairs_generated": int(tot["pairs"]),
        },
        "modes": [{"label": rows[j], "channel": c, "temporal": k, "index": idx[j]} for j, (c, k) in enumerate(modes)],
        "tallies": {
            "m": trains,
            "window_ps": cfg["window_ps"],
            "C_s": [int(v) for v in tot["c_s"]],
            "C_i": [int(v) for v in tot["c_i"]],
            "C_si": [[int(v) for v in row] for row in tot["c_si"]],
        },
        "g2": {"rows": rows, "cols": cols, "entries": entries},
        "predicted": {
            "diagonal": diag_pred,
            "diagonal_mean": float(np.mean(diag_pred)),
            "off_diagonal_mean": float(np.mean(off_pred)) if off_pred else None,
        },
        "summary": {**summ, "undefined_entries": undefined},
        "routing": routing,
        "efficiency": eff,
        "timing": timing,
    }
    return RunReport(data, matrix, tot.get("tags"))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_storage_time(config: ExperimentConfig, deltas, trains=None, reference_trains: int | None = None) -> dict:
    """Run once per tooth spacing and tabulate efficiency and diagonal g2.

    Efficiency is the measured heralded signal efficiency divided by that of
    a memory-bypass reference run. A failing point is recorded with its error
    and the sweep continues.
    """
    deltas = list(deltas)
    if trains is None or np.isscalar(trains):
        trains = [trains] * len(deltas)
    if len(trains) != len(deltas):
        raise ValueError("trains must match deltas")
    channels = list(config["modes"]["channels_used"])
    ref_report = run(config.replace(afc={"bypass": True}), reference_trains)
    ref = ref_report.data["efficiency"]
    points = []
    for d, n in zip(deltas, trains):
        point = {"delta_mhz": d, "storage_time_ns": 1e3 / d}
        try:
            rep = run(config.replace(afc={"delta_mhz": d, "bypass": False}), n)
        except Exception as e:  # isolate per-point failures
            point["error"] = f"{type(e).__name__}: {e}"
            points.append(point)
            continue
        point["trains"] = rep.data["metadata"]["trains"]
        point["channels"] = {}
        for k, c in enumerate(channels):
            eff = rep.data["efficiency"][str(c)]
            r0, s0 = ref[str(c)]["eta_s_measured"], ref[str(c)]["eta_s_sigma"]
            e1, s1 = eff["eta_s_measured"], eff["eta_s_sigma"]
            ratio = sig = None
            if r0 and e1 is not None:
                ratio = e1 / r0
                sig = abs(ratio) * math.sqrt((s1 / e1) ** 2 + (s0 / r0) ** 2) if e1 else s1 / r0
            j = [i for i, md in enumerate(rep.data["modes"]) if md["channel"] == c][0]
            g = rep.data["g2"]["entries"][j][j]
            point["channels"][str(c)] = {
                "efficiency": _clean(ratio),
                "efficiency_sigma": _clean(sig),
                "efficiency_model": eff["recall_model"],
                "g2": None if g is None else g["value"],
                "g2_sigma": None if g is None else g["sigma"],
                "g2_model": rep.data["predicted"]["diagonal"][j],
            }
        points.append(point)

    analysis = {}
    for c in channels:
        ok = [p for p in points if "error" not in p and p["channels"][str(c)]["efficiency"] is not None
              and p["channels"][str(c)]["efficiency"] > 0]
        res = {}
        if len(ok) >= 4:
            samples = [(p["storage_time_ns"], p["channels"][str(c)]["efficiency"]) for p in ok]
            sig = [p["channels"][str(c)]["efficiency_sigma"] for p in ok]
            try:
                fit = analytics.fit_exponential(samples, sigma=sig)
                res["tau_ns"] = fit["tau"]
                res["tau_sigma"] = float(fit.stderr[1])
                res["eta0"] = fit["eta0"]
            except (analytics.FitError, ValueError) as e:
                res["fit_error"] = str(e)
        gs = [p for p in points if "error" not in p and p["channels"][str(c)]["g2"] is not None]
        if len(gs) >= 2:
            ft = analytics.chi2_flatness([p["channels"][str(c)]["g2"] for p in gs],
                                         [p["channels"][str(c)]["g2_sigma"] for p in gs])
            res["flatness"] = {"chi2": ft.chi2, "dof": ft.dof, "p_value": ft.p_value,
                               "weighted_mean": ft.weighted_mean, "passed": ft.passed}
        effs = [p["channels"][str(c)]["efficiency"] for p in ok]
        if effs:
            res["efficiency_span"] = max(effs) / min(effs)
        analysis[str(c)] = res
    return {
        "metadata": {"config_hash": config.hash(), "version": __version__, "reference_trains": ref_report.data["metadata"]["trains"]},
        "reference": ref,
        "points": points,
        "analysis": analysis,
    }


def sweep_rows(sweep: dict) -> list[list]:
    """Flatten a sweep into CSV rows."""
    out = [["delta_mhz", "storage_time_ns", "channel", "efficiency", "efficiency_sigma", "efficiency_model",
            "g2", "g2_sigma", "g2_model", "error"]]
    for p in sweep["points"]:
        if "error" in p:
            out.append([p["delta_mhz"], p["storage_time_ns"], "", "", "", "", "", "", "", p["error"]])
            continue
        for c, v in p["channels"].items():
            out.append([p["delta_mhz"], p["storage_time_ns"], c, v["efficiency"], v["efficiency_sigma"],
                        v["efficiency_model"], v["g2"], v["g2_sigma"], v["g2_model"], ""])
    return out


def noise_vs_wait(config: ExperimentConfig, waits_s, trains: int | None = None, rng: np.random.Generator | None = None):
    """Detected spontaneous-emission counts in a 1 ns window versus wait time.

    Expected counts accumulate over ``trains`` trains (default
    ``modes.trains``) and include dark counts. With ``rng`` a Poisson sample
    and its standard deviation are added.
    """
    w = np.asarray(waits_s, dtype=float)
    if np.any(w < 0):
        raise ValueError("wait values must be non-negative")
    trains = config["modes"]["trains"] if trains is None else trains
    chain = config.chain_efficiency("signal")
    dark = config["detectors"]["signal"]["dark_rate_hz"] * 1e-9
    expected = (config.spontaneous.rate(w) * chain + dark) * trains
    rows = []
    counts = rng.poisson(expected) if rng is not None else None
    for k, wait in enumerate(w):
        row = {"wait_s": float(wait), "expected": float(np.atleast_1d(expected)[k])}
        if counts is not None:
            c = int(np.atleast_1d(counts)[k])
            row["counts"] = c
            row["sigma"] = math.sqrt(c)
        rows.append(row)
    return rows


__all__ = [
    "RunReport",
    "mode_from_index",
    "mode_index",
    "noise_vs_wait",
    "run",
    "shard_layout",
    "sweep_rows",
    "sweep_storage_time",
]
