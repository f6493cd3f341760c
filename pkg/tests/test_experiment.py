import math

import numpy as np
import pytest

from afcsim.analytics import fit_exponential
from afcsim.config import ConfigError, ExperimentConfig, calibrated_config
from afcsim.experiment import (
    mode_from_index,
    mode_index,
    noise_vs_wait,
    run,
    shard_layout,
    sweep_rows,
    sweep_storage_time,
)


def small(**over):
    base = {"modes": {"channels_used": [1, 2], "trains": 20_000}, "run": {"shard_slots": 10_000}}
    cfg = ExperimentConfig.from_dict(base)
    return cfg.replace(**over) if over else cfg


def test_mode_index_examples_and_round_trip():
    assert mode_index(1, 1) == 1
    assert mode_index(5, 330) == 1650
    assert mode_index(2, 1) == 331
    seen = [mode_index(*mode_from_index(k)) for k in range(1, 1651)]
    assert seen == list(range(1, 1651))
    for bad in [(0, 1), (6, 1), (1, 0), (1, 331)]:
        with pytest.raises(ValueError):
            mode_index(*bad)
    with pytest.raises(ValueError):
        mode_from_index(1651)


def test_shard_layout_depends_on_config_only():
    cfg = small()
    lay = shard_layout(cfg)
    assert sum(n for _, n in lay) == 20_000
    assert lay[0] == (0, 5000)
    assert shard_layout(cfg.replace(run={"workers": 8})) == lay


def test_report_reproducible_across_workers():
    cfg = small()
    a = run(cfg).to_bytes()
    assert run(cfg).to_bytes() == a
    for w in (2, 8):
        assert run(cfg.replace(run={"workers": w})).to_bytes() == a
    assert run(cfg.replace(master_seed=7)).to_bytes() != a


def test_routing_conservation():
    rep = run(small(afc={"eta0": 0.5}))
    for c, r in rep.data["routing"].items():
        assert r["recalled"] + r["transmitted"] + r["absorbed"] == r["generated"]
        assert r["recalled"] > 0 and r["absorbed"] > 0


def test_zero_eta0_gives_undefined_entries(tmp_path):
    rep = run(small(afc={"eta0": 0.0}))
    assert all(r["recalled"] == 0 for r in rep.data["routing"].values())
    assert rep.has_undefined
    assert rep.data["g2"]["entries"][0][0] is None
    paths = rep.write(tmp_path)
    assert "undefined" in open(paths["g2"]).read()


def test_recalled_timing():
    """Mean arrival offset of recalled tags equals the storage delay."""
    cfg = calibrated_config(modes={"channels_used": [1], "trains": 400_000}, afc={"delta_mhz": 100})
    rep = run(cfg)
    t = rep.data["timing"][0]
    assert rep.data["metadata"]["storage_delay_ps"] == 10_000
    # Uniform emission over the 300 ps pulse plus 100 ps jitter.
    spread = math.sqrt(300**2 / 12 + 100**2)
    assert abs(t["mean_offset_ps"] - t["expected_offset_ps"]) < 3 * spread / math.sqrt(t["n"])
    assert t["std_offset_ps"] == pytest.approx(spread, rel=0.1)


def test_cauchy_schwarz_witness():
    """A correlated channel well above SNR 20 violates the classical bound g2 <= 2."""
    cfg = calibrated_config(modes={"channels_used": [3], "trains": 2_000_000}, afc={"delta_mhz": 100})
    rep = run(cfg)
    assert rep.data["efficiency"]["3"]["snr_model"] > 20
    e = rep.data["g2"]["entries"][0][0]
    assert e["value"] - 3 * e["sigma"] > 2
    assert abs(e["value"] - rep.data["predicted"]["diagonal"][0]) < 3 * e["sigma"]


def test_bypass_source_level_g2():
    cfg = calibrated_config(modes={"trains": 400_000}, afc={"bypass": True})
    rep = run(cfg)
    s = rep.summary
    assert s["diagonal"]["n"] == 5
    assert abs(s["diagonal"]["mean"] - rep.data["predicted"]["diagonal_mean"]) < 3 * s["diagonal"]["sem"]
    assert abs(s["off_diagonal"]["mean"] - 1) < 3 * s["off_diagonal"]["sem"]


def test_report_contents(tmp_path):
    rep = run(small())
    md = rep.data["metadata"]
    assert md["config_hash"] == small().hash()
    assert md["storage_time_ns"] == pytest.approx(200)
    assert rep.data["modes"][1] == {"label": "R331", "channel": 2, "temporal": 1, "index": 331}
    paths = rep.write(tmp_path)
    assert open(paths["report"], "rb").read() == rep.to_bytes()
    assert open(paths["g2"]).readline().strip() == ",I1,I331"


def test_keep_tags_round_trip():
    rep = run(small(), keep_tags=True)
    tags = rep.tags
    assert tags is not None and tags.size > 0
    assert set(np.unique(tags["detector"])) <= {1, 2, 101, 102}


def test_sweep_isolates_failing_points():
    cfg = small(modes={"channels_used": [1], "trains": 5000})
    sw = sweep_storage_time(cfg, [200, 0.9, 100], trains=5000, reference_trains=5000)
    assert "error" in sw["points"][1] and "ConfigError" in sw["points"][1]["error"]
    assert "channels" in sw["points"][0] and "channels" in sw["points"][2]
    rows = sweep_rows(sw)
    assert rows[0][0] == "delta_mhz" and len(rows) == 4


def test_sweep_storage_times():
    cfg = small(modes={"channels_used": [1], "trains": 2000})
    sw = sweep_storage_time(cfg, [200, 100, 20, 10, 5], trains=2000, reference_trains=2000)
    assert [p["storage_time_ns"] for p in sw["points"]] == pytest.approx([5, 10, 50, 100, 200])


def test_efficiency_ratio_at_tau():
    """The modelled recall drops by 1/e between T and T + 48 ns."""
    cfg = ExperimentConfig.from_dict({})
    a = cfg.replace(afc={"delta_mhz": 1e3 / 50}).recall_probability(1)
    b = cfg.replace(afc={"delta_mhz": 1e3 / 98}).recall_probability(1)
    assert b / a == pytest.approx(math.exp(-1), rel=1e-12)


def test_noise_vs_wait():
    cfg = calibrated_config()
    waits = np.linspace(0, 0.05, 26)
    rows = noise_vs_wait(cfg, waits)
    exp = [r["expected"] for r in rows]
    assert exp[0] == max(exp)
    assert np.all(np.diff(exp) < 0)
    with pytest.raises(ValueError):
        noise_vs_wait(cfg, [-1])
    # Synthetic Poisson counts: the excited-state lifetime is recovered.
    n = 10**9
    rows = noise_vs_wait(cfg, waits, trains=n, rng=np.random.default_rng(1))
    chain = cfg.chain_efficiency("signal")
    bg = (cfg["spontaneous"]["floor_per_ns"] * chain + cfg["detectors"]["signal"]["dark_rate_hz"] * 1e-9) * n
    y = np.array([r["counts"] for r in rows]) - bg
    sig = np.array([r["sigma"] for r in rows])
    keep = y > 5 * sig
    fit = fit_exponential(np.column_stack([waits[keep] * 1e3, y[keep]]), sigma=sig[keep])
    assert fit["tau"] == pytest.approx(cfg["spontaneous"]["lifetime_ms"], rel=0.05)


def test_invalid_config_never_runs():
    with pytest.raises(ConfigError):
        run(small(afc={"delta_mhz": 0.5}))
    with pytest.raises(ValueError):
        run(small(), trains=0)
