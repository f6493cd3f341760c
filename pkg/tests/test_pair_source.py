import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afcsim.analytics import fit_quadratic_linear
from afcsim.coincidence import PeriodicTrigger, g2_from_tally, threefold
from afcsim.detection import TAG_DTYPE
from afcsim.pair_source import (
    Kind,
    SourceParams,
    channel_wavelengths,
    generate_block,
    generate_train,
    singles_vs_power,
    trial_rng,
    wavelength_to_ghz,
)


def test_channel_wavelengths_table():
    assert channel_wavelengths(1) == (1532.11, 1549.08)
    assert channel_wavelengths(3) == (1531.88, 1549.32)
    assert channel_wavelengths(5) == (1531.65, 1549.56)
    for bad in (0, 6, -1, 2.5):
        with pytest.raises(ValueError):
            channel_wavelengths(bad)


def test_band_offsets_energy_matched():
    # Signal moves down in frequency when the idler moves up.
    for c in range(1, 6):
        s, i = channel_wavelengths(c)
        ds = wavelength_to_ghz(s, 1531.88)
        di = wavelength_to_ghz(i, 1549.32)
        assert ds * di <= 0
        assert abs(ds + di) < 1.0


def test_singles_vs_power():
    assert singles_vs_power(2, 1, 0) == 0
    assert singles_vs_power(2, 1, 3) == 21
    assert singles_vs_power(5, 0, 4) == 4 * singles_vs_power(5, 0, 2)
    with pytest.raises(ValueError):
        singles_vs_power(1, 1, -1)


def test_source_params_validation():
    for bad in [dict(eta_c=1.5), dict(modes_per_train=0), dict(a=-1), dict(noise_rate=-1), dict(statistics="x"),
                dict(modes_per_train=4000)]:
        with pytest.raises(ValueError):
            SourceParams(**bad)


def test_zero_eta_only_noise():
    p = SourceParams(eta_c=0.0, noise_rate=2.0, modes_per_train=10)
    ev = generate_train(p, 3, 2, trial_rng(1, 3))
    assert ev and all(e.kind == Kind.NOISE for e in ev)


def test_generate_train_deterministic():
    p = SourceParams(eta_c=0.2, noise_rate=0.5)
    a = generate_train(p, 7, 1, trial_rng(11, 7))
    b = generate_train(p, 7, 1, trial_rng(11, 7))
    assert a == b
    assert a != generate_train(p, 8, 1, trial_rng(11, 8))


def test_poisson_mean_pairs_per_slot():
    p = SourceParams(eta_c=0.0354, modes_per_train=10)
    n_trains = 1_000_000  # 1e7 slots
    blk = generate_block(p, 0, n_trains, 3, np.random.default_rng(5))
    slots = n_trains * 10
    mean = blk.n_pairs / slots
    sigma = math.sqrt(0.0354 / slots)
    assert abs(mean - 0.0354) < 3 * sigma


def test_thermal_statistics_mean_and_variance():
    mu = 0.2
    p = SourceParams(eta_c=mu, modes_per_train=1, statistics="thermal")
    n = 400_000
    blk = generate_block(p, 0, n, 1, np.random.default_rng(3))
    counts = np.bincount(blk.signal["trial"], minlength=n)
    assert counts.mean() == pytest.approx(mu, abs=4 * math.sqrt(mu * (1 + mu) / n))
    # Bose-Einstein: var = mu + mu^2
    assert counts.var() == pytest.approx(mu + mu * mu, rel=0.05)


def test_heralded_g2_of_raw_source():
    """Perfect detection of the raw source recovers 1 + 1/mu."""
    mu = 0.0354
    p = SourceParams(eta_c=mu, modes_per_train=1)
    n = 2_000_000
    blk = generate_block(p, 0, n, 3, np.random.default_rng(9))

    def tags(ev):
        t = np.zeros(ev.size, TAG_DTYPE)
        t["trial"], t["time"] = ev["trial"], ev["time"]
        return t

    tally = threefold(PeriodicTrigger(n, 150), tags(blk.signal), tags(blk.idler), 300)
    est = g2_from_tally(tally)
    # Threshold detection of every photon: P(click)=1-e^-mu, P(both)=same.
    expected = 1 / (1 - math.exp(-mu))
    assert abs(est.value - expected) < 3 * est.sigma
    assert abs(est.value - (1 + 1 / mu)) < 3 * est.sigma + abs(expected - (1 + 1 / mu))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 0.5), st.floats(0, 3), st.integers(1, 50), st.sampled_from(["poisson", "thermal"]))
def test_pair_bijection_and_time_bounds(seed, mu, noise, modes, stats):
    p = SourceParams(eta_c=mu, noise_rate=noise, modes_per_train=modes, statistics=stats)
    blk = generate_block(p, 100, 50, 2, np.random.default_rng(seed))
    s = blk.signal[blk.signal["kind"] == Kind.SIGNAL]
    i = blk.idler[blk.idler["kind"] == Kind.IDLER]
    assert s.size == i.size == blk.n_pairs
    assert np.unique(s["pair_id"]).size == s.size
    si = s[np.argsort(s["pair_id"])]
    ii = i[np.argsort(i["pair_id"])]
    np.testing.assert_array_equal(si["pair_id"], ii["pair_id"])
    for f in ("trial", "mode", "channel"):
        np.testing.assert_array_equal(si[f], ii[f])
    np.testing.assert_allclose(si["freq"], -ii["freq"])
    for ev in (blk.signal, blk.idler):
        assert np.all(ev["time"] >= 0)
        assert np.all(ev["time"] <= modes * 300 + p.period * 1e3)
        assert np.all((ev["trial"] >= 100) & (ev["trial"] < 150))
        key = ev["trial"] * 10**7 + ev["time"]
        assert np.all(np.diff(key) >= 0)


def test_pumped_slots_only():
    p = SourceParams(eta_c=0.5, modes_per_train=330)
    blk = generate_block(p, 0, 2000, 1, np.random.default_rng(2), slots=[1, 80, 330])
    assert set(np.unique(blk.signal["mode"])) == {1, 80, 330}
    with pytest.raises(ValueError):
        generate_block(p, 0, 1, 1, np.random.default_rng(2), slots=[331])


def test_quadratic_linear_round_trip():
    """Poisson counting data with per-point weights recovers (a, b) to 1%."""
    rng = np.random.default_rng(4)
    a, b, T = 1000.0, 200.0, 1000.0
    P = np.linspace(0.5, 10, 20)
    counts = rng.poisson(singles_vs_power(a, b, P) * T).astype(float)
    fit = fit_quadratic_linear(np.column_stack([P, counts / T]), sigma=np.sqrt(counts) / T)
    assert fit["a"] == pytest.approx(a, rel=0.01)
    assert fit["b"] == pytest.approx(b, rel=0.01)
