"""Tests for the five-level classical rate dynamics."""

import math

import numpy as np
import pytest

from v1dyn.model import (
    GaussianPulse,
    DeltaPulse,
    LevelPopulations,
    PulseSequence,
    RateSet,
    V1_RATES,
    Wait,
)
from v1dyn.ratedyn import (
    alpha_prefactor,
    apply_delta_pulse,
    build_generator,
    cw_steady_state,
    default_tau_grid,
    emission_integral,
    propagate,
    pulse_train_steady_state_analytic,
    pulse_train_steady_state_simulated,
    resonant_readout_ratio,
    saturation_emission_rate,
    simulate_sequence,
    two_pulse_signal,
    write_steady_state_json,
    write_trace_csv,
)


def random_rate_set(rng, tau_ms_factor=(20.0, 60.0)):
    """Random physically sensible rate set with tau_ms well above tau_e."""
    gamma_r = 1.0 / rng.uniform(5.0, 15.0)
    gamma1 = 1.0 / rng.uniform(8.0, 40.0)
    gamma2 = 1.0 / rng.uniform(8.0, 40.0)
    tau_e_max = 1.0 / (gamma_r + min(gamma1, gamma2))
    tau_ms = rng.uniform(*tau_ms_factor) * tau_e_max
    gamma3 = rng.uniform(0.5, 1.5) / tau_ms
    gamma4 = 2.0 / tau_ms - gamma3
    return RateSet(gamma_r, 0.0, gamma1, gamma2, gamma3, gamma4, split_known=False)


def ground_split(p):
    return p["g1"] / (p["g1"] + p["g2"])


class TestGenerator:
    def test_columns_sum_to_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            rates = random_rate_set(rng)
            pumps = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0))
            G = build_generator(rates, pumps)
            assert np.abs(G.sum(axis=0)).max() < 1e-15

    def test_structure(self):
        G = build_generator(V1_RATES, (0.3, 0.0))
        # pump feeds g1 -> e1 only, emission feeds e_i -> g_i
        assert G[2, 0] == 0.3
        assert G[3, 1] == 0.0
        assert G[0, 2] == pytest.approx(V1_RATES.gamma_r)
        assert G[4, 2] == pytest.approx(V1_RATES.gamma1)
        assert G[4, 3] == pytest.approx(V1_RATES.gamma2)
        # merged metastable state returns at half rate per ground state
        assert G[0, 4] == pytest.approx(V1_RATES.gamma3 / 2.0)
        assert G[1, 4] == pytest.approx(V1_RATES.gamma4 / 2.0)

    def test_rejects_negative_pump(self):
        with pytest.raises(ValueError):
            build_generator(V1_RATES, (-0.1, 0.0))


class TestPropagate:
    def test_conserves_probability_and_positivity(self):
        # 100 random rate sets, random starts, several horizons
        rng = np.random.default_rng(3)
        for _ in range(100):
            rates = random_rate_set(rng)
            G = build_generator(rates, (rng.uniform(0, 0.2), rng.uniform(0, 0.2)))
            p0 = LevelPopulations(rng.dirichlet(np.ones(5)))
            for t in (0.5, 5.0, 50.0, 500.0):
                p = propagate(p0, G, t)
                assert abs(p.values.sum() - 1.0) < 1e-9
                assert p.values.min() > -1e-12

    def test_excited_state_decays_at_total_rate(self):
        # n_e1(t) = exp(-t (gamma_r + Gamma_nr + gamma1)) under free decay
        G = build_generator(V1_RATES)
        p = propagate(LevelPopulations.pure("e1"), G, 5.0)
        assert p["e1"] == pytest.approx(math.exp(-5.0 / V1_RATES.tau_e1), rel=1e-10)
        assert p["e2"] == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            propagate(LevelPopulations.pure("g1"), build_generator(V1_RATES), -1.0)
        with pytest.raises(ValueError):
            propagate(LevelPopulations.pure("g1"), np.eye(4), 1.0)


class TestDeltaPulse:
    def test_moves_ground_fraction(self):
        p0 = LevelPopulations(np.array([0.4, 0.3, 0.0, 0.0, 0.3]))
        p = apply_delta_pulse(p0, 0.25)
        assert p["g1"] == pytest.approx(0.3)
        assert p["e1"] == pytest.approx(0.1)
        assert p["g2"] == pytest.approx(0.225)
        assert p["e2"] == pytest.approx(0.075)
        assert p["d"] == pytest.approx(0.3)

    def test_rejects_out_of_range(self):
        p = LevelPopulations.depolarized_ground()
        for bad in (-0.1, 1.1):
            with pytest.raises(ValueError):
                apply_delta_pulse(p, bad)


class TestPulseTrain:
    def test_v1_lifetimes(self):
        assert V1_RATES.tau_e1 == pytest.approx(5.0294, abs=1e-4)
        assert V1_RATES.tau_e2 == pytest.approx(6.2542, abs=1e-4)
        assert V1_RATES.tau_ms == pytest.approx(240.0, rel=1e-12)

    def test_analytic_split_v1(self):
        n_g1, n_g2 = pulse_train_steady_state_analytic(V1_RATES)
        assert n_g1 + n_g2 == pytest.approx(1.0, abs=1e-15)
        assert n_g1 == pytest.approx(0.4088176352705412, rel=1e-12)

    def test_simulated_split_matches_closed_form(self):
        # the normalized ground split of the train fixed point is exact
        for P_e in (0.25, 0.608, 0.9):
            p = pulse_train_steady_state_simulated(V1_RATES, P_e, t_p=1000.0,
                                                   N_p=400, relax=0.0)
            n_g1 = pulse_train_steady_state_analytic(V1_RATES)[0]
            assert abs(ground_split(p) - n_g1) < 1e-12

    def test_split_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            rates = random_rate_set(rng)
            n_g1 = pulse_train_steady_state_analytic(rates)[0]
            p = pulse_train_steady_state_simulated(rates, 0.7, t_p=5.0 * rates.tau_ms,
                                                   N_p=400, relax=0.0)
            assert abs(ground_split(p) - n_g1) < 1e-12

    def test_warns_on_short_metastable_lifetime(self):
        rates = RateSet(1.0 / 9.0, 0.0, 1.0 / 11.4, 1.0 / 20.5, 1.0 / 20.0, 1.0 / 20.0)
        with pytest.warns(UserWarning):
            pulse_train_steady_state_analytic(rates)

    def test_validation(self):
        with pytest.raises(ValueError):
            pulse_train_steady_state_simulated(V1_RATES, 0.5, t_p=0.0)
        with pytest.raises(ValueError):
            pulse_train_steady_state_simulated(V1_RATES, 0.5, N_p=0)


class TestAlphaPrefactor:
    def test_linear_in_excitation_probability(self):
        slope = alpha_prefactor(V1_RATES, 1.0)
        for P_e in (0.1, 0.25, 0.5, 0.75, 1.0):
            assert alpha_prefactor(V1_RATES, P_e) == pytest.approx(P_e * slope, rel=1e-12)
        assert alpha_prefactor(V1_RATES, 0.0) == 0.0

    def test_v1_slope(self):
        assert alpha_prefactor(V1_RATES, 1.0) == pytest.approx(0.3622371482312621, rel=1e-12)

    def test_validation(self):
        for bad in (-0.1, 1.5):
            with pytest.raises(ValueError):
                alpha_prefactor(V1_RATES, bad)
        no_isc = RateSet(1.0 / 9.0, 0.0, 0.0, 1.0 / 20.5, 1.0 / 240.0, 1.0 / 240.0)
        with pytest.raises(ValueError):
            alpha_prefactor(no_isc, 0.5)
        # metastable state must outlive the excited states
        fast_ms = RateSet(1.0 / 9.0, 0.0, 1.0 / 11.4, 1.0 / 20.5, 0.5, 0.5)
        with pytest.raises(ValueError):
            alpha_prefactor(fast_ms, 0.5)


class TestTwoPulseSignal:
    def test_analytic_matches_ideal_simulation(self):
        # from the analytic steady state with untruncated emission windows
        # the simulated round reproduces the closed form
        for tau in (250.0, 500.0, 900.0):
            a = two_pulse_signal(V1_RATES, 0.6, tau, mode="analytic")
            s = two_pulse_signal(V1_RATES, 0.6, tau, mode="simulated",
                                 prep="ideal", window=math.inf)
            assert s == pytest.approx(a, rel=1e-9)

    def test_analytic_matches_ideal_simulation_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            rates = random_rate_set(rng)
            tau = rates.tau_ms
            a = two_pulse_signal(rates, 0.5, tau, mode="analytic")
            s = two_pulse_signal(rates, 0.5, tau, mode="simulated",
                                 prep="ideal", window=math.inf)
            assert s == pytest.approx(a, rel=1e-6)

    def test_default_measurement_round_close_to_analytic(self):
        # loop prep with truncated windows stays within a percent
        for tau in (100.0, 250.0, 500.0, 900.0):
            a = two_pulse_signal(V1_RATES, 0.6, tau, mode="analytic")
            s = two_pulse_signal(V1_RATES, 0.6, tau, mode="simulated")
            assert s == pytest.approx(a, rel=1e-2)

    def test_prep_variants_agree_at_steady_state(self):
        tau = 400.0
        loop = two_pulse_signal(V1_RATES, 0.6, tau, mode="simulated", prep="loop")
        cold = two_pulse_signal(V1_RATES, 0.6, tau, mode="simulated", prep="cold")
        assert loop == pytest.approx(cold, rel=1e-2)

    def test_validation(self):
        with pytest.raises(ValueError):
            two_pulse_signal(V1_RATES, 0.6, 0.0)
        with pytest.raises(ValueError):
            two_pulse_signal(V1_RATES, 0.6, 100.0, mode="exact")
        with pytest.raises(ValueError):
            two_pulse_signal(V1_RATES, 1.5, 100.0, mode="simulated")
        with pytest.raises(ValueError):
            two_pulse_signal(V1_RATES, 0.6, 100.0, mode="simulated", prep="warm")

    def test_analytic_warns_below_accuracy_regime(self):
        with pytest.warns(UserWarning):
            two_pulse_signal(V1_RATES, 0.6, 30.0, mode="analytic")


class TestCwSteadyState:
    def test_is_generator_null_vector(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            rates = random_rate_set(rng)
            W1, W2 = rng.uniform(0.001, 0.5, size=2)
            ss = cw_steady_state(rates, W1, W2)
            G = build_generator(rates, (W1, W2))
            assert np.abs(G @ ss.values).max() < 1e-12
            assert ss.values.sum() == pytest.approx(1.0, abs=1e-12)
            assert ss.values.min() >= 0.0

    def test_matches_long_time_propagation(self):
        ss = cw_steady_state(V1_RATES, 0.02, 0.02)
        G = build_generator(V1_RATES, (0.02, 0.02))
        far = propagate(LevelPopulations.depolarized_ground(), G, 1.0e6)
        assert np.abs(ss.values - far.values).max() < 1e-9

    def test_validation(self):
        with pytest.raises(ValueError):
            cw_steady_state(V1_RATES, 0.0, 0.0)
        with pytest.raises(ValueError):
            cw_steady_state(V1_RATES, -0.1, 0.1)


class TestSaturationEmission:
    def test_formula(self):
        ss = cw_steady_state(V1_RATES, 0.1, 0.1)
        expected = (1.0 - 0.08) * 0.9 * V1_RATES.gamma_r * (ss["e1"] + ss["e2"]) * 1e3
        assert saturation_emission_rate(V1_RATES, 0.08, 0.9, 0.1, 0.1) == pytest.approx(expected, rel=1e-12)

    def test_saturated_sideband_rate(self):
        # radiative/non-radiative split that yields the detected plateau
        rates = RateSet(gamma_r=0.046641791044776115, Gamma_nr=0.064469320066335,
                        gamma1=1.0 / 11.4, gamma2=1.0 / 20.5,
                        gamma3=1.0 / 240.0, gamma4=1.0 / 240.0)
        rate = saturation_emission_rate(rates, 0.08, 1.0, 50.0, 50.0)
        assert rate == pytest.approx(2.673465180696995, rel=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            saturation_emission_rate(V1_RATES, 0.0, 1.0, 0.1, 0.1)
        with pytest.raises(ValueError):
            saturation_emission_rate(V1_RATES, 0.08, 1.2, 0.1, 0.1)


class TestReadoutRatio:
    def test_analytic_value(self):
        expected = (V1_RATES.gamma2 / V1_RATES.gamma1) / (V1_RATES.gamma4 / V1_RATES.gamma3)
        assert resonant_readout_ratio(V1_RATES) == pytest.approx(expected, rel=1e-15)

    def test_simulated_agrees(self):
        for rates in (V1_RATES,
                      RateSet(1 / 8.0, 0.0, 1 / 10.0, 1 / 30.0, 1 / 200.0, 1 / 300.0)):
            a = resonant_readout_ratio(rates, mode="analytic")
            s = resonant_readout_ratio(rates, mode="simulated")
            assert s == pytest.approx(a, rel=1e-12)

    def test_validation(self):
        no_isc = RateSet(1.0 / 9.0, 0.0, 0.0, 1.0 / 20.5, 1.0 / 240.0, 1.0 / 240.0)
        with pytest.raises(ValueError):
            resonant_readout_ratio(no_isc)
        with pytest.raises(ValueError):
            resonant_readout_ratio(V1_RATES, mode="magic")


class TestTauGrid:
    def test_default_grid(self):
        grid = default_tau_grid()
        assert len(grid) == 32
        assert grid[0] == 65.0
        assert grid[-1] == 995.0
        assert np.all(np.diff(grid) == 30.0)


class TestEmissionIntegral:
    def test_pure_excited_state_branching(self):
        # free decay from e1 emits gamma_r * tau_e1 photons in total
        total = emission_integral(LevelPopulations.pure("e1"), V1_RATES)
        assert total == pytest.approx(V1_RATES.gamma_r * V1_RATES.tau_e1, rel=1e-12)
        assert emission_integral(LevelPopulations.pure("d"), V1_RATES) == pytest.approx(0.0, abs=1e-15)
        assert emission_integral(LevelPopulations.pure("g1"), V1_RATES) == 0.0

    def test_matches_quadrature(self):
        p0 = LevelPopulations(np.array([0.1, 0.15, 0.4, 0.25, 0.1]))
        exact = emission_integral(p0, V1_RATES, window=60.0)
        t, pops, trace = simulate_sequence(V1_RATES, PulseSequence((Wait(60.0),)),
                                           p0=p0, sample_dt=0.005)
        assert trace.total() == pytest.approx(exact, rel=1e-5)

    def test_finite_window_converges_to_infinite(self):
        p0 = LevelPopulations(np.array([0.1, 0.15, 0.4, 0.25, 0.1]))
        full = emission_integral(p0, V1_RATES)
        windowed = emission_integral(p0, V1_RATES, window=50.0 * V1_RATES.tau_ms)
        assert windowed == pytest.approx(full, rel=1e-9)

    def test_validation(self):
        p0 = LevelPopulations.pure("e1")
        with pytest.raises(ValueError):
            emission_integral(p0, V1_RATES, window=-1.0)
        with pytest.raises(ValueError):
            emission_integral(p0, V1_RATES, window=math.inf, pump_rates=(0.1, 0.0))


class TestSimulateSequence:
    def test_conservation_and_emission_formula(self):
        seq = PulseSequence((DeltaPulse(0.6), Wait(30.0), DeltaPulse(0.6), Wait(100.0)))
        t, pops, trace = simulate_sequence(V1_RATES, seq, sample_dt=0.5)
        assert np.abs(pops.sum(axis=1) - 1.0).max() < 1e-9
        assert pops.min() > -1e-12
        expected = V1_RATES.gamma_r * (pops[:, 2] + pops[:, 3])
        assert np.abs(trace.emission_rate - expected).max() < 1e-15

    def test_final_state_matches_direct_propagation(self):
        seq = PulseSequence((DeltaPulse(0.4), Wait(25.0)))
        t, pops, trace = simulate_sequence(V1_RATES, seq, sample_dt=0.01)
        G = build_generator(V1_RATES)
        direct = propagate(apply_delta_pulse(LevelPopulations.depolarized_ground(), 0.4),
                           G, 25.0)
        assert np.abs(pops[-1] - direct.values).max() < 1e-10

    def test_rejects_coherent_segments(self):
        seq = PulseSequence((GaussianPulse(rabi_peak=500.0, fwhm=1.5, center=3.0),))
        with pytest.raises(ValueError):
            simulate_sequence(V1_RATES, seq)

    def test_rejects_bad_sample_dt(self):
        seq = PulseSequence((Wait(10.0),))
        with pytest.raises(ValueError):
            simulate_sequence(V1_RATES, seq, sample_dt=0.0)


class TestWriters:
    def test_trace_csv_round_trip(self, tmp_path):
        seq = PulseSequence((DeltaPulse(0.5), Wait(20.0)))
        t, pops, trace = simulate_sequence(V1_RATES, seq, sample_dt=1.0)
        path = tmp_path / "trace.csv"
        write_trace_csv(str(path), t, pops, trace.emission_rate)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert lines[1].split(",")[0] == "time_ns"
        body = np.loadtxt(lines[2:], delimiter=",")
        assert np.abs(body[:, 0] - t).max() < 1e-9
        assert np.abs(body[:, 1:6] - pops).max() < 1e-9
        assert np.abs(body[:, 6] - trace.emission_rate).max() < 1e-9

    def test_steady_state_json_round_trip(self, tmp_path):
        import json

        ss = cw_steady_state(V1_RATES, 0.05, 0.05)
        path = tmp_path / "ss.json"
        write_steady_state_json(str(path), ss)
        data = json.loads(path.read_text())
        assert list(data) == ["g1", "g2", "e1", "e2", "d"]
        for name, value in data.items():
            assert value == pytest.approx(ss[name], rel=1e-12)
