"""Tests for the six-level spin-optical master equation."""

import math

import numpy as np
import pytest

from v1dyn.lindblad import (
    TWO_PI_MHZ,
    DensityMatrix,
    DriveEnvelope,
    apply_delta_pulse_rho,
    build_hamiltonian,
    evolve,
    field_scale_from_calibration,
    lindblad_rhs,
    pulse_area,
    resonant_detuning,
    simulate_depletion,
    simulate_rabi,
    six_vs_five_equivalence,
    write_curve_csv,
    write_trajectory_csv,
)
from v1dyn.model import (
    DeltaPulse,
    FieldCalibration,
    GaussianPulse,
    LevelPopulations,
    PulseSequence,
    QuasiCW,
    RateSet,
    SixLevelParams,
    V1_RATES,
    V1_RATES_DEPLETION,
    Wait,
)
from v1dyn.ratedyn import (
    apply_delta_pulse,
    build_generator,
    emission_integral,
    propagate,
)

PARAMS = SixLevelParams(V1_RATES)
FIELD_SCALE = field_scale_from_calibration(FieldCalibration())


def merged_populations(pops6):
    """Six-level diagonal with the metastable doublet summed."""
    return np.array([pops6[0], pops6[1], pops6[2], pops6[3], pops6[4] + pops6[5]])


class TestDensityMatrix:
    def test_from_populations_splits_doublet(self):
        p = LevelPopulations(np.array([0.2, 0.3, 0.1, 0.1, 0.3]))
        rho = DensityMatrix.from_populations(p)
        assert rho.population("d1") == pytest.approx(0.15)
        assert rho.population("d2") == pytest.approx(0.15)
        assert rho.population("g2") == pytest.approx(0.3)

    def test_depolarized_ground(self):
        rho = DensityMatrix.depolarized_ground()
        assert rho.population("g1") == 0.5
        assert rho.population("g2") == 0.5
        assert rho.populations.sum() == pytest.approx(1.0)

    def test_validation(self):
        good = np.diag([0.5, 0.5, 0, 0, 0, 0]).astype(complex)
        bad = good.copy()
        bad[0, 1] = 0.3            # not Hermitian
        with pytest.raises(ValueError):
            DensityMatrix(bad)
        with pytest.raises(ValueError):
            DensityMatrix(2.0 * good)
        neg = np.diag([0.7, 0.5, 0, 0, 0, -0.2]).astype(complex)
        with pytest.raises(ValueError):
            DensityMatrix(neg)
        with pytest.raises(ValueError):
            DensityMatrix(np.eye(5, dtype=complex) / 5.0)


class TestDriveEnvelope:
    def test_gaussian(self):
        env = DriveEnvelope.gaussian(peak=100.0, fwhm=1.5, center=3.0)
        assert env.sigma == pytest.approx(1.5 / (2.0 * math.sqrt(math.log(2.0))))
        assert env(3.0) == pytest.approx(100.0)
        assert env(3.0 + env.sigma) == pytest.approx(100.0 * math.exp(-0.5))
        assert env.max_value() == 100.0

    def test_quasi_cw(self):
        env = DriveEnvelope.quasi_cw(50.0, mod_frequency=10.0)
        # rectified sine: zero at every half period of the 10 MHz modulation
        assert env(0.0) == 0.0
        assert env(50.0) == pytest.approx(0.0, abs=1e-10)
        assert env(25.0) == pytest.approx(50.0)

    def test_constant_and_off(self):
        assert DriveEnvelope.constant(30.0)(123.4) == 30.0
        off = DriveEnvelope.off()
        assert off(5.0) == 0.0
        assert off.dt_bound() == math.inf

    def test_dt_bound_resolves_drive(self):
        env = DriveEnvelope.gaussian(peak=100.0, fwhm=1.5, center=3.0)
        assert env.dt_bound() <= 1.5 / 50.0

    def test_validation(self):
        with pytest.raises(ValueError):
            DriveEnvelope.gaussian(peak=100.0, fwhm=0.0, center=3.0)
        with pytest.raises(ValueError):
            DriveEnvelope.quasi_cw(-1.0)
        with pytest.raises(ValueError):
            DriveEnvelope("square")
        with pytest.raises(ValueError):
            DriveEnvelope.constant(10.0).sigma


class TestHamiltonian:
    def test_resonant_detuning(self):
        assert resonant_detuning(PARAMS, "A1") == pytest.approx(495.5)
        assert resonant_detuning(PARAMS, "A2") == pytest.approx(-495.5)
        with pytest.raises(ValueError):
            resonant_detuning(PARAMS, "B1")

    def test_structure_on_resonance(self):
        H = build_hamiltonian(PARAMS, 300.0, resonant_detuning(PARAMS, "A1"))
        assert np.abs(H - H.conj().T).max() < 1e-15
        # the driven pair is degenerate in the rotating frame,
        # the other pair sits at the full optical splitting
        assert H[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert H[2, 2] == pytest.approx(0.0, abs=1e-12)
        assert abs(H[1, 1] - H[3, 3]) == pytest.approx(991.0 * TWO_PI_MHZ, rel=1e-12)
        assert H[0, 2] == pytest.approx(0.5 * 300.0 * TWO_PI_MHZ)
        assert H[4, 5] == pytest.approx(PARAMS.lambda_mix)

    def test_rhs_preserves_trace_and_hermiticity(self):
        rng = np.random.default_rng(2)
        H = build_hamiltonian(PARAMS, 200.0, 495.5)
        for _ in range(20):
            A = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
            rho = A @ A.conj().T
            rho /= rho.trace()
            out = lindblad_rhs(rho, H, V1_RATES, gamma_s=0.01)
            assert abs(out.trace()) < 1e-14
            assert np.abs(out - out.conj().T).max() < 1e-13


class TestEvolve:
    def test_free_decay_matches_rate_model(self):
        # gamma3 = gamma4 with fast doublet mixing: the merged populations
        # follow the five-level rate model
        rho0 = apply_delta_pulse_rho(DensityMatrix.depolarized_ground(), 0.6)
        traj = evolve(rho0, PARAMS, DriveEnvelope.off(), (0.0, 50.0))
        p5 = propagate(apply_delta_pulse(LevelPopulations.depolarized_ground(), 0.6),
                       build_generator(V1_RATES), 50.0)
        assert np.abs(merged_populations(traj.populations[-1]) - p5.values).max() < 1e-5

    def test_emission_trace_matches_exact_integral(self):
        rho0 = apply_delta_pulse_rho(DensityMatrix.depolarized_ground(), 0.6)
        traj = evolve(rho0, PARAMS, DriveEnvelope.off(), (0.0, 50.0), dt=0.01)
        p0 = apply_delta_pulse(LevelPopulations.depolarized_ground(), 0.6)
        exact = emission_integral(p0, V1_RATES, window=50.0)
        assert traj.trace.total() == pytest.approx(exact, rel=1e-5)

    def test_trace_hermiticity_positivity_under_drive(self):
        params = SixLevelParams(V1_RATES, delta_L=495.5)
        traj = evolve(DensityMatrix.depolarized_ground(), params,
                      DriveEnvelope.quasi_cw(100.0), (0.0, 2000.0))
        tr = np.real(np.einsum("nii->n", traj.states))
        assert np.abs(tr - 1.0).max() < 1e-7
        for s in traj.states[::100]:
            assert np.abs(s - s.conj().T).max() < 1e-12
            assert np.linalg.eigvalsh((s + s.conj().T) / 2.0).min() > -1e-9

    def test_step_size_convergence(self):
        params = SixLevelParams(V1_RATES, delta_L=495.5)
        env = DriveEnvelope.constant(200.0)
        rho0 = DensityMatrix.depolarized_ground()
        a = evolve(rho0, params, env, (0.0, 30.0), dt=0.02).populations[-1]
        b = evolve(rho0, params, env, (0.0, 30.0), dt=0.01).populations[-1]
        assert np.abs(a - b).max() < 1e-6

    def test_adaptive_matches_fixed_step(self):
        params = SixLevelParams(V1_RATES, delta_L=495.5)
        env = DriveEnvelope.constant(200.0)
        rho0 = DensityMatrix.depolarized_ground()
        a = evolve(rho0, params, env, (0.0, 30.0), dt=0.01).populations[-1]
        b = evolve(rho0, params, env, (0.0, 30.0), method="adaptive").populations[-1]
        assert np.abs(a - b).max() < 1e-6

    def test_validation(self):
        rho0 = DensityMatrix.depolarized_ground()
        env = DriveEnvelope.constant(200.0)
        with pytest.raises(ValueError):
            evolve(rho0, PARAMS, env, (10.0, 10.0))
        with pytest.raises(ValueError):
            evolve(rho0, PARAMS, env, (0.0, 10.0), dt=0.0)
        with pytest.raises(ValueError):
            evolve(rho0, PARAMS, env, (0.0, 10.0), dt=5.0)
        with pytest.raises(ValueError):
            evolve(rho0, PARAMS, env, (0.0, 10.0), method="euler")


class TestDeltaPulseMap:
    def test_population_transfer_and_coherence_scaling(self):
        m = np.diag([0.4, 0.4, 0.0, 0.0, 0.1, 0.1]).astype(complex)
        m[0, 1] = m[1, 0] = 0.1
        rho = apply_delta_pulse_rho(DensityMatrix(m), 0.6)
        assert rho.population("g1") == pytest.approx(0.16)
        assert rho.population("e1") == pytest.approx(0.24)
        assert rho.population("d1") == pytest.approx(0.1)
        # ground-ground coherence scales by (1 - P_e)
        assert rho.matrix[0, 1] == pytest.approx(0.04)

    def test_diagonal_matches_rate_model_pulse(self):
        p = LevelPopulations(np.array([0.3, 0.3, 0.1, 0.1, 0.2]))
        rho = apply_delta_pulse_rho(DensityMatrix.from_populations(p), 0.45)
        p5 = apply_delta_pulse(p, 0.45)
        assert np.abs(merged_populations(rho.populations) - p5.values).max() < 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            apply_delta_pulse_rho(DensityMatrix.depolarized_ground(), 1.2)


class TestFieldCalibrationScale:
    def test_scale_value(self):
        assert FIELD_SCALE == pytest.approx(132.3282355239316, rel=1e-9)

    def test_pi_pulse_energy_gives_area_pi(self):
        cal = FieldCalibration()
        env = DriveEnvelope.gaussian(FIELD_SCALE * math.sqrt(cal.pi_pulse_energy),
                                     cal.pulse_fwhm, 5.0)
        assert pulse_area(env) == pytest.approx(math.pi, rel=1e-12)

    def test_area_requires_gaussian(self):
        with pytest.raises(ValueError):
            pulse_area(DriveEnvelope.constant(10.0))

    def test_pi_pulse_inverts_lossless_system(self):
        slow = RateSet(1e-9, 0.0, 0.0, 0.0, 1e-9, 1e-9)
        params = SixLevelParams(slow)
        params = SixLevelParams(slow, delta_L=resonant_detuning(params, "A1"))
        sigma = 1.5 / (2.0 * math.sqrt(math.log(2.0)))
        env = DriveEnvelope.gaussian(FIELD_SCALE * math.sqrt(2.8), 1.5, 4.0 * sigma)
        rho0 = DensityMatrix(np.diag([1.0, 0, 0, 0, 0, 0]).astype(complex))
        traj = evolve(rho0, params, env, (0.0, 8.0 * sigma))
        assert traj.populations[-1][2] > 0.9999


class TestRabi:
    def test_first_maximum_location(self):
        energies = np.arange(2.0, 4.01, 0.05)
        _, sig = simulate_rabi(PARAMS, energies, FIELD_SCALE, target="A1")
        peak = energies[int(np.argmax(sig))]
        assert 2.8 <= peak <= 3.1

    def test_spin_branches_share_the_period(self):
        energies = np.arange(2.0, 4.01, 0.05)
        _, s1 = simulate_rabi(PARAMS, energies, FIELD_SCALE, target="A1")
        _, s2 = simulate_rabi(PARAMS, energies, FIELD_SCALE, target="A2")
        assert energies[int(np.argmax(s1))] == energies[int(np.argmax(s2))]

    def test_signal_depends_on_pulse_area_only(self):
        # halving the field scale and quadrupling the energy is the same pulse
        _, a = simulate_rabi(PARAMS, [2.0], 100.0)
        _, b = simulate_rabi(PARAMS, [8.0], 50.0)
        assert a[0] == pytest.approx(b[0], rel=1e-12)

    def test_zero_energy_gives_zero_signal(self):
        _, sig = simulate_rabi(PARAMS, [0.0, 1.0], FIELD_SCALE)
        assert sig[0] == 0.0
        assert sig[1] > 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            simulate_rabi(PARAMS, [], FIELD_SCALE)
        with pytest.raises(ValueError):
            simulate_rabi(PARAMS, [-1.0], FIELD_SCALE)
        with pytest.raises(ValueError):
            simulate_rabi(PARAMS, [1.0], 0.0)


class TestDepletion:
    PARAMS_DEP = SixLevelParams(
        V1_RATES_DEPLETION,
        lambda_mix=100.0 * (V1_RATES_DEPLETION.gamma3 + V1_RATES_DEPLETION.gamma4))
    TAUS = np.array([50.0, 200.0, 800.0, 3000.0])

    def test_cw_curve_decreases_from_one(self):
        _, sig = simulate_depletion(self.PARAMS_DEP, 20.0, self.TAUS,
                                    mode="cw", readout="population")
        assert np.all(np.diff(sig) < 0.0)
        assert sig[0] < 1.0
        assert sig[-1] > 0.0

    def test_readout_modes_agree(self):
        _, pop = simulate_depletion(self.PARAMS_DEP, 20.0, self.TAUS,
                                    mode="cw", readout="population")
        _, pulse = simulate_depletion(self.PARAMS_DEP, 20.0, self.TAUS,
                                      mode="cw", readout="pulse")
        assert np.abs(pop - pulse).max() < 1e-2

    def test_quasi_cw_matches_average_power_cw(self):
        _, cw = simulate_depletion(self.PARAMS_DEP, 20.0, self.TAUS,
                                   mode="cw", readout="population")
        _, qcw = simulate_depletion(self.PARAMS_DEP, 20.0, self.TAUS,
                                    mode="quasi_cw", readout="population")
        assert np.abs(cw - qcw).max() / np.abs(cw).max() < 5e-2

    def test_both_spin_targets_deplete(self):
        for target in ("A1", "A2"):
            _, sig = simulate_depletion(self.PARAMS_DEP, 20.0, np.array([100.0, 2000.0]),
                                        target=target, mode="cw", readout="population")
            assert sig[-1] < sig[0] < 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            simulate_depletion(self.PARAMS_DEP, 20.0, [], mode="cw")
        with pytest.raises(ValueError):
            simulate_depletion(self.PARAMS_DEP, 20.0, [-5.0], mode="cw")
        with pytest.raises(ValueError):
            simulate_depletion(self.PARAMS_DEP, -1.0, [100.0], mode="cw")
        with pytest.raises(ValueError):
            simulate_depletion(self.PARAMS_DEP, 20.0, [100.0], mode="pulsed")
        with pytest.raises(ValueError):
            simulate_depletion(self.PARAMS_DEP, 20.0, [100.0], readout="counts")


class TestSixVsFiveEquivalence:
    PROTOCOL = PulseSequence((
        QuasiCW(0.5, 10.0, 2000.0, "A1"),
        Wait(3000.0),
        DeltaPulse(0.6),
        Wait(500.0),
        DeltaPulse(0.6),
        Wait(2000.0),
    ))

    def test_fast_mixing_merges_the_doublet(self):
        gsum = V1_RATES_DEPLETION.gamma3 + V1_RATES_DEPLETION.gamma4
        params = SixLevelParams(V1_RATES_DEPLETION, lambda_mix=100.0 * gsum)
        assert six_vs_five_equivalence(params, self.PROTOCOL) < 1e-4

    def test_discrepancy_shrinks_with_mixing(self):
        gsum = V1_RATES_DEPLETION.gamma3 + V1_RATES_DEPLETION.gamma4
        devs = []
        for factor in (0.0, 1.0, 10.0, 100.0):
            params = SixLevelParams(V1_RATES_DEPLETION, lambda_mix=factor * gsum)
            devs.append(six_vs_five_equivalence(params, self.PROTOCOL))
        assert devs[0] > 1e-2
        assert np.all(np.diff(devs) < 0.0)

    def test_rejects_coherent_pulses(self):
        proto = PulseSequence((GaussianPulse(rabi_peak=100.0, fwhm=1.5, center=3.0),))
        with pytest.raises(ValueError):
            six_vs_five_equivalence(PARAMS, proto)


class TestWriters:
    def test_trajectory_csv(self, tmp_path):
        rho0 = apply_delta_pulse_rho(DensityMatrix.depolarized_ground(), 0.5)
        traj = evolve(rho0, PARAMS, DriveEnvelope.off(), (0.0, 10.0), dt=0.01)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(str(path), traj)
        lines = path.read_text().splitlines()
        assert lines[1].split(",")[1] == "population_g1"
        body = np.loadtxt(lines[2:], delimiter=",")
        assert body.shape[1] == 8
        assert np.abs(body[:, 1:7] - traj.populations).max() < 1e-9

    def test_curve_csv(self, tmp_path):
        path = tmp_path / "curve.csv"
        x = np.array([1.0, 2.0, 3.0])
        y = np.array([0.5, 0.25, 0.125])
        write_curve_csv(str(path), x, y, "energy_fJ", "signal", units="energy in fJ")
        lines = path.read_text().splitlines()
        assert lines[0] == "# energy in fJ"
        assert lines[1] == "energy_fJ,signal"
        body = np.loadtxt(lines[2:], delimiter=",")
        assert np.abs(body[:, 1] - y).max() == 0.0
