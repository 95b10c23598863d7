"""Coherent six-level density-matrix dynamics under optical drives.

Basis ordering (g1, g2, e1, e2, d1, d2); see `model.LEVELS_6`.  The
Hamiltonian lives in the rotating frame of the drive laser:

    H = (2 D_g - 2 D_e + delta_L)/2 (|g1><g1| - |e1><e1|)
      - (2 D_g - 2 D_e - delta_L)/2 (|g2><g2| - |e2><e2|)
      + lambda (|d1><d2| + h.c.)
      + Omega/2 (|g1><e1| + |g2><e2| + h.c.)

with D_g, D_e, delta_L, Omega in MHz (converted to rad/ns internally) and
lambda in 1/ns used directly as an angular frequency.  The drive enters
with the conventional factor 1/2 so that a resonant pulse of area
integral(Omega dt) = pi inverts the population.

Dissipation channels: gamma_r + Gamma_nr on e_i -> g_i, gamma_1: e1 -> d1,
gamma_2: e2 -> d2, gamma_3: d1 -> g1, gamma_4: d2 -> g2, and gamma_s pure
dephasing with Lambda_s = |d1><d1| - |d2><d2|.  Emission rates count
gamma_r only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .model import (
    LEVELS_6,
    DeltaPulse,
    FieldCalibration,
    FluorescenceTrace,
    LevelPopulations,
    PulseSequence,
    QuasiCW,
    RateSet,
    SixLevelParams,
    Wait,
)
from . import ratedyn

__all__ = [
    "TWO_PI_MHZ",
    "DensityMatrix",
    "DriveEnvelope",
    "Trajectory",
    "build_hamiltonian",
    "resonant_detuning",
    "lindblad_rhs",
    "liouvillian",
    "evolve",
    "apply_delta_pulse_rho",
    "pulse_area",
    "field_scale_from_calibration",
    "simulate_rabi",
    "simulate_depletion",
    "six_vs_five_equivalence",
    "write_trajectory_csv",
    "write_curve_csv",
]

# MHz (ordinary frequency) -> rad/ns
TWO_PI_MHZ = 2.0e-3 * math.pi

HERMITICITY_TOL = 1e-10
TRACE_TOL = 1e-9
POSITIVITY_TOL = 1e-9

QUASI_CW_MOD_FREQUENCY = 10.0   # MHz; the field envelope is |sin(2 pi f t)|
RABI_GATE_DELAY = 3.0           # ns after the pulse center
READOUT_PULSE_FWHM = 1.5        # ns, intensity FWHM of the readout pulse
DEPLETION_WAIT_FACTOR = 5.0     # metastable decay wait in units of tau_ms
READOUT_WINDOW_FACTOR = 5.0     # readout gate length in units of max(tau_e)


def _op(i: int, j: int) -> np.ndarray:
    M = np.zeros((6, 6))
    M[i, j] = 1.0
    return M


@dataclass(frozen=True)
class DensityMatrix:
    """Validated 6x6 density matrix over (g1, g2, e1, e2, d1, d2)."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", m)
        if m.shape != (6, 6):
            raise ValueError(f"density matrix must be 6x6, got {m.shape}")
        if not np.all(np.isfinite(m.view(float))):
            raise ValueError("density matrix must be finite")
        herm = np.max(np.abs(m - m.conj().T))
        if herm > HERMITICITY_TOL:
            raise ValueError(f"density matrix not Hermitian: max deviation {herm:.3e}")
        tr = m.trace()
        if abs(tr - 1.0) > TRACE_TOL:
            raise ValueError(f"density matrix trace must be 1, got {tr!r}")
        lo = float(np.linalg.eigvalsh((m + m.conj().T) / 2.0).min())
        if lo < -POSITIVITY_TOL:
            raise ValueError(f"density matrix not positive: min eigenvalue {lo:.3e}")

    @classmethod
    def from_populations(cls, p: LevelPopulations) -> "DensityMatrix":
        v = np.zeros(6)
        v[: len(p.values)] = p.values
        if len(p.values) == 5:
            # merged metastable population splits evenly over the doublet
            v[4] = v[5] = p.values[4] / 2.0
        return cls(np.diag(v).astype(complex))

    @classmethod
    def depolarized_ground(cls) -> "DensityMatrix":
        return cls(np.diag([0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).astype(complex))

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.matrix))

    def population(self, label: str) -> float:
        i = LEVELS_6.index(label)
        return float(np.real(self.matrix[i, i]))


@dataclass(frozen=True)
class DriveEnvelope:
    """Optical drive envelope Omega(t), value in MHz (ordinary frequency).

    Shapes: "gaussian" (peak, fwhm = intensity FWHM, center), "quasi_cw"
    (amplitude * |sin(2 pi f t)|), "constant" (omega), "off".
    """

    shape: str
    peak: float = 0.0
    fwhm: float = 0.0
    center: float = 0.0
    amplitude: float = 0.0
    mod_frequency: float = 0.0
    omega: float = 0.0

    def __post_init__(self) -> None:
        if self.shape == "gaussian":
            if self.peak < 0.0 or self.fwhm <= 0.0:
                raise ValueError("gaussian envelope needs peak >= 0 and fwhm > 0")
        elif self.shape == "quasi_cw":
            if self.amplitude < 0.0 or self.mod_frequency <= 0.0:
                raise ValueError("quasi_cw envelope needs amplitude >= 0 and "
                                 "mod_frequency > 0")
        elif self.shape == "constant":
            if self.omega < 0.0:
                raise ValueError("constant envelope needs omega >= 0")
        elif self.shape != "off":
            raise ValueError(f"unknown envelope shape {self.shape!r}")

    @classmethod
    def gaussian(cls, peak: float, fwhm: float, center: float) -> "DriveEnvelope":
        return cls("gaussian", peak=peak, fwhm=fwhm, center=center)

    @classmethod
    def quasi_cw(cls, amplitude: float,
                 mod_frequency: float = QUASI_CW_MOD_FREQUENCY) -> "DriveEnvelope":
        return cls("quasi_cw", amplitude=amplitude, mod_frequency=mod_frequency)

    @classmethod
    def constant(cls, omega: float) -> "DriveEnvelope":
        return cls("constant", omega=omega)

    @classmethod
    def off(cls) -> "DriveEnvelope":
        return cls("off")

    @property
    def sigma(self) -> float:
        """Field-envelope standard deviation of the Gaussian shape (ns)."""
        if self.shape != "gaussian":
            raise ValueError(f"sigma is defined for gaussian envelopes, not {self.shape!r}")
        return self.fwhm / (2.0 * math.sqrt(math.log(2.0)))

    def __call__(self, t: float) -> float:
        if self.shape == "gaussian":
            x = (t - self.center) / self.sigma
            return self.peak * math.exp(-0.5 * x * x)
        if self.shape == "quasi_cw":
            return self.amplitude * abs(math.sin(2.0e-3 * math.pi * self.mod_frequency * t))
        if self.shape == "constant":
            return self.omega
        return 0.0

    def max_value(self) -> float:
        if self.shape == "gaussian":
            return self.peak
        if self.shape == "quasi_cw":
            return self.amplitude
        if self.shape == "constant":
            return self.omega
        return 0.0

    def dt_bound(self) -> float:
        """Coarsest step resolving the drive: min(1/(10 Omega_max),
        FWHM/50, 1/(10 f)) in ns, infinite when off."""
        bounds = []
        om = self.max_value() * TWO_PI_MHZ
        if om > 0.0:
            bounds.append(1.0 / (10.0 * om))
        if self.shape == "gaussian":
            bounds.append(self.fwhm / 50.0)
        if self.shape == "quasi_cw":
            bounds.append(1.0 / (10.0 * self.mod_frequency * 1e-3))
        return min(bounds) if bounds else math.inf


def resonant_detuning(params: SixLevelParams, target: str) -> float:
    """Laser detuning delta_L (MHz) putting the chosen optical transition
    on resonance; the other pair is then detuned by 4 (D_e - D_g)."""
    if target == "A1":
        return 2.0 * (params.D_e - params.D_g)
    if target == "A2":
        return 2.0 * (params.D_g - params.D_e)
    raise ValueError(f"target must be 'A1' or 'A2', got {target!r}")


def build_hamiltonian(params: SixLevelParams, omega_t: float,
                      delta_L: float) -> np.ndarray:
    """Rotating-frame Hamiltonian (rad/ns) at instantaneous Rabi frequency
    omega_t (MHz) and laser detuning delta_L (MHz)."""
    d1 = (2.0 * params.D_g - 2.0 * params.D_e + delta_L) * TWO_PI_MHZ
    d2 = (2.0 * params.D_g - 2.0 * params.D_e - delta_L) * TWO_PI_MHZ
    H = 0.5 * d1 * (_op(0, 0) - _op(2, 2))
    H -= 0.5 * d2 * (_op(1, 1) - _op(3, 3))
    H = H.astype(complex)
    H += params.lambda_mix * (_op(4, 5) + _op(5, 4))
    H += 0.5 * omega_t * TWO_PI_MHZ * (_op(0, 2) + _op(2, 0) + _op(1, 3) + _op(3, 1))
    return H


def _collapse_ops(rates: RateSet, gamma_s: float,
                  pump: Tuple[float, float] = (0.0, 0.0)) -> List[Tuple[float, np.ndarray]]:
    ge = rates.gamma_r + rates.Gamma_nr
    ops = [
        (ge, _op(0, 2)),
        (ge, _op(1, 3)),
        (rates.gamma1, _op(4, 2)),
        (rates.gamma2, _op(5, 3)),
        (rates.gamma3, _op(0, 4)),
        (rates.gamma4, _op(1, 5)),
    ]
    if gamma_s > 0.0:
        ops.append((gamma_s, _op(4, 4) - _op(5, 5)))
    if pump[0] > 0.0:
        ops.append((pump[0], _op(2, 0)))
    if pump[1] > 0.0:
        ops.append((pump[1], _op(3, 1)))
    return [(r, C) for r, C in ops if r > 0.0]


def lindblad_rhs(rho: np.ndarray, H: np.ndarray, rates: RateSet,
                 gamma_s: float = 0.0) -> np.ndarray:
    """d(rho)/dt = -i[H, rho] + sum_k gamma_k (C rho C+ - {C+C, rho}/2)."""
    out = -1j * (H @ rho - rho @ H)
    for rate, C in _collapse_ops(rates, gamma_s):
        CdC = C.conj().T @ C
        out += rate * (C @ rho @ C.conj().T - 0.5 * (CdC @ rho + rho @ CdC))
    return out


def liouvillian(H: np.ndarray, collapse: Sequence[Tuple[float, np.ndarray]]) -> np.ndarray:
    """36x36 generator acting on row-major vectorized density matrices."""
    I6 = np.eye(6)
    L = -1j * (np.kron(H, I6) - np.kron(I6, H.T))
    for rate, C in collapse:
        CdC = C.conj().T @ C
        L += rate * (np.kron(C, C.conj())
                     - 0.5 * (np.kron(CdC, I6) + np.kron(I6, CdC.T)))
    return L


class _Propagator:
    """exp(L t) and its time integral for arbitrary t via one
    eigendecomposition of L."""

    def __init__(self, L: np.ndarray):
        self.lam, self.V = np.linalg.eig(L)
        self.Vinv = np.linalg.inv(self.V)

    def apply(self, vec: np.ndarray, t: float) -> np.ndarray:
        return self.V @ (np.exp(self.lam * t) * (self.Vinv @ vec))

    def apply_many(self, vec: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """Rows are vec propagated to each t in ts."""
        c = self.Vinv @ vec
        return (np.exp(np.outer(np.asarray(ts), self.lam)) * c) @ self.V.T

    def integrate(self, vec: np.ndarray, t: float) -> np.ndarray:
        """integral_0^t exp(L s) vec ds."""
        lam_t = self.lam * t
        small = np.abs(lam_t) < 1e-12
        lam_safe = np.where(small, 1.0, self.lam)
        phi = np.where(small, t, np.expm1(np.where(small, 0.0, lam_t)) / lam_safe)
        return self.V @ (phi * (self.Vinv @ vec))


@dataclass(frozen=True)
class Trajectory:
    """Sampled density-matrix evolution with the emission-rate trace."""

    times: np.ndarray
    states: np.ndarray          # (n, 6, 6) complex
    trace: FluorescenceTrace

    def state(self, i: int) -> DensityMatrix:
        return DensityMatrix(self.states[i])

    @property
    def final(self) -> DensityMatrix:
        return DensityMatrix(self.states[-1])

    @property
    def populations(self) -> np.ndarray:
        """Real diagonal populations, shape (n, 6)."""
        return np.real(np.einsum("nii->ni", self.states))


def _coupling_hamiltonian() -> np.ndarray:
    """Drive coupling per MHz of Rabi frequency (rad/ns)."""
    H = 0.5 * TWO_PI_MHZ * (_op(0, 2) + _op(2, 0) + _op(1, 3) + _op(3, 1))
    return H.astype(complex)


def _max_rate(params: SixLevelParams) -> float:
    r = params.rates
    return max(r.gamma_e1, r.gamma_e2, r.gamma3, r.gamma4,
               params.gamma_s, params.lambda_mix)


def _default_dt(params: SixLevelParams, envelope: DriveEnvelope,
                delta_L: float) -> float:
    """Step resolving the drive and the fastest decay, kept well inside the
    RK4 stability region for the largest coherent frequency present."""
    coh = ((abs(2.0 * params.D_g - 2.0 * params.D_e) + abs(delta_L)
            + envelope.max_value()) * TWO_PI_MHZ
           + 2.0 * params.lambda_mix)
    dt = min(envelope.dt_bound(), 0.1 / _max_rate(params))
    if coh > 0.0:
        dt = min(dt, 2.0 / coh)
    return dt


def _real_embedding(L: np.ndarray) -> np.ndarray:
    """Real 72x72 block form [[Re, -Im], [Im, Re]] of a complex operator."""
    return np.block([[L.real, -L.imag], [L.imag, L.real]])


def evolve(rho0: DensityMatrix, params: SixLevelParams, envelope: DriveEnvelope,
           t_span: Tuple[float, float], dt: Optional[float] = None,
           sample_every: Optional[int] = None,
           method: str = "rk4") -> Trajectory:
    """Integrate the master equation over t_span with the given envelope.

    Fixed-step RK4 by default (bit-for-bit reproducible); method
    "adaptive" uses an embedded Runge-Kutta 4(5) pair with rtol 1e-9 and
    atol 1e-12.  dt defaults to a value resolving the drive, the level
    splittings and the fastest decay rate; a dt coarser than the drive
    resolution bound is rejected.  The laser detuning is params.delta_L.
    """
    t0, t1 = t_span
    if t1 <= t0:
        raise ValueError(f"t_span must increase, got {t_span!r}")
    bound = envelope.dt_bound()
    if dt is None:
        dt = min(_default_dt(params, envelope, params.delta_L), t1 - t0)
    elif dt <= 0.0:
        raise ValueError(f"dt must be > 0, got {dt!r}")
    elif dt > bound:
        raise ValueError(f"dt = {dt:.4g} ns too coarse for this drive: "
                         f"step-size bound is {bound:.4g} ns")

    H0 = build_hamiltonian(params, 0.0, params.delta_L)
    L0 = liouvillian(H0, _collapse_ops(params.rates, params.gamma_s))
    Lc = liouvillian(_coupling_hamiltonian(), [])
    n_steps = max(1, int(math.ceil((t1 - t0) / dt)))

    if method == "adaptive":
        from scipy.integrate import solve_ivp

        L0r = _real_embedding(L0)
        Lcr = _real_embedding(Lc)

        def rhs_vec(t: float, y: np.ndarray) -> np.ndarray:
            return L0r @ y + envelope(t) * (Lcr @ y)

        times = np.linspace(t0, t1, min(n_steps, 4000) + 1)
        y0 = np.concatenate([rho0.matrix.reshape(-1).real,
                             rho0.matrix.reshape(-1).imag])
        sol = solve_ivp(rhs_vec, (t0, t1), y0, t_eval=times, method="RK45",
                        rtol=1e-9, atol=1e-12,
                        max_step=bound if math.isfinite(bound) else np.inf)
        if not sol.success:
            raise RuntimeError(f"adaptive integration failed: {sol.message}")
        y = sol.y.T
        states = (y[:, :36] + 1j * y[:, 36:]).reshape(-1, 6, 6)
    elif method == "rk4":
        h = (t1 - t0) / n_steps
        if sample_every is None:
            sample_every = max(1, n_steps // 2000)
        v = rho0.matrix.reshape(-1).astype(complex)
        times_list = [t0]
        states_list = [v.copy()]
        for k in range(n_steps):
            t = t0 + k * h
            om_mid = envelope(t + h / 2.0)
            k1 = L0 @ v + envelope(t) * (Lc @ v)
            u = v + (h / 2.0) * k1
            k2 = L0 @ u + om_mid * (Lc @ u)
            u = v + (h / 2.0) * k2
            k3 = L0 @ u + om_mid * (Lc @ u)
            u = v + h * k3
            k4 = L0 @ u + envelope(t + h) * (Lc @ u)
            v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if (k + 1) % sample_every == 0 or k == n_steps - 1:
                times_list.append(t0 + (k + 1) * h)
                states_list.append(v.copy())
        times = np.asarray(times_list)
        states = np.asarray(states_list).reshape(-1, 6, 6)
    else:
        raise ValueError(f"method must be 'rk4' or 'adaptive', got {method!r}")

    n_e = np.real(states[:, 2, 2] + states[:, 3, 3])
    trace = FluorescenceTrace(times, params.rates.gamma_r * np.clip(n_e, 0.0, None))
    return Trajectory(times, states, trace)


def apply_delta_pulse_rho(rho: DensityMatrix, P_e: float) -> DensityMatrix:
    """Broadband instantaneous pulse as the exact completely positive map of
    an integrated incoherent pump: ground populations transfer fraction P_e
    to their excited partners, the g1-g2 coherence scales by (1 - P_e), and
    ground-other coherences by sqrt(1 - P_e)."""
    if not 0.0 <= P_e <= 1.0:
        raise ValueError(f"P_e must be in [0, 1], got {P_e!r}")
    s = 1.0 - P_e
    r = math.sqrt(s)
    m = rho.matrix.copy()
    m[2, 2] += P_e * m[0, 0]
    m[3, 3] += P_e * m[1, 1]
    m[0, 0] *= s
    m[1, 1] *= s
    m[0, 1] *= s
    m[1, 0] *= s
    for g in (0, 1):
        for k in (2, 3, 4, 5):
            m[g, k] *= r
            m[k, g] *= r
    return DensityMatrix(m)


def pulse_area(envelope: DriveEnvelope) -> float:
    """Pulse area integral(Omega(t) dt) in radians for a Gaussian envelope:
    Omega_peak * sigma_E * sqrt(2 pi) with sigma_E = FWHM/(2 sqrt(ln 2))."""
    if envelope.shape != "gaussian":
        raise ValueError(f"pulse area is defined for gaussian envelopes, "
                         f"not {envelope.shape!r}")
    return envelope.peak * TWO_PI_MHZ * envelope.sigma * math.sqrt(2.0 * math.pi)


def field_scale_from_calibration(cal: FieldCalibration) -> float:
    """Peak Rabi frequency per root pulse energy (MHz/sqrt(fJ)), calibrated
    so that the quoted pi-pulse energy gives pulse area pi."""
    sigma = cal.pulse_fwhm / (2.0 * math.sqrt(math.log(2.0)))
    peak_ang = math.pi / (sigma * math.sqrt(2.0 * math.pi))
    return peak_ang / TWO_PI_MHZ / math.sqrt(cal.pi_pulse_energy)


def _pi_pulse_envelope(fwhm: float) -> DriveEnvelope:
    """Gaussian envelope of area pi centred at 4 sigma."""
    sigma = fwhm / (2.0 * math.sqrt(math.log(2.0)))
    peak = math.pi / (sigma * math.sqrt(2.0 * math.pi)) / TWO_PI_MHZ
    return DriveEnvelope.gaussian(peak, fwhm, 4.0 * sigma)


def _gated_tail_signal(rho: DensityMatrix, rates: RateSet) -> float:
    """Emission integral from the gate time to infinity under free decay:
    gamma_r (n_e1 tau_e1 + n_e2 tau_e2); exact because nothing feeds the
    excited states once the drive is off."""
    n = rho.populations
    return rates.gamma_r * (n[2] * rates.tau_e1 + n[3] * rates.tau_e2)


def simulate_rabi(params: SixLevelParams, pulse_energies: Sequence[float],
                  field_scale: float, target: str = "A1",
                  fwhm: float = READOUT_PULSE_FWHM, dt: Optional[float] = None,
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Gated fluorescence versus pulse energy for a resonant Gaussian pulse.

    The peak Rabi frequency of each pulse is field_scale * sqrt(E_p); the
    detection gate opens 3 ns after the pulse center and the gated signal
    is the exact emission integral from the gate onward.  Starts from the
    depolarized ground state.  Returns (energies, signal).
    """
    energies = np.asarray(pulse_energies, dtype=float)
    if energies.ndim != 1 or len(energies) == 0:
        raise ValueError("pulse_energies must be a non-empty 1-d sequence")
    if np.any(energies < 0.0):
        raise ValueError("pulse energies must be >= 0")
    if field_scale <= 0.0:
        raise ValueError(f"field_scale must be > 0, got {field_scale!r}")
    p = replace(params, delta_L=resonant_detuning(params, target))
    sigma = fwhm / (2.0 * math.sqrt(math.log(2.0)))
    center = 4.0 * sigma
    t_gate = center + RABI_GATE_DELAY
    signal = np.empty_like(energies)
    for i, E in enumerate(energies):
        if E == 0.0:
            signal[i] = 0.0
            continue
        env = DriveEnvelope.gaussian(field_scale * math.sqrt(E), fwhm, center)
        traj = evolve(DensityMatrix.depolarized_ground(), p, env,
                      (0.0, t_gate), dt=dt)
        signal[i] = _gated_tail_signal(traj.final, p.rates)
    return energies, signal


@lru_cache(maxsize=64)
def _cached_propagator(key: Tuple[float, ...], omega: float, delta_L: float,
                       pump1: float, pump2: float) -> _Propagator:
    rates = RateSet(*key[:6], split_known=False)
    lam, gs, Dg, De = key[6:]
    params = SixLevelParams(rates, lambda_mix=lam, gamma_s=gs, D_g=Dg, D_e=De)
    H = build_hamiltonian(params, omega, delta_L)
    L = liouvillian(H, _collapse_ops(rates, gs, (pump1, pump2)))
    return _Propagator(L)


def _params_key(params: SixLevelParams) -> Tuple[float, ...]:
    r = params.rates
    return (r.gamma_r, r.Gamma_nr, r.gamma1, r.gamma2, r.gamma3, r.gamma4,
            params.lambda_mix, params.gamma_s, params.D_g, params.D_e)


def _sanitize(vec: np.ndarray) -> np.ndarray:
    """Round eigendecomposition noise off a vectorized density matrix."""
    m = vec.reshape(6, 6)
    m = (m + m.conj().T) / 2.0
    w, U = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    m = (U * w) @ U.conj().T
    m = m / m.trace().real
    return m.reshape(-1)


def _readout_pulse_signal(rho_vec: np.ndarray, params: SixLevelParams,
                          target: str) -> float:
    """Gated emission of a pi-area Gaussian readout pulse on the target
    transition: RK4 through the pulse, then the exact emission integral
    over a window of 5 max(tau_e) after the gate."""
    rates = params.rates
    p = replace(params, delta_L=resonant_detuning(params, target))
    env = _pi_pulse_envelope(READOUT_PULSE_FWHM)
    t_gate = env.center + RABI_GATE_DELAY
    traj = evolve(DensityMatrix(_sanitize(rho_vec).reshape(6, 6)), p, env,
                  (0.0, t_gate))
    window = READOUT_WINDOW_FACTOR * max(rates.tau_e1, rates.tau_e2)
    free = _cached_propagator(_params_key(p), 0.0, p.delta_L, 0.0, 0.0)
    integ = free.integrate(traj.states[-1].reshape(-1), window).reshape(6, 6)
    return rates.gamma_r * float(np.real(integ[2, 2] + integ[3, 3]))


def simulate_depletion(params: SixLevelParams, power_level: float,
                       taus: Sequence[float], target: str = "A1",
                       mode: str = "quasi_cw", readout: str = "pulse",
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized readout signal after resonant depletion of one spin state.

    From the depolarized ground state, the target transition is driven for
    each initialization time tau: a quasi-cw envelope of amplitude
    power_level (MHz) with 10 MHz sine modulation, or, with mode "cw", the
    average-power-equivalent constant drive power_level/sqrt(2).  After a
    wait of 5 tau_ms the remaining population is read out, either with a
    pi-area Gaussian pulse on the target ("pulse", gated emission) or
    directly as the target ground population ("population").  The curve is
    normalized to the tau = 0 value.  Returns (taus, signal).
    """
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or len(taus) == 0:
        raise ValueError("taus must be a non-empty 1-d sequence")
    if np.any(taus < 0.0):
        raise ValueError("initialization times must be >= 0")
    if power_level < 0.0:
        raise ValueError(f"power_level must be >= 0, got {power_level!r}")
    if readout not in ("pulse", "population"):
        raise ValueError(f"readout must be 'pulse' or 'population', got {readout!r}")
    delta_L = resonant_detuning(params, target)
    rates = params.rates
    wait = DEPLETION_WAIT_FACTOR * rates.tau_ms
    key = _params_key(params)
    free = _cached_propagator(key, 0.0, delta_L, 0.0, 0.0)

    rho0 = DensityMatrix.depolarized_ground().matrix.reshape(-1)
    states = np.empty((len(taus) + 1, 36), dtype=complex)
    states[0] = rho0          # the tau = 0 reference
    if mode == "cw":
        drive = _cached_propagator(key, power_level / math.sqrt(2.0), delta_L,
                                   0.0, 0.0)
        states[1:] = drive.apply_many(rho0, taus)
    elif mode == "quasi_cw":
        env = DriveEnvelope.quasi_cw(power_level)
        p = replace(params, delta_L=delta_L)
        for i, tau in enumerate(taus):
            if tau == 0.0:
                states[i + 1] = rho0
            else:
                traj = evolve(DensityMatrix.depolarized_ground(), p, env,
                              (0.0, tau))
                states[i + 1] = traj.states[-1].reshape(-1)
    else:
        raise ValueError(f"mode must be 'quasi_cw' or 'cw', got {mode!r}")

    g_idx = 0 if target == "A1" else 1
    raw = np.empty(len(taus) + 1)
    for i, vec in enumerate(states):
        after_wait = free.apply(vec, wait)
        if readout == "population":
            raw[i] = np.real(after_wait.reshape(6, 6)[g_idx, g_idx])
        else:
            raw[i] = _readout_pulse_signal(after_wait, params, target)
    return taus, raw[1:] / raw[0]


def _pump_rate_schedule(seg: QuasiCW, n_sub: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Piecewise-constant sampling of the incoherent pump rate
    W(t) = amplitude * |sin(2 pi f t)| (amplitude in MHz read as a rate,
    1e-3/ns): midpoint values over equal sub-steps covering the segment."""
    f_ns = seg.mod_frequency * 1e-3
    half_period = 0.5 / f_ns
    n_steps = n_sub * max(1, int(math.ceil(seg.duration / half_period)))
    edges = np.linspace(0.0, seg.duration, n_steps + 1)
    mid = (edges[:-1] + edges[1:]) / 2.0
    W = seg.amplitude * 1e-3 * np.abs(np.sin(2.0 * math.pi * f_ns * mid))
    return np.diff(edges), W


def six_vs_five_equivalence(params: SixLevelParams, protocol: PulseSequence,
                            ) -> float:
    """Maximum absolute ground-population discrepancy between the six-level
    model (metastable doublet mixed coherently at rate lambda_mix) and the
    merged five-level rate model running the same protocol.

    DeltaPulse and Wait segments are exact in both models.  QuasiCW
    segments act as an incoherent pump of the target transition in both
    models (the amplitude is read as a pump rate in MHz) with an identical
    piecewise-constant discretization, so that the comparison isolates the
    metastable-structure difference; coherently driven Gaussian pulses
    have no five-level counterpart and are rejected.
    """
    key = _params_key(params)
    rates = params.rates
    rho = DensityMatrix.depolarized_ground().matrix.reshape(-1)
    p5 = LevelPopulations.depolarized_ground().values.copy()
    U5_cache: dict = {}

    def U5(pump: Tuple[float, float], dt: float) -> np.ndarray:
        k = (pump, dt)
        if k not in U5_cache:
            U5_cache[k] = expm(ratedyn.build_generator(rates, pump) * dt)
        return U5_cache[k]

    def compare(rho_vec: np.ndarray, p: np.ndarray) -> float:
        g6 = np.real(rho_vec.reshape(6, 6).diagonal()[:2])
        return float(np.max(np.abs(g6 - p[:2])))

    worst = 0.0
    for seg in protocol.segments:
        if isinstance(seg, DeltaPulse):
            rho = apply_delta_pulse_rho(
                DensityMatrix(_sanitize(rho).reshape(6, 6)),
                seg.excitation_probability).matrix.reshape(-1)
            p5 = ratedyn.apply_delta_pulse(LevelPopulations(p5),
                                           seg.excitation_probability).values
        elif isinstance(seg, Wait):
            n = max(1, int(math.ceil(seg.duration / (0.25 * rates.tau_ms))))
            dt = seg.duration / n
            prop6 = _cached_propagator(key, 0.0, 0.0, 0.0, 0.0)
            for _ in range(n):
                rho = prop6.apply(rho, dt)
                p5 = U5((0.0, 0.0), dt) @ p5
                worst = max(worst, compare(rho, p5))
        elif isinstance(seg, QuasiCW):
            dts, Ws = _pump_rate_schedule(seg)
            first = seg.target == "A1"
            for dt, W in zip(dts, Ws):
                pump = (W, 0.0) if first else (0.0, W)
                prop6 = _cached_propagator(key, 0.0, 0.0, *pump)
                rho = prop6.apply(rho, dt)
                p5 = U5(pump, dt) @ p5
                worst = max(worst, compare(rho, p5))
        else:
            raise ValueError("equivalence protocols support DeltaPulse, Wait "
                             f"and QuasiCW segments, got {type(seg).__name__}")
        worst = max(worst, compare(rho, p5))
    return worst


def write_trajectory_csv(path: str, traj: Trajectory) -> None:
    """CSV export: time (ns), the six level populations, emission rate (1/ns)."""
    header = ["# time in ns, populations dimensionless, emission_rate in 1/ns",
              "time_ns," + ",".join(f"population_{k}" for k in LEVELS_6)
              + ",emission_rate"]
    body = np.column_stack([traj.times, traj.populations, traj.trace.emission_rate])
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, body, delimiter=",", fmt="%.12g")


def write_curve_csv(path: str, x: np.ndarray, y: np.ndarray,
                    x_label: str, y_label: str, units: str = "") -> None:
    """CSV export of a simulated curve (x, signal)."""
    header = ([f"# {units}"] if units else []) + [f"{x_label},{y_label}"]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, np.column_stack([np.asarray(x), np.asarray(y)]),
                   delimiter=",", fmt="%.12g")
