"""Derived photophysics: from field calibration to cavity requirements.

Implements the calculator chain that turns the measured rates and the
optical calibration into emitter figures of merit:

    E_bulk --(saturation-power ratio)--> E_SIL
           --(Lorentz-Lorenz (eps+2)/3)--> E_local
           --(pi-pulse area theorem)--> mu_ZPL
           --(spontaneous-emission relation)--> gamma_ZPL
           --(Debye-Waller factor)--> gamma_r, Gamma bound, QE_1, QE_2

plus the minimum Purcell factor for unit cooperativity, the multiphonon
bound on the direct non-radiative rate, spin-orbit branching ratios of
the intersystem crossing, and the setup collection efficiency.

All functions are pure, stateless calculators.  Magnetic field units:
fields in V/m, dipole moments in e*Angstrom, lifetimes in ns, rates in
1/ns unless a docstring says otherwise (the multiphonon rate is in 1/s;
it is some ten orders slower than the radiative decay).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from scipy import constants

from .model import FieldCalibration, MaterialParams, RateSet, V1_RATES
from . import ratedyn

__all__ = [
    "field_in_sil", "local_field", "dipole_from_pi_pulse",
    "zpl_rate_from_dipole", "RadiativeBudget", "radiative_chain",
    "PurcellBudget", "purcell_requirement", "oscillator_strength",
    "morse_factor", "multiphonon_rate", "multiphonon_temperature",
    "isc_from_so", "so_anisotropy_from_isc", "so_anisotropy_from_ms",
    "collection_efficiency", "pulse_peak_power", "gaussian_beam_field",
    "DerivedQuantities", "derived_quantities", "derived_report",
]

# C*m per e*Angstrom
_E_ANGSTROM = constants.e * 1e-10
# Boltzmann constant in eV/K
_K_B_EV = constants.k / constants.e

# default pump rate (1/ns) representing saturating cw excitation; at this
# strength the ground populations are < 1e-4 and the excited/metastable
# steady state is within 0.1% of the infinite-power limit
SATURATING_PUMP = 50.0

# transition wavelength (nm) of the V1 zero-phonon lines
DEFAULT_WAVELENGTH = 862.0


def _positive(value: float, name: str) -> float:
    v = float(value)
    if not math.isfinite(v) or v <= 0.0:
        raise ValueError(f"{name} must be finite and > 0, got {value!r}")
    return v


def field_in_sil(cal: FieldCalibration) -> float:
    """Focal field in the solid-immersion-lens geometry (V/m).

    Rescales the simulated bulk field by the square root of the cw
    saturation-power ratio, E_bulk * sqrt(P_sat_bulk / P_sat_sil).
    """
    return cal.E_bulk * math.sqrt(cal.P_sat_bulk / cal.P_sat_sil)


def local_field(E_applied: float, epsilon: float) -> float:
    """Effective field at the defect from the Lorentz-Lorenz local-field
    correction, E_applied * (epsilon + 2) / 3.  Requires epsilon >= 1."""
    if not math.isfinite(epsilon) or epsilon < 1.0:
        raise ValueError(f"epsilon must be >= 1, got {epsilon!r}")
    _positive(E_applied, "E_applied")
    return E_applied * (epsilon + 2.0) / 3.0


def dipole_from_pi_pulse(E_local: float, intensity_fwhm: float) -> float:
    """Transition dipole moment (e*Angstrom) from the pi-pulse area theorem.

    For a Gaussian field envelope of amplitude E_local whose intensity
    FWHM is `intensity_fwhm` (ns), a pi pulse satisfies
    mu * E_local * sigma_E * sqrt(2 pi) = pi * hbar with the field width
    sigma_E = fwhm / (2 sqrt(ln 2)).
    """
    _positive(E_local, "E_local")
    _positive(intensity_fwhm, "intensity_fwhm")
    sigma_s = intensity_fwhm * 1e-9 / (2.0 * math.sqrt(math.log(2.0)))
    mu_si = math.pi * constants.hbar / (E_local * sigma_s * math.sqrt(2.0 * math.pi))
    return mu_si / _E_ANGSTROM


def zpl_rate_from_dipole(mu: float, n: float, wavelength: float) -> float:
    """Spontaneous emission rate (1/ns) of a dipole mu (e*Angstrom) at
    `wavelength` (nm) in a medium of refractive index n:

        gamma = n omega^3 mu^2 / (3 eps0 pi c^3 hbar),  omega = 2 pi c / lambda.
    """
    if mu < 0.0:
        raise ValueError(f"mu must be >= 0, got {mu!r}")
    _positive(n, "n")
    _positive(wavelength, "wavelength")
    omega = 2.0 * math.pi * constants.c / (wavelength * 1e-9)
    mu_si = mu * _E_ANGSTROM
    rate_si = (n * omega**3 * mu_si**2
               / (3.0 * constants.epsilon_0 * math.pi * constants.c**3 * constants.hbar))
    return rate_si * 1e-9


@dataclass(frozen=True)
class RadiativeBudget:
    """Radiative/non-radiative split of the excited-state decay.

    gamma_r_total is the full radiative rate (ZPL plus sidebands),
    Gamma_bound the remaining direct non-radiative rate inferred from the
    measured combined lifetime (floored at zero, see `floored`), and
    qe1/qe2 the quantum efficiencies of the two spin branches.
    """

    gamma_r_total: float
    mu_total: float
    Gamma_bound: float
    qe1: float
    qe2: float
    floored: bool = False


def radiative_chain(gamma_zpl: float, dwf: float, tau_e1: float,
                    tau_e2: float, tau_combined: float,
                    mu_zpl: Optional[float] = None,
                    consistency_tol: float = 0.25) -> RadiativeBudget:
    """Total radiative rate, non-radiative bound, and quantum efficiencies.

    gamma_r_total = gamma_zpl / dwf; Gamma_bound = 1/tau_combined -
    gamma_r_total.  `tau_combined` is the measured 1/(gamma_r + Gamma)
    lifetime (ns).  A small negative bound (within `consistency_tol`
    relative to 1/tau_combined) is floored at zero with a flag; a larger
    deficit means inconsistent inputs and raises ValueError.  When the ZPL
    dipole moment is given, mu_total = mu_zpl / sqrt(dwf).
    """
    _positive(gamma_zpl, "gamma_zpl")
    if not 0.0 < dwf <= 1.0:
        raise ValueError(f"dwf must be in (0, 1], got {dwf!r}")
    _positive(tau_e1, "tau_e1")
    _positive(tau_e2, "tau_e2")
    _positive(tau_combined, "tau_combined")

    gamma_r_total = gamma_zpl / dwf
    total = 1.0 / tau_combined
    bound = total - gamma_r_total
    floored = False
    if bound < -consistency_tol * total:
        raise ValueError(
            f"gamma_zpl/dwf = {gamma_r_total:.4g} 1/ns exceeds the combined "
            f"decay rate {total:.4g} 1/ns by more than {consistency_tol:.0%}")
    if bound < 0.0:
        bound = 0.0
        floored = True
    mu_total = mu_zpl / math.sqrt(dwf) if mu_zpl is not None else math.nan
    return RadiativeBudget(gamma_r_total=gamma_r_total, mu_total=mu_total,
                           Gamma_bound=bound,
                           qe1=gamma_r_total * tau_e1,
                           qe2=gamma_r_total * tau_e2, floored=floored)


@dataclass(frozen=True)
class PurcellBudget:
    """Minimum Purcell factor for unit cooperativity on one ZPL transition.

    The cooperativity model is C(F) = F gamma_zpl / ((1/tau_e - gamma_zpl)
    + gamma_deph): the cavity-enhanced ZPL emission competing against all
    other decay and dephasing.  F_min solves C = 1.
    """

    F_min: float
    gamma_zpl: float
    tau_e: float
    gamma_deph: float

    def cooperativity(self, F: float) -> float:
        return (F * self.gamma_zpl
                / ((1.0 / self.tau_e - self.gamma_zpl) + self.gamma_deph))

    def tau_shortened(self, F: float) -> float:
        """Excited-state lifetime (ns) with Purcell factor F >= 1 on the ZPL."""
        if F < 1.0:
            raise ValueError(f"F must be >= 1, got {F!r}")
        return 1.0 / (1.0 / self.tau_e + (F - 1.0) * self.gamma_zpl)


def purcell_requirement(gamma_zpl: float, tau_e: float,
                        gamma_deph: float = 0.0) -> PurcellBudget:
    """Minimum Purcell factor and lifetime-shortening model for one branch.

    gamma_zpl and gamma_deph in 1/ns, tau_e in ns.  Requires the bare
    excited state to decay faster than its ZPL emission alone (always the
    case for a sideband-dominated emitter).
    """
    _positive(gamma_zpl, "gamma_zpl")
    _positive(tau_e, "tau_e")
    if gamma_deph < 0.0:
        raise ValueError(f"gamma_deph must be >= 0, got {gamma_deph!r}")
    competing = (1.0 / tau_e - gamma_zpl) + gamma_deph
    if competing <= 0.0:
        raise ValueError("total decay must exceed the bare ZPL rate; "
                         f"got 1/tau_e = {1.0 / tau_e:.4g}, gamma_zpl = {gamma_zpl:.4g}")
    return PurcellBudget(F_min=competing / gamma_zpl, gamma_zpl=gamma_zpl,
                         tau_e=tau_e, gamma_deph=gamma_deph)


def oscillator_strength(tau_r: float, n: float, wavelength: float) -> float:
    """Oscillator strength from the radiative lifetime tau_r (ns):

        f = 6 pi eps0 m c^3 / (n^3 e^2 omega0^2 tau_r).
    """
    _positive(tau_r, "tau_r")
    _positive(n, "n")
    _positive(wavelength, "wavelength")
    omega0 = 2.0 * math.pi * constants.c / (wavelength * 1e-9)
    return (6.0 * math.pi * constants.epsilon_0 * constants.m_e * constants.c**3
            / (n**3 * constants.e**2 * omega0**2 * tau_r * 1e-9))


def morse_factor(p: float) -> float:
    """Taylor-expansion factor B(p) = (2^p - 1)^2 p^(p-2) / Gamma(p+1)^2 of
    the p-th order vibrational mode in an equivalent Morse potential.

    Evaluated in log space; the naive form overflows integer factorials
    near p = 12.
    """
    if p < 1.0:
        raise ValueError(f"p must be >= 1, got {p!r}")
    log_b = (2.0 * (p * math.log(2.0) + math.log1p(-(2.0 ** -p)))
             + (p - 2.0) * math.log(p) - 2.0 * math.lgamma(p + 1.0))
    return math.exp(log_b)


def multiphonon_rate(mat: MaterialParams, f_osc: float) -> float:
    """Multiphonon non-radiative decay rate Gamma = kappa exp(-alpha hbar w0)
    in 1/s, bridging the transition energy with p = w0/w_op cutoff phonons.

    alpha = ln(D / hbar_w_op) / hbar_w_op with dissociation energy
    D = E_f / 2, and kappa = f B(p) (N_c - 1)/N_c^2 * 4 pi^2 rho a^3 D /
    (3 hbar m).
    """
    if f_osc <= 0.0:
        raise ValueError(f"f_osc must be > 0, got {f_osc!r}")
    p = mat.p
    D = mat.E_f / 2.0          # eV
    if D <= mat.hbar_omega_op:
        raise ValueError("dissociation energy must exceed the phonon quantum")
    alpha = math.log(D / mat.hbar_omega_op) / mat.hbar_omega_op   # 1/eV
    kappa = (f_osc * morse_factor(p) * (mat.N_c - 1) / mat.N_c**2
             * 4.0 * math.pi**2 * mat.rho_M * mat.a**3 * (D * constants.e)
             / (3.0 * constants.hbar * constants.m_e))
    return kappa * math.exp(-alpha * mat.hbar_omega_0)


def multiphonon_temperature(Gamma0: float, T: float, hbar_omega_op: float,
                            p: float) -> float:
    """Temperature scaling Gamma(T) = Gamma0 [1 + n_B(T)]^p of a p-phonon
    decay, with the Bose occupation n_B of the cutoff phonon mode."""
    if Gamma0 < 0.0:
        raise ValueError(f"Gamma0 must be >= 0, got {Gamma0!r}")
    if T < 0.0:
        raise ValueError(f"T must be >= 0, got {T!r}")
    _positive(hbar_omega_op, "hbar_omega_op")
    if T == 0.0:
        return Gamma0
    x = hbar_omega_op / (_K_B_EV * T)
    n_bose = 0.0 if x > 700.0 else 1.0 / math.expm1(x)
    return Gamma0 * (1.0 + n_bose) ** p


def isc_from_so(lambda_T: float, lambda_Z: float) -> Dict[str, float]:
    """Relative intersystem-crossing rates from the transverse and
    longitudinal spin-orbit couplings, up to one common prefactor:

        gamma1 : 2|l_Z|^2/3 + |l_T|^2/9     (e1 -> doublets)
        gamma2 : |l_T|^2/3                  (e2 -> doublets)
        gamma3 : |l_T|^2/3 + 2|l_Z|^2/3     (doublets -> g1)
        gamma4 : |l_T|^2                    (doublets -> g2)
    """
    if lambda_T < 0.0 or lambda_Z < 0.0:
        raise ValueError("couplings must be >= 0")
    t = lambda_T**2
    z = lambda_Z**2
    return {"gamma1": 2.0 * z / 3.0 + t / 9.0,
            "gamma2": t / 3.0,
            "gamma3": t / 3.0 + 2.0 * z / 3.0,
            "gamma4": t}


def so_anisotropy_from_isc(gamma2_over_gamma1: float) -> float:
    """Spin-orbit anisotropy lambda_T/lambda_Z from the measured upper
    branching ratio gamma2/gamma1; the ratio equation inverts to
    r^2 = 6 rho / (3 - rho), defined for rho in (0, 3)."""
    rho = gamma2_over_gamma1
    if not 0.0 < rho < 3.0:
        raise ValueError(f"gamma2/gamma1 must be in (0, 3), got {rho!r}")
    return math.sqrt(6.0 * rho / (3.0 - rho))


def so_anisotropy_from_ms(gamma3_over_gamma4: float) -> float:
    """Spin-orbit anisotropy lambda_T/lambda_Z from the metastable return
    ratio gamma3/gamma4; inverts to r^2 = 2 / (3 q - 1), defined for
    q > 1/3."""
    q = gamma3_over_gamma4
    if q <= 1.0 / 3.0:
        raise ValueError(f"gamma3/gamma4 must exceed 1/3, got {q!r}")
    return math.sqrt(2.0 / (3.0 * q - 1.0))


def collection_efficiency(measured_rate: float, predicted_rate: float) -> float:
    """Overall detection efficiency as measured/predicted emission rate
    (same units for both)."""
    _positive(predicted_rate, "predicted_rate")
    if measured_rate < 0.0:
        raise ValueError(f"measured_rate must be >= 0, got {measured_rate!r}")
    return measured_rate / predicted_rate


def pulse_peak_power(energy_fJ: float, fwhm_ns: float,
                     transmission: float = 1.0) -> float:
    """Peak power (W) of a Gaussian intensity pulse of given energy (fJ)
    and intensity FWHM (ns) after an optical transmission factor."""
    _positive(energy_fJ, "energy_fJ")
    _positive(fwhm_ns, "fwhm_ns")
    if not 0.0 < transmission <= 1.0:
        raise ValueError(f"transmission must be in (0, 1], got {transmission!r}")
    sigma_i = fwhm_ns * 1e-9 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    return energy_fJ * 1e-15 * transmission / (sigma_i * math.sqrt(2.0 * math.pi))


def gaussian_beam_field(peak_power: float, waist: float, n: float) -> float:
    """On-axis focal field (V/m) of a Gaussian beam of given peak power
    (W) and waist radius (m) inside a medium of index n.

    Analytic sanity model only: it ignores interface transmission and
    focal aberrations, so it overestimates tightly focused fields in
    high-index hosts.
    """
    _positive(peak_power, "peak_power")
    _positive(waist, "waist")
    _positive(n, "n")
    intensity = 2.0 * peak_power / (math.pi * waist**2)
    return math.sqrt(2.0 * intensity / (n * constants.epsilon_0 * constants.c))


@dataclass(frozen=True)
class DerivedQuantities:
    """Figures of merit derived from the calibration and the rate set.

    Dipole moments in e*Angstrom, decay rates in 1/ns except the
    multiphonon rate (1/s); quantum efficiencies, Purcell factors, and
    the detection efficiency are dimensionless.
    """

    mu_zpl: float
    mu_total: float
    gamma_zpl: float
    gamma_r_total: float
    Gamma_bound: float
    qe1: float
    qe2: float
    F_min_A1: float
    F_min_A2: float
    tau_shortened_A1: float
    tau_shortened_A2: float
    Gamma_multiphonon: float
    eta_det: float

    def __post_init__(self) -> None:
        for name in ("mu_zpl", "mu_total"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        for name in ("gamma_zpl", "gamma_r_total", "Gamma_bound",
                     "Gamma_multiphonon"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        for name in ("qe1", "qe2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v!r}")
        for name in ("F_min_A1", "F_min_A2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 1.0:
                raise ValueError(f"{name} must be >= 1, got {v!r}")
        for name in ("tau_shortened_A1", "tau_shortened_A2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if not math.isnan(self.eta_det) and not 0.0 <= self.eta_det <= 1.0:
            raise ValueError(f"eta_det must be in [0, 1], got {self.eta_det!r}")


def _chain(cal: FieldCalibration, mat: MaterialParams, rates: RateSet,
           wavelength: float, gamma_deph: float,
           measured_psb_khz: Optional[float], pump_rate: float,
           ) -> Tuple[DerivedQuantities, Dict[str, object]]:
    report: Dict[str, object] = {}
    notes = []

    def entry(key: str, value: float, units: str, formula: str) -> float:
        report[key] = {"value": float(value), "units": units, "formula": formula}
        return float(value)

    e_sil = entry("E_sil", field_in_sil(cal), "V/m",
                  "E_bulk*sqrt(P_sat_bulk/P_sat_sil)")
    e_local = entry("E_local", local_field(e_sil, mat.epsilon), "V/m",
                    "E_sil*(epsilon+2)/3")
    entry("sigma_E", cal.pulse_fwhm / (2.0 * math.sqrt(math.log(2.0))), "ns",
          "fwhm/(2*sqrt(ln 2))")
    mu_zpl = entry("mu_zpl", dipole_from_pi_pulse(e_local, cal.pulse_fwhm),
                   "e*Angstrom", "pi*hbar/(E_local*sigma_E*sqrt(2*pi))")
    gamma_zpl = entry("gamma_zpl",
                      zpl_rate_from_dipole(mu_zpl, mat.refractive_index, wavelength),
                      "1/ns", "n*omega^3*mu^2/(3*eps0*pi*c^3*hbar)")

    tau_combined = 1.0 / (rates.gamma_r + rates.Gamma_nr)
    rad = radiative_chain(gamma_zpl, mat.dwf, rates.tau_e1, rates.tau_e2,
                          tau_combined, mu_zpl=mu_zpl)
    entry("gamma_r_total", rad.gamma_r_total, "1/ns", "gamma_zpl/dwf")
    entry("mu_total", rad.mu_total, "e*Angstrom", "mu_zpl/sqrt(dwf)")
    entry("Gamma_bound", rad.Gamma_bound, "1/ns", "1/tau_combined - gamma_r_total")
    if rad.floored:
        notes.append("gamma_r_total exceeds the combined decay rate; the "
                     "non-radiative bound was floored at zero")
    entry("qe1", rad.qe1, "", "gamma_r_total*tau_e1")
    entry("qe2", rad.qe2, "", "gamma_r_total*tau_e2")

    pb1 = purcell_requirement(gamma_zpl, rates.tau_e1, gamma_deph)
    pb2 = purcell_requirement(gamma_zpl, rates.tau_e2, gamma_deph)
    entry("F_min_A1", pb1.F_min, "",
          "((1/tau_e1 - gamma_zpl) + gamma_deph)/gamma_zpl")
    entry("F_min_A2", pb2.F_min, "",
          "((1/tau_e2 - gamma_zpl) + gamma_deph)/gamma_zpl")
    tau_s1 = entry("tau_shortened_A1", pb1.tau_shortened(max(pb1.F_min, 1.0)),
                   "ns", "1/(1/tau_e1 + (F_min - 1)*gamma_zpl)")
    tau_s2 = entry("tau_shortened_A2", pb2.tau_shortened(max(pb2.F_min, 1.0)),
                   "ns", "1/(1/tau_e2 + (F_min - 1)*gamma_zpl)")

    f_osc = entry("oscillator_strength",
                  oscillator_strength(1.0 / rad.gamma_r_total,
                                      mat.refractive_index, wavelength),
                  "", "6*pi*eps0*m*c^3/(n^3*e^2*omega0^2*tau_r)")
    entry("phonon_order_p", mat.p, "", "hbar_omega_0/hbar_omega_op")
    entry("morse_factor_B", morse_factor(mat.p), "",
          "(2^p - 1)^2*p^(p-2)/Gamma(p+1)^2")
    g_mp = entry("Gamma_multiphonon", multiphonon_rate(mat, f_osc), "1/s",
                 "kappa*exp(-alpha*hbar_omega_0)")
    t_factor = entry("temperature_factor",
                     multiphonon_temperature(1.0, mat.temperature,
                                             mat.hbar_omega_op, mat.p),
                     "", "(1 + n_Bose(T))^p")
    entry("Gamma_multiphonon_at_T", g_mp * t_factor, "1/s",
          "Gamma_multiphonon*temperature_factor")
    if rad.Gamma_bound > 0.0 and g_mp < 1e-3 * rad.Gamma_bound * 1e9:
        notes.append("the multiphonon estimate is far below the direct "
                     "non-radiative bound; the bound is not phonon-limited")

    ss = ratedyn.cw_steady_state(rates, pump_rate, pump_rate)
    n_e1 = entry("n_e1_saturation", float(ss["e1"]), "",
                 "steady state at saturating pump")
    n_e2 = entry("n_e2_saturation", float(ss["e2"]), "",
                 "steady state at saturating pump")
    i_psb = entry("I_psb_saturation",
                  (1.0 - mat.dwf) * rad.gamma_r_total * (n_e1 + n_e2) * 1e3,
                  "MHz", "(1 - dwf)*gamma_r_total*(n_e1 + n_e2)")
    if measured_psb_khz is not None:
        eta = entry("eta_det",
                    collection_efficiency(measured_psb_khz, i_psb * 1e3),
                    "", "measured_rate/predicted_rate")
    else:
        eta = math.nan
        report["eta_det"] = {"value": eta, "units": "",
                             "formula": "measured_rate/predicted_rate"}

    report["notes"] = tuple(notes)
    dq = DerivedQuantities(
        mu_zpl=mu_zpl, mu_total=rad.mu_total, gamma_zpl=gamma_zpl,
        gamma_r_total=rad.gamma_r_total, Gamma_bound=rad.Gamma_bound,
        qe1=rad.qe1, qe2=rad.qe2, F_min_A1=pb1.F_min, F_min_A2=pb2.F_min,
        tau_shortened_A1=tau_s1, tau_shortened_A2=tau_s2,
        Gamma_multiphonon=g_mp, eta_det=eta)
    return dq, report


def derived_quantities(cal: Optional[FieldCalibration] = None,
                       mat: Optional[MaterialParams] = None,
                       rates: Optional[RateSet] = None,
                       wavelength: float = DEFAULT_WAVELENGTH,
                       gamma_deph: float = 0.0,
                       measured_psb_khz: Optional[float] = 33.0,
                       pump_rate: float = SATURATING_PUMP) -> DerivedQuantities:
    """Run the full derived-quantity chain; defaults reproduce the V1
    figures of merit from the nominal calibration and rate set."""
    cal = cal if cal is not None else FieldCalibration()
    mat = mat if mat is not None else MaterialParams()
    rates = rates if rates is not None else V1_RATES
    return _chain(cal, mat, rates, wavelength, gamma_deph,
                  measured_psb_khz, pump_rate)[0]


def derived_report(cal: Optional[FieldCalibration] = None,
                   mat: Optional[MaterialParams] = None,
                   rates: Optional[RateSet] = None,
                   wavelength: float = DEFAULT_WAVELENGTH,
                   gamma_deph: float = 0.0,
                   measured_psb_khz: Optional[float] = 33.0,
                   pump_rate: float = SATURATING_PUMP) -> Dict[str, object]:
    """Same chain as derived_quantities but returning every intermediate
    value with units and a formula tag, in stable key order."""
    cal = cal if cal is not None else FieldCalibration()
    mat = mat if mat is not None else MaterialParams()
    rates = rates if rates is not None else V1_RATES
    return _chain(cal, mat, rates, wavelength, gamma_deph,
                  measured_psb_khz, pump_rate)[1]
