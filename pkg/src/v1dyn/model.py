"""Domain types and unit conventions for the V1 spin-optical dynamics toolkit.

Units used throughout the package:

* time in ns, rates in 1/ns
* Hamiltonian parameters (splittings, detunings, Rabi frequencies) in MHz,
  interpreted as ordinary frequencies and converted to angular units
  internally (rad/ns = 2pi * 1e-3 * MHz)
* energies in eV, optical pulse energies in fJ
* electric fields in V/m, optical powers in uW

All parameter objects are immutable; invalid values are rejected on
construction with explicit errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple, Union

import numpy as np

__all__ = [
    "LEVELS_5",
    "LEVELS_6",
    "RateSet",
    "SixLevelParams",
    "LevelPopulations",
    "DeltaPulse",
    "GaussianPulse",
    "QuasiCW",
    "Wait",
    "PulseSequence",
    "FluorescenceTrace",
    "MaterialParams",
    "FieldCalibration",
    "FitResult",
    "NoSolutionError",
    "V1_RATES",
    "V1_RATES_DEPLETION",
    "rate_set_from_lifetimes",
    "from_mapping",
]

# canonical level ordering shared by every vector/matrix in the package
LEVELS_5 = ("g1", "g2", "e1", "e2", "d")
LEVELS_6 = ("g1", "g2", "e1", "e2", "d1", "d2")

POPULATION_TOL = 1e-9


class NoSolutionError(ValueError):
    """Raised when an inversion has no solution in the physical domain."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _finite(x: float) -> bool:
    return math.isfinite(x)


@dataclass(frozen=True)
class RateSet:
    """Transition rates of the five-level model, all in 1/ns.

    Parameters
    ----------
    gamma_r : float
        Radiative decay rate e_i -> g_i (spin independent).
    Gamma_nr : float
        Direct non-radiative decay rate e_i -> g_i (spin independent).
    gamma1, gamma2 : float
        Intersystem-crossing rates e1 -> d and e2 -> d.
    gamma3, gamma4 : float
        Intersystem-crossing rates d -> g1 and d -> g2.  In the five-level
        model the metastable doublet is merged into one state and each
        return channel enters the generator with rate gamma_{i+2}/2.
    split_known : bool
        False when only the sum gamma_r + Gamma_nr is known (the usual case
        when the rates come from lifetime inversion); the sum is then stored
        on gamma_r with Gamma_nr = 0.
    """

    gamma_r: float
    Gamma_nr: float
    gamma1: float
    gamma2: float
    gamma3: float
    gamma4: float
    split_known: bool = True

    def __post_init__(self) -> None:
        for name in ("gamma_r", "Gamma_nr", "gamma1", "gamma2", "gamma3", "gamma4"):
            v = getattr(self, name)
            _require(_finite(v) and v >= 0.0, f"{name} must be finite and >= 0, got {v!r}")
        _require(self.gamma_r > 0.0, "gamma_r must be > 0")

    @property
    def gamma_e1(self) -> float:
        """Total decay rate of e1 (1/ns)."""
        return self.gamma_r + self.Gamma_nr + self.gamma1

    @property
    def gamma_e2(self) -> float:
        """Total decay rate of e2 (1/ns)."""
        return self.gamma_r + self.Gamma_nr + self.gamma2

    @property
    def tau_e1(self) -> float:
        """Excited-state lifetime of e1 (ns)."""
        return 1.0 / self.gamma_e1

    @property
    def tau_e2(self) -> float:
        """Excited-state lifetime of e2 (ns)."""
        return 1.0 / self.gamma_e2

    @property
    def tau_ms(self) -> float:
        """Metastable-state lifetime 2/(gamma3 + gamma4) (ns)."""
        _require(self.gamma3 + self.gamma4 > 0.0, "gamma3 + gamma4 must be > 0 for tau_ms")
        return 2.0 / (self.gamma3 + self.gamma4)

# nominal rate set of a single V1 center at cryogenic temperature,
# pulse-train measurement: 1/(gamma_r+Gamma) = 9.0 ns, 1/gamma1 = 11.4 ns,
# 1/gamma2 = 20.5 ns, tau_ms = 240 ns with gamma3 = gamma4
V1_RATES = RateSet(
    gamma_r=1.0 / 9.0,
    Gamma_nr=0.0,
    gamma1=1.0 / 11.4,
    gamma2=1.0 / 20.5,
    gamma3=1.0 / 240.0,
    gamma4=1.0 / 240.0,
    split_known=False,
)

# rate set from the resonant-depletion global fit (gamma3 != gamma4)
V1_RATES_DEPLETION = RateSet(
    gamma_r=1.0 / 9.1,
    Gamma_nr=0.0,
    gamma1=1.0 / 11.3,
    gamma2=1.0 / 20.6,
    gamma3=1.0 / 270.0,
    gamma4=1.0 / 250.0,
    split_known=False,
)


@dataclass(frozen=True)
class SixLevelParams:
    """Parameters of the coherent six-level model.

    Parameters
    ----------
    rates : RateSet
    lambda_mix : float
        Coherent mixing amplitude between the metastable doublets (1/ns,
        used directly as an angular frequency in the Hamiltonian).
    gamma_s : float
        Pure dephasing rate between the doublets (1/ns).
    D_g, D_e : float
        Ground and excited-state zero-field splitting parameters (MHz);
        the A1/A2 optical transitions are split by 4|D_g - D_e|.
    delta_L : float
        Laser detuning (MHz); see `lindblad.resonant_detuning`.
    rabi_peak : float
        Peak Rabi frequency of the drive (MHz, ordinary frequency).
    """

    rates: RateSet
    lambda_mix: float = 1.0
    gamma_s: float = 0.0
    D_g: float = 2.25
    D_e: float = 250.0
    delta_L: float = 0.0
    rabi_peak: float = 0.0

    def __post_init__(self) -> None:
        _require(isinstance(self.rates, RateSet), "rates must be a RateSet")
        _require(_finite(self.lambda_mix) and self.lambda_mix >= 0.0, "lambda_mix must be >= 0")
        _require(_finite(self.gamma_s) and self.gamma_s >= 0.0, "gamma_s must be >= 0")
        _require(_finite(self.rabi_peak) and self.rabi_peak >= 0.0, "rabi_peak must be >= 0")
        for name in ("D_g", "D_e", "delta_L"):
            _require(_finite(getattr(self, name)), f"{name} must be finite")


@dataclass(frozen=True)
class LevelPopulations:
    """Nonnegative level populations summing to one.

    The vector is indexed by the canonical level ordering: five-level
    (g1, g2, e1, e2, d) or six-level (g1, g2, e1, e2, d1, d2).
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        _require(v.ndim == 1 and len(v) in (5, 6), "populations must be a vector of length 5 or 6")
        _require(bool(np.all(np.isfinite(v))), "populations must be finite")
        _require(bool(np.all(v >= -POPULATION_TOL)), f"populations must be >= 0, got {v}")
        _require(bool(np.all(v <= 1.0 + POPULATION_TOL)), f"populations must be <= 1, got {v}")
        s = float(v.sum())
        _require(abs(s - 1.0) <= 1e-9, f"populations must sum to 1 within 1e-9, got {s!r}")

    @property
    def labels(self) -> Tuple[str, ...]:
        return LEVELS_5 if len(self.values) == 5 else LEVELS_6

    def __getitem__(self, label: str) -> float:
        return float(self.values[self.labels.index(label)])

    @classmethod
    def depolarized_ground(cls, n_levels: int = 5) -> "LevelPopulations":
        v = np.zeros(n_levels)
        v[0] = v[1] = 0.5
        return cls(v)

    @classmethod
    def pure(cls, label: str, n_levels: int = 5) -> "LevelPopulations":
        labels = LEVELS_5 if n_levels == 5 else LEVELS_6
        v = np.zeros(n_levels)
        v[labels.index(label)] = 1.0
        return cls(v)

    def as_dict(self) -> dict:
        return {k: float(x) for k, x in zip(self.labels, self.values)}


@dataclass(frozen=True)
class DeltaPulse:
    """Instantaneous broadband pulse moving fraction P_e of each ground
    population to its excited partner (models the 56 ps pulses)."""

    excitation_probability: float

    def __post_init__(self) -> None:
        p = self.excitation_probability
        _require(_finite(p) and 0.0 <= p <= 1.0, f"excitation_probability must be in [0, 1], got {p!r}")

    @property
    def duration(self) -> float:
        return 0.0


@dataclass(frozen=True)
class GaussianPulse:
    """Resonant Gaussian drive pulse.

    `fwhm` is the intensity FWHM (ns); the field envelope then has standard
    deviation sigma_E = fwhm / (2 sqrt(ln 2)).  `rabi_peak` is the peak Rabi
    frequency in MHz.  The segment spans `duration` ns (default 2*center).
    """

    rabi_peak: float
    fwhm: float
    center: float
    duration: Optional[float] = None
    target: str = "A1"

    def __post_init__(self) -> None:
        _require(_finite(self.rabi_peak) and self.rabi_peak >= 0.0, "rabi_peak must be >= 0")
        _require(_finite(self.fwhm) and self.fwhm > 0.0, "fwhm must be > 0")
        _require(_finite(self.center) and self.center > 0.0, "center must be > 0")
        if self.duration is not None:
            _require(self.duration > 0.0, "duration must be > 0")
        _require(self.target in ("A1", "A2"), f"target must be 'A1' or 'A2', got {self.target!r}")

    @property
    def sigma(self) -> float:
        """Field-envelope standard deviation (ns)."""
        return self.fwhm / (2.0 * math.sqrt(math.log(2.0)))

    @property
    def span(self) -> float:
        return self.duration if self.duration is not None else 2.0 * self.center


@dataclass(frozen=True)
class QuasiCW:
    """Quasi-cw resonant drive: Omega(t) = amplitude * |sin(2 pi f t)| with
    f = mod_frequency (intensity modulated at 2f)."""

    amplitude: float
    mod_frequency: float
    duration: float
    target: str = "A1"

    def __post_init__(self) -> None:
        _require(_finite(self.amplitude) and self.amplitude >= 0.0, "amplitude must be >= 0")
        _require(_finite(self.mod_frequency) and self.mod_frequency > 0.0, "mod_frequency must be > 0")
        _require(_finite(self.duration) and self.duration > 0.0, "duration must be > 0")
        _require(self.target in ("A1", "A2"), f"target must be 'A1' or 'A2', got {self.target!r}")


@dataclass(frozen=True)
class Wait:
    """Free evolution for `duration` ns."""

    duration: float

    def __post_init__(self) -> None:
        _require(_finite(self.duration) and self.duration > 0.0, "duration must be > 0")


Segment = Union[DeltaPulse, GaussianPulse, QuasiCW, Wait]


@dataclass(frozen=True)
class PulseSequence:
    """Ordered drive segments applied left to right."""

    segments: Tuple[Segment, ...]

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        _require(len(segs) > 0, "sequence must contain at least one segment")
        for s in segs:
            _require(isinstance(s, (DeltaPulse, GaussianPulse, QuasiCW, Wait)),
                     f"unknown segment type {type(s).__name__}")
        _require(_finite(self.total_duration), "total sequence duration must be finite")

    @property
    def total_duration(self) -> float:
        total = 0.0
        for s in self.segments:
            if isinstance(s, DeltaPulse):
                continue
            total += s.span if isinstance(s, GaussianPulse) else s.duration
        return total


@dataclass(frozen=True)
class FluorescenceTrace:
    """Time-binned expected photon emission rate.

    Parameters
    ----------
    times : np.ndarray
        Bin centers (ns), strictly increasing.
    emission_rate : np.ndarray
        Expected detected emission rate per bin (1/ns):
        detection_factor * gamma_r * (n_e1 + n_e2).
    detection_factor : float
        Overall scaling applied to the intrinsic emission rate.
    """

    times: np.ndarray
    emission_rate: np.ndarray
    detection_factor: float = 1.0

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        r = np.asarray(self.emission_rate, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "emission_rate", r)
        _require(t.ndim == 1 and r.shape == t.shape, "times and emission_rate must match")
        _require(bool(np.all(np.diff(t) > 0)), "times must be strictly increasing")
        _require(bool(np.all(np.isfinite(r))) and bool(np.all(r >= -1e-12)),
                 "emission rates must be finite and >= 0")
        _require(_finite(self.detection_factor) and self.detection_factor >= 0.0,
                 "detection_factor must be >= 0")

    def sample_counts(self, bin_width: float, seed: int) -> np.ndarray:
        """Draw Poisson counts with mean emission_rate * bin_width."""
        _require(bin_width > 0.0, "bin_width must be > 0")
        rng = np.random.default_rng(seed)
        return rng.poisson(np.clip(self.emission_rate, 0.0, None) * bin_width)

    def total(self) -> float:
        """Trapezoidal integral of the emission rate over the trace."""
        return float(np.trapezoid(self.emission_rate, self.times))


@dataclass(frozen=True)
class MaterialParams:
    """Host and emitter constants feeding the photophysics chain.

    Defaults describe the V1 center in 4H-SiC: refractive index and
    dielectric constant at 862 nm, 8% Debye-Waller factor, optical phonon
    cutoff 118.3 meV, transition energy 1.438 eV, formation energy 8.96 eV
    (dissociation energy D = E_f/2 = 4.48 eV).
    """

    refractive_index: float = 2.6
    epsilon: float = 6.76
    dwf: float = 0.08
    rho_M: float = 3.17e3           # kg/m^3
    a: float = 3.094e-10            # m
    N_c: int = 4
    E_f: float = 8.96               # eV
    hbar_omega_op: float = 0.1183   # eV
    hbar_omega_0: float = 1.438     # eV
    temperature: float = 4.0        # K

    def __post_init__(self) -> None:
        for name in ("refractive_index", "epsilon", "rho_M", "a", "E_f",
                     "hbar_omega_op", "hbar_omega_0"):
            v = getattr(self, name)
            _require(_finite(v) and v > 0.0, f"{name} must be > 0, got {v!r}")
        _require(0.0 < self.dwf <= 1.0, f"dwf must be in (0, 1], got {self.dwf!r}")
        _require(int(self.N_c) == self.N_c and self.N_c > 0, "N_c must be a positive integer")
        _require(_finite(self.temperature) and self.temperature >= 0.0, "temperature must be >= 0")
        _require(self.p >= 1.0, f"hbar_omega_0/hbar_omega_op must be >= 1, got {self.p!r}")

    @property
    def p(self) -> float:
        """Minimum number of cutoff phonons bridging the transition energy."""
        return self.hbar_omega_0 / self.hbar_omega_op


@dataclass(frozen=True)
class FieldCalibration:
    """Optical field calibration inputs.

    Defaults are the measured values for the solid-immersion-lens geometry:
    simulated focal field in bulk 4.9 kV/m, cw saturation powers 819/254 uW
    (bulk/SIL), pi-pulse energy 2.8 fJ at 1.5 ns intensity FWHM, 87%
    objective transmission.
    """

    E_bulk: float = 4.9e3            # V/m
    P_sat_bulk: float = 819.0        # uW
    P_sat_sil: float = 254.0         # uW
    pi_pulse_energy: float = 2.8     # fJ
    pulse_fwhm: float = 1.5          # ns
    objective_transmission: float = 0.87

    def __post_init__(self) -> None:
        for f_ in fields(self):
            v = getattr(self, f_.name)
            _require(_finite(v) and v > 0.0, f"{f_.name} must be > 0, got {v!r}")
        _require(self.objective_transmission <= 1.0, "objective_transmission must be <= 1")


@dataclass(frozen=True)
class FitResult:
    """Named parameter estimates with uncertainties and run diagnostics."""

    names: Tuple[str, ...]
    values: np.ndarray
    uncertainties: np.ndarray
    objective: float
    converged: bool
    iterations: int
    units: Tuple[str, ...] = ()
    warnings: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        u = np.asarray(self.uncertainties, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "uncertainties", u)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "units", tuple(self.units) if self.units else ("",) * len(v))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        _require(len(self.names) == len(v) == len(u), "names/values/uncertainties must match")
        _require(bool(np.all(np.isnan(u) | (u >= 0.0))), "uncertainties must be >= 0")
        if self.converged:
            _require(_finite(self.objective), "objective must be finite on success")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def uncertainty(self, name: str) -> float:
        return float(self.uncertainties[self.names.index(name)])

    def as_dict(self) -> dict:
        return {
            "parameters": {n: float(v) for n, v in zip(self.names, self.values)},
            "uncertainties": {n: float(u) for n, u in zip(self.names, self.uncertainties)},
            "units": {n: u for n, u in zip(self.names, self.units)},
            "objective": float(self.objective),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "warnings": list(self.warnings),
        }


def _alpha_slope_forward(gamma_sum: float, g1: float, g2: float,
                         g3: float, g4: float) -> float:
    """Two-pulse prefactor per unit excitation probability, evaluated from
    the closed form (see ratedyn.alpha_prefactor for the printed layout)."""
    te1 = 1.0 / (gamma_sum + g1)
    te2 = 1.0 / (gamma_sum + g2)
    tms = 2.0 / (g3 + g4)
    a = (g3 * te1 + g4 * te2) / (g3 / g1 + g4 / g2)
    b = 1.0 - (g3 * te2 + g4 * te1) / 2.0
    c = (1.0 - te1 / tms) * (1.0 - te2 / tms)
    return a * b / c


def rate_set_from_lifetimes(tau_e1: float, tau_e2: float, tau_ms: float,
                            alpha_slope: float, gamma34_ratio: float = 1.0) -> RateSet:
    """Invert measured lifetimes and the two-pulse prefactor slope into rates.

    Solves for (gamma1, gamma2, gamma_r + Gamma_nr) given

    * tau_e1, tau_e2 : excited-state lifetimes (ns)
    * tau_ms : metastable lifetime (ns), fixing gamma3 + gamma4 = 2/tau_ms
    * alpha_slope : two-pulse prefactor per unit excitation probability
    * gamma34_ratio : gamma3/gamma4 (1 for V1, where the observed ground-state
      depolarization implies equal return rates)

    The difference gamma1 - gamma2 = 1/tau_e1 - 1/tau_e2 is fixed, so the
    remaining scalar unknown is found by bisection on gamma1.  The sum
    gamma_r + Gamma_nr is not separable here and is returned on gamma_r with
    Gamma_nr = 0 and split_known = False.

    Raises
    ------
    NoSolutionError
        If alpha_slope exceeds the maximum attainable value for the given
        lifetimes.
    ValueError
        On ordering violations (tau_ms <= tau_e, nonpositive inputs).
    """
    _require(tau_e1 > 0.0 and tau_e2 > 0.0, "lifetimes must be > 0")
    _require(tau_ms > tau_e1 and tau_ms > tau_e2, "tau_ms must exceed both excited lifetimes")
    _require(0.0 < alpha_slope < 1.0, f"alpha_slope must be in (0, 1), got {alpha_slope!r}")
    _require(gamma34_ratio > 0.0, "gamma34_ratio must be > 0")

    g34_sum = 2.0 / tau_ms
    g3 = g34_sum * gamma34_ratio / (1.0 + gamma34_ratio)
    g4 = g34_sum / (1.0 + gamma34_ratio)

    k1 = 1.0 / tau_e1
    k2 = 1.0 / tau_e2
    delta = k1 - k2           # gamma1 - gamma2, fixed by the lifetimes

    lo = max(delta, 0.0)      # gamma2 > 0 and gamma_sum < k2
    hi = k1                   # gamma_sum > 0
    eps = 1e-14 * k1

    def f(g1: float) -> float:
        g2 = g1 - delta
        gamma_sum = k1 - g1
        return _alpha_slope_forward(gamma_sum, g1, g2, g3, g4) - alpha_slope

    f_lo = f(lo + eps)
    f_hi = f(hi - eps)
    # slope grows monotonically with gamma1 (stronger ISC branching)
    if f_hi < 0.0:
        raise NoSolutionError(
            f"alpha_slope={alpha_slope!r} exceeds the maximum attainable "
            f"{alpha_slope + f_hi:.6f} for these lifetimes")
    if f_lo > 0.0:
        raise NoSolutionError(
            f"alpha_slope={alpha_slope!r} is below the minimum attainable "
            f"{alpha_slope + f_lo:.6f} for these lifetimes")

    a, b = lo + eps, hi - eps
    for _ in range(200):
        m = 0.5 * (a + b)
        if f(m) < 0.0:
            a = m
        else:
            b = m
        if b - a <= 1e-15 * k1:
            break
    g1 = 0.5 * (a + b)
    g2 = g1 - delta
    gamma_sum = k1 - g1
    return RateSet(gamma_r=gamma_sum, Gamma_nr=0.0, gamma1=g1, gamma2=g2,
                   gamma3=g3, gamma4=g4, split_known=False)


_CONFIG_TYPES = {
    "rates": RateSet,
    "six_level": SixLevelParams,
    "material": MaterialParams,
    "field_calibration": FieldCalibration,
}


def from_mapping(cls, mapping: dict):
    """Construct a parameter dataclass from a key/value mapping.

    Unknown keys are rejected with an error listing all of them; missing
    keys fall back to the dataclass defaults (fields without defaults are
    required).  `SixLevelParams.rates` may be given as a nested mapping.
    """
    known = {f_.name: f_ for f_ in fields(cls)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ValueError(
            f"unknown keys for {cls.__name__}: {', '.join(unknown)}; "
            f"valid keys: {', '.join(sorted(known))}")
    kwargs = dict(mapping)
    if cls is SixLevelParams and isinstance(kwargs.get("rates"), dict):
        kwargs["rates"] = from_mapping(RateSet, kwargs["rates"])
    return cls(**kwargs)
