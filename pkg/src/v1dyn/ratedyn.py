"""Exact linear rate-equation dynamics of the five-level model.

The level ordering is (g1, g2, e1, e2, d); see `model.LEVELS_5`.  All
propagation uses matrix exponentials of piecewise-constant generators, so
results are exact up to floating-point rounding.  Emission integrals
N = integral of gamma_r * (n_e1 + n_e2) dt are computed exactly with an
augmented generator (finite windows) or a transient-submatrix solve
(infinite windows), never by quadrature.
"""

from __future__ import annotations

import json
import math
import warnings
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import expm, null_space

from .model import (
    LEVELS_5,
    DeltaPulse,
    FluorescenceTrace,
    LevelPopulations,
    PulseSequence,
    RateSet,
    Wait,
)

__all__ = [
    "build_generator",
    "propagate",
    "apply_delta_pulse",
    "pulse_train_steady_state_analytic",
    "pulse_train_steady_state_simulated",
    "alpha_prefactor",
    "two_pulse_signal",
    "cw_steady_state",
    "saturation_emission_rate",
    "resonant_readout_ratio",
    "default_tau_grid",
    "simulate_sequence",
    "emission_integral",
    "write_trace_csv",
    "write_steady_state_json",
]

# default decay-integration window in units of max(tau_e1, tau_e2);
# truncation error below 1% and cancels almost fully in N2/N1 ratios
WINDOW_TAU_FACTOR = 5.0

# Appendix-style measurement round: 9 initialization pulses 1 us apart,
# 2 us relaxation, pump, variable wait, probe, 1 us decay
INIT_PULSES = 9
PULSE_SPACING = 1000.0   # ns
RELAX_AFTER_TRAIN = 2000.0  # ns
DECAY_AFTER_PROBE = 1000.0  # ns


def build_generator(rates: RateSet, pump_rates: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Rate matrix G with dp/dt = G p in the (g1, g2, e1, e2, d) ordering.

    `pump_rates` are absorption-only optical pump rates W1 (g1 -> e1) and
    W2 (g2 -> e2) in 1/ns.  The merged metastable state returns to each
    ground state at gamma_{i+2}/2, which keeps the five-level model
    equivalent to the six-level one.
    """
    W1, W2 = pump_rates
    if not (W1 >= 0.0 and W2 >= 0.0):
        raise ValueError(f"pump rates must be >= 0, got {pump_rates!r}")
    ge = rates.gamma_r + rates.Gamma_nr
    G = np.zeros((5, 5))
    G[2, 0] = W1
    G[3, 1] = W2
    G[0, 2] = ge
    G[1, 3] = ge
    G[4, 2] = rates.gamma1
    G[4, 3] = rates.gamma2
    G[0, 4] = rates.gamma3 / 2.0
    G[1, 4] = rates.gamma4 / 2.0
    np.fill_diagonal(G, G.diagonal() - G.sum(axis=0))
    return G


def propagate(p0: LevelPopulations, generator: np.ndarray, t: float) -> LevelPopulations:
    """Exact propagation p(t) = exp(G t) p0."""
    if t < 0.0:
        raise ValueError(f"t must be >= 0, got {t!r}")
    G = np.asarray(generator, dtype=float)
    if G.shape != (5, 5):
        raise ValueError(f"generator must be 5x5, got shape {G.shape}")
    if t == 0.0:
        return p0
    return LevelPopulations(expm(G * t) @ p0.values)


def apply_delta_pulse(p: LevelPopulations, P_e: float) -> LevelPopulations:
    """Instantaneous broadband pulse: moves fraction P_e of each ground
    population to its excited partner; the metastable state is unchanged."""
    if not 0.0 <= P_e <= 1.0:
        raise ValueError(f"P_e must be in [0, 1], got {P_e!r}")
    return LevelPopulations(_pulse_matrix(P_e, len(p.values)) @ p.values)


def _pulse_matrix(P_e: float, n: int = 5) -> np.ndarray:
    M = np.eye(n)
    M[0, 0] = M[1, 1] = 1.0 - P_e
    M[2, 0] = M[3, 1] = P_e
    return M


def _emission_weights(rates: RateSet) -> np.ndarray:
    w = np.zeros(5)
    w[2] = w[3] = rates.gamma_r
    return w


def _propagate_emit(p: np.ndarray, G: np.ndarray, w: np.ndarray, t: float) -> Tuple[np.ndarray, float]:
    """Advance t ns and return (p(t), integral of w.p dt over [0, t]), exactly,
    via the augmented generator [[G, 0], [w, 0]]."""
    A = np.zeros((6, 6))
    A[:5, :5] = G
    A[5, :5] = w
    v = expm(A * t) @ np.append(p, 0.0)
    return v[:5], float(v[5])


def emission_integral(p: Union[LevelPopulations, np.ndarray], rates: RateSet,
                      window: float = math.inf,
                      pump_rates: Tuple[float, float] = (0.0, 0.0)) -> float:
    """Exact integral of gamma_r * (n_e1 + n_e2) over [0, window] starting
    from populations `p` under free decay (or constant pump).

    An infinite window requires zero pump (the ground states are then
    absorbing and the transient block is invertible)."""
    v = p.values if isinstance(p, LevelPopulations) else np.asarray(p, dtype=float)
    G = build_generator(rates, pump_rates)
    w = _emission_weights(rates)
    if math.isinf(window):
        if pump_rates != (0.0, 0.0):
            raise ValueError("infinite emission window requires zero pump")
        # transient block over (e1, e2, d): integral n_T dt = -T^{-1} n_T(0)
        trans = [2, 3, 4]
        T = G[np.ix_(trans, trans)]
        nT = np.linalg.solve(-T, v[trans])
        return float(w[trans] @ nT)
    if window < 0.0:
        raise ValueError(f"window must be >= 0, got {window!r}")
    return _propagate_emit(v, G, w, window)[1]


def pulse_train_steady_state_analytic(rates: RateSet) -> Tuple[float, float]:
    """Closed-form ground-state split (n_g1, n_g2) reached by a long train
    of broadband pulses with full relaxation in between.

    n_g1 = (gamma2 tau_e2 / gamma4) / (gamma1 tau_e1 / gamma3 + gamma2 tau_e2 / gamma4)

    Independent of the excitation probability.  Requires all ISC rates > 0;
    warns when tau_ms < 10 max(tau_e), where the full-relaxation assumption
    degrades.
    """
    for name in ("gamma1", "gamma2", "gamma3", "gamma4"):
        if getattr(rates, name) == 0.0:
            raise ValueError(f"analytic steady state requires {name} > 0")
    if rates.tau_ms < 10.0 * max(rates.tau_e1, rates.tau_e2):
        warnings.warn("tau_ms < 10 max(tau_e): pulse-train steady-state "
                      "formula outside its accuracy regime", stacklevel=2)
    a1 = rates.gamma1 * rates.tau_e1 / rates.gamma3
    a2 = rates.gamma2 * rates.tau_e2 / rates.gamma4
    n_g1 = a2 / (a1 + a2)
    return n_g1, 1.0 - n_g1


def pulse_train_steady_state_simulated(rates: RateSet, P_e: float,
                                       t_p: float = PULSE_SPACING,
                                       N_p: int = INIT_PULSES,
                                       relax: float = RELAX_AFTER_TRAIN,
                                       p0: Optional[LevelPopulations] = None) -> LevelPopulations:
    """Populations after N_p broadband pulses spaced t_p plus a trailing
    relaxation window, starting from the fully depolarized ground state
    (or `p0` to chain measurement rounds)."""
    if t_p <= 0.0:
        raise ValueError(f"t_p must be > 0, got {t_p!r}")
    if N_p < 1:
        raise ValueError(f"N_p must be >= 1, got {N_p!r}")
    G = build_generator(rates)
    U_gap = expm(G * t_p)
    M = _pulse_matrix(P_e)
    p = (p0.values if p0 is not None else
         LevelPopulations.depolarized_ground().values).copy()
    for _ in range(N_p):
        p = U_gap @ (M @ p)
    if relax > 0.0:
        # the last inter-pulse gap plus `relax` forms the trailing window
        p = expm(G * relax) @ p
    return LevelPopulations(p)


def alpha_prefactor(rates: RateSet, P_e: float) -> float:
    """Two-pulse visibility prefactor alpha.

    alpha = P_e * (g3 te1 + g4 te2) / (g3/g1 + g4/g2)
                * (1 - (g3 te2 + g4 te1)/2)
                / ((1 - te1/tau_ms) (1 - te2/tau_ms))

    Linear in P_e.  Valid for tau_ms > tau_e1, tau_e2.
    """
    if not 0.0 <= P_e <= 1.0:
        raise ValueError(f"P_e must be in [0, 1], got {P_e!r}")
    if rates.gamma1 == 0.0 or rates.gamma2 == 0.0:
        raise ValueError("alpha_prefactor requires gamma1, gamma2 > 0")
    te1, te2, tms = rates.tau_e1, rates.tau_e2, rates.tau_ms
    if tms <= max(te1, te2):
        raise ValueError(f"tau_ms = {tms:.3g} ns must exceed both excited "
                         f"lifetimes ({te1:.3g}, {te2:.3g} ns)")
    g3, g4 = rates.gamma3, rates.gamma4
    num = (g3 * te1 + g4 * te2) / (g3 / rates.gamma1 + g4 / rates.gamma2)
    mid = 1.0 - (g3 * te2 + g4 * te1) / 2.0
    den = (1.0 - te1 / tms) * (1.0 - te2 / tms)
    return P_e * num * mid / den


def default_tau_grid() -> np.ndarray:
    """Pump-probe delay grid 65 + 30 m ns, m = 0..31."""
    return 65.0 + 30.0 * np.arange(32, dtype=float)


def _round_operator(rates: RateSet, P_e: float, tau: float) -> Tuple[np.ndarray, ...]:
    """Linear maps making up one measurement round.

    Returns (M_pulse, U_gap, U_relax, U_tau, U_decay) for the sequence
    {N_p x (pulse, gap), relax, pump, tau, probe, decay}.
    """
    G = build_generator(rates)
    return (_pulse_matrix(P_e), expm(G * PULSE_SPACING), expm(G * RELAX_AFTER_TRAIN),
            expm(G * tau), expm(G * DECAY_AFTER_PROBE))


def two_pulse_signal(rates: RateSet, P_e: float, tau: float,
                     mode: str = "analytic", prep: str = "loop",
                     window: Optional[float] = None) -> float:
    """Relative two-pulse fluorescence signal 1 - N2/N1 at pump-probe
    delay tau.

    mode "analytic" returns alpha_prefactor * exp(-tau/tau_ms).  mode
    "simulated" runs the full measurement round {9 initialization pulses
    1 us apart, 2 us relaxation, pump, tau, probe, 1 us decay} and
    integrates gamma_r * n_e exactly over a window after each of the two
    pulses (default 5 max(tau_e), capped by the available segment; pass
    math.inf for untruncated integrals).

    prep selects the state entering the simulated round: "loop" (default)
    uses the exact periodic steady state of the repeating round, "cold"
    starts from the depolarized ground state, "ideal" skips the
    initialization train and starts the pump at the analytic steady state.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau!r}")
    if mode == "analytic":
        if tau < 10.0 * max(rates.tau_e1, rates.tau_e2):
            warnings.warn("tau < 10 max(tau_e): analytic two-pulse signal "
                          "outside its accuracy regime", stacklevel=2)
        return alpha_prefactor(rates, P_e) * math.exp(-tau / rates.tau_ms)
    if mode != "simulated":
        raise ValueError(f"mode must be 'analytic' or 'simulated', got {mode!r}")
    if not 0.0 <= P_e <= 1.0:
        raise ValueError(f"P_e must be in [0, 1], got {P_e!r}")

    if window is None:
        window = WINDOW_TAU_FACTOR * max(rates.tau_e1, rates.tau_e2)
    G = build_generator(rates)
    w = _emission_weights(rates)
    M, U_gap, U_relax, U_tau, U_decay = _round_operator(rates, P_e, tau)

    if prep == "ideal":
        n_g1, n_g2 = pulse_train_steady_state_analytic(rates)
        p = np.array([n_g1, n_g2, 0.0, 0.0, 0.0])
    elif prep in ("loop", "cold"):
        train = np.linalg.multi_dot([U_gap, M] * INIT_PULSES)
        if prep == "cold":
            p = U_relax @ train @ LevelPopulations.depolarized_ground().values
        else:
            # exact periodic steady state of the repeating round
            round_op = U_decay @ M @ U_tau @ M @ U_relax @ train
            vecs = null_space(round_op - np.eye(5))
            if vecs.shape[1] != 1:
                raise ValueError("measurement round has no unique periodic state")
            p = vecs[:, 0]
            p = U_relax @ train @ (p / p.sum())
    else:
        raise ValueError(f"prep must be 'loop', 'cold' or 'ideal', got {prep!r}")

    p = _pulse_matrix(P_e) @ p
    if math.isinf(window):
        N1 = emission_integral(p, rates)
        p = U_tau @ p
        p = _pulse_matrix(P_e) @ p
        N2 = emission_integral(p, rates)
    else:
        w1 = min(window, tau)
        p_w, N1 = _propagate_emit(p, G, w, w1)
        p = expm(G * (tau - w1)) @ p_w if tau > w1 else p_w
        p = _pulse_matrix(P_e) @ p
        N2 = _propagate_emit(p, G, w, min(window, DECAY_AFTER_PROBE))[1]
    return 1.0 - N2 / N1


def cw_steady_state(rates: RateSet, W1: float, W2: float) -> LevelPopulations:
    """Steady state under constant absorption-only pump rates W1, W2 (1/ns),
    as the normalized null space of the generator."""
    if W1 < 0.0 or W2 < 0.0:
        raise ValueError("pump rates must be >= 0")
    if W1 == 0.0 and W2 == 0.0:
        raise ValueError("at least one pump rate must be > 0")
    G = build_generator(rates, (W1, W2))
    vecs = null_space(G)
    if vecs.shape[1] != 1:
        raise ValueError("steady state is not unique: generator has a "
                         f"{vecs.shape[1]}-dimensional null space")
    v = vecs[:, 0]
    v = v / v.sum()
    return LevelPopulations(np.clip(v, 0.0, None) / np.clip(v, 0.0, None).sum())


def saturation_emission_rate(rates: RateSet, dwf: float, eta_det: float,
                             W1: float, W2: float) -> float:
    """Detected phonon-sideband emission rate in MHz under cw pumping:
    (1 - dwf) * eta_det * gamma_r * (n_e1 + n_e2)."""
    if not 0.0 < dwf <= 1.0:
        raise ValueError(f"dwf must be in (0, 1], got {dwf!r}")
    if not 0.0 <= eta_det <= 1.0:
        raise ValueError(f"eta_det must be in [0, 1], got {eta_det!r}")
    ss = cw_steady_state(rates, W1, W2)
    n_e = ss["e1"] + ss["e2"]
    return (1.0 - dwf) * eta_det * rates.gamma_r * n_e * 1e3


def resonant_readout_ratio(rates: RateSet, mode: str = "analytic") -> float:
    """Ratio of the spin-state fluorescence responses N_A1/N_A2 read out
    from the pulse-train steady state with spin-selective pulses.

    Analytic mode evaluates (gamma2/gamma1)/(gamma4/gamma3); simulated mode
    prepares the steady-state split, excites one spin branch, and
    integrates gamma_r * n_e over the full decay.  Both agree to rounding.
    """
    if mode == "analytic":
        if rates.gamma1 == 0.0 or rates.gamma4 == 0.0:
            raise ValueError("readout ratio requires gamma1, gamma4 > 0")
        return (rates.gamma2 / rates.gamma1) / (rates.gamma4 / rates.gamma3)
    if mode != "simulated":
        raise ValueError(f"mode must be 'analytic' or 'simulated', got {mode!r}")
    n_g1, n_g2 = pulse_train_steady_state_analytic(rates)
    N = []
    for idx, n_g in ((0, n_g1), (1, n_g2)):
        p = np.zeros(5)
        p[idx + 2] = n_g        # spin-selective unit pulse on that branch
        p[1 - idx] = 1.0 - n_g
        N.append(emission_integral(p, rates))
    return N[0] / N[1]


def simulate_sequence(rates: RateSet, sequence: PulseSequence,
                      p0: Optional[LevelPopulations] = None,
                      sample_dt: float = 1.0,
                      detection_factor: float = 1.0,
                      ) -> Tuple[np.ndarray, np.ndarray, FluorescenceTrace]:
    """Time-resolved populations and emission rate over a pulse sequence.

    Only DeltaPulse and Wait segments evolve a classical rate model;
    coherent drive segments belong to the six-level treatment.  Returns
    (times, populations[n_t, 5], trace) with the emission rate
    detection_factor * gamma_r * (n_e1 + n_e2).
    """
    if sample_dt <= 0.0:
        raise ValueError(f"sample_dt must be > 0, got {sample_dt!r}")
    G = build_generator(rates)
    p = (p0 or LevelPopulations.depolarized_ground()).values.copy()
    times = [0.0]
    pops = [p.copy()]
    t = 0.0
    for seg in sequence.segments:
        if isinstance(seg, DeltaPulse):
            p = _pulse_matrix(seg.excitation_probability) @ p
            pops[-1] = p.copy()   # replace the sample at the pulse instant
            continue
        if not isinstance(seg, Wait):
            raise ValueError(f"rate-model sequences support DeltaPulse and "
                             f"Wait only, got {type(seg).__name__}")
        n = max(1, int(math.ceil(seg.duration / sample_dt)))
        dt = seg.duration / n
        U = expm(G * dt)
        for _ in range(n):
            p = U @ p
            t += dt
            times.append(t)
            pops.append(p.copy())
    times_arr = np.asarray(times)
    pops_arr = np.asarray(pops)
    rate = detection_factor * rates.gamma_r * (pops_arr[:, 2] + pops_arr[:, 3])
    trace = FluorescenceTrace(times_arr, rate, detection_factor)
    return times_arr, pops_arr, trace


def write_trace_csv(path: str, times: np.ndarray, populations: np.ndarray,
                    emission_rate: np.ndarray) -> None:
    """CSV trace export: time_ns, population per level, emission_rate."""
    pops = np.atleast_2d(populations)
    labels = LEVELS_5 if pops.shape[1] == 5 else tuple(f"s{i}" for i in range(pops.shape[1]))
    header = ["# time in ns, emission_rate in 1/ns, populations dimensionless",
              "time_ns," + ",".join(f"population_{k}" for k in labels) + ",emission_rate"]
    body = np.column_stack([times, pops, emission_rate])
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, body, delimiter=",", fmt="%.12g")


def write_steady_state_json(path: str, populations: LevelPopulations) -> None:
    """JSON steady-state export: map level name -> population."""
    with open(path, "w") as fh:
        json.dump(populations.as_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")
