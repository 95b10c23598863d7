"""Fitting and inversion: exponential/saturation fits, two-pulse analysis,
pulse-energy correction, and global depletion-curve fitting.

The simplex and differential-evolution optimizers are written out in full
rather than taken from scipy: the global depletion fit depends on their
exact update rules staying fixed (generation-synchronous DE, seeded and
bit-for-bit reproducible), and the convergence loop reuses their result
objects.  Plain single-curve least squares goes through
scipy.optimize.curve_fit.

Weighting: when a dataset carries no uncertainties, Poisson-motivated
weights sigma^2 = max(y, 1) are used (photon-counting data); this reduces
to unit weights for normalized signals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit

from .model import FitResult, RateSet, SixLevelParams
from . import lindblad

__all__ = [
    "Dataset",
    "FitError",
    "DepletionFitConfig",
    "fit_exponential",
    "fit_saturation",
    "excitation_probability",
    "pulse_energy_correction",
    "fit_two_pulse",
    "nelder_mead",
    "differential_evolution",
    "fit_depletion_global",
    "read_dataset_csv",
    "write_fit_json",
]

ENERGY_FLUCTUATION_WARN = 0.01   # relative pulse-energy spread considered normal


class FitError(RuntimeError):
    """A fit failed; `result` carries the best-so-far FitResult if any."""

    def __init__(self, message: str, result: Optional[FitResult] = None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class Dataset:
    """One measured or synthetic curve: x, y, optional y uncertainties.

    metadata carries protocol tags (e.g. "P_e", "power", "target") used by
    the joint fits.
    """

    x: np.ndarray
    y: np.ndarray
    sigma: Optional[np.ndarray] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.ndim != 1 or len(x) == 0:
            raise ValueError("x must be a non-empty 1-d array")
        if len(x) != len(y):
            raise ValueError(f"x and y lengths differ: {len(x)} vs {len(y)}")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("x and y must be finite")
        if np.any(np.diff(x) <= 0.0):
            raise ValueError("x must be strictly increasing")
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            object.__setattr__(self, "sigma", s)
            if len(s) != len(x):
                raise ValueError("sigma length must match x")
            if not np.all(np.isfinite(s)) or np.any(s <= 0.0):
                raise ValueError("uncertainties must be positive and finite")

    def __len__(self) -> int:
        return len(self.x)

    def weights_sigma(self) -> np.ndarray:
        """Per-point sigma: the stored uncertainties, else Poisson-motivated
        sqrt(max(y, 1))."""
        if self.sigma is not None:
            return self.sigma
        return np.sqrt(np.maximum(self.y, 1.0))


# --------------------------------------------------------------------------
# single-curve least squares


def _curve_fit_result(model: Callable, data: Dataset, p0: Sequence[float],
                      names: Tuple[str, ...], what: str) -> Tuple[np.ndarray, np.ndarray]:
    sigma = data.weights_sigma()
    try:
        popt, pcov = curve_fit(model, data.x, data.y, p0=p0, sigma=sigma,
                               absolute_sigma=data.sigma is not None,
                               maxfev=20000)
    except RuntimeError as exc:
        raise FitError(f"{what} fit did not converge: {exc}") from exc
    perr = np.sqrt(np.clip(np.diag(pcov), 0.0, None))
    return popt, perr


def fit_exponential(data: Dataset, with_offset: bool = False) -> FitResult:
    """Least-squares fit of A exp(-t/tau) (+ c with with_offset).

    Returns amplitude, tau, offset; uncertainties from the Jacobian at the
    optimum.  Constant data is flagged: amplitude ~ 0 and tau has no
    meaning there.
    """
    if len(data) < 4:
        raise ValueError(f"need >= 4 points for an exponential fit, got {len(data)}")
    y = data.y
    spread = float(np.ptp(y))
    scale = max(abs(float(np.max(np.abs(y)))), 1e-300)
    if spread <= 1e-12 * scale:
        # degenerate: nothing decays
        mean = float(np.mean(y))
        offset = mean if with_offset else 0.0
        return FitResult(
            names=("amplitude", "tau", "offset"),
            values=np.array([0.0 if with_offset else mean, np.nan, offset]),
            uncertainties=np.array([np.nan, np.nan, np.nan]),
            objective=float(np.sum((y - mean) ** 2)),
            converged=True, iterations=0,
            warnings=("constant data: amplitude consistent with zero, "
                      "tau unidentifiable",))

    c0 = float(np.min(y)) if with_offset else 0.0
    a0 = float(y[0]) - c0
    if a0 == 0.0:
        a0 = spread
    span = float(data.x[-1] - data.x[0])
    tau0 = span / 3.0

    if with_offset:
        def model(t, a, tau, c):
            return a * np.exp(-t / tau) + c
        popt, perr = _curve_fit_result(model, data, (a0, tau0, c0),
                                       ("amplitude", "tau", "offset"), "exponential")
        values = popt
    else:
        def model(t, a, tau):
            return a * np.exp(-t / tau)
        popt, perr = _curve_fit_result(model, data, (a0, tau0),
                                       ("amplitude", "tau"), "exponential")
        values = np.append(popt, 0.0)
        perr = np.append(perr, 0.0)

    resid = (model(data.x, *popt) - y) / data.weights_sigma()
    return FitResult(names=("amplitude", "tau", "offset"), values=values,
                     uncertainties=perr, objective=float(np.sum(resid ** 2)),
                     converged=True, iterations=1)


def fit_saturation(data: Dataset) -> FitResult:
    """Fit of the saturation law I = I0 (1 - exp(-x/E_s)).

    Raises FitError when the data lie entirely in the linear regime (the
    two parameters then enter only through their ratio).
    """
    if len(data) < 3:
        raise ValueError(f"need >= 3 points for a saturation fit, got {len(data)}")
    x_max = float(np.max(data.x))
    i0_0 = float(np.max(data.y)) * 1.05
    es_0 = x_max / 3.0

    def model(x, i0, es):
        return i0 * (1.0 - np.exp(-x / es))

    popt, perr = _curve_fit_result(model, data, (i0_0, es_0), ("I0", "E_s"),
                                   "saturation")
    i0, es = popt
    resid = (model(data.x, *popt) - data.y) / data.weights_sigma()
    result = FitResult(names=("I0", "E_s"), values=popt, uncertainties=perr,
                       objective=float(np.sum(resid ** 2)),
                       converged=True, iterations=1)
    if es > 5.0 * x_max or not np.isfinite(perr[1]) or perr[1] > abs(es):
        raise FitError("saturation scale unidentifiable: all points lie in "
                       f"the linear regime (fitted E_s = {es:.3g} vs "
                       f"x_max = {x_max:.3g})", result=result)
    return result


def excitation_probability(E_p, E_s: float):
    """Per-pulse excitation probability 1 - exp(-E_p/E_s)."""
    if E_s <= 0.0:
        raise ValueError(f"E_s must be > 0, got {E_s!r}")
    E_p = np.asarray(E_p, dtype=float)
    if np.any(E_p < 0.0):
        raise ValueError("pulse energy must be >= 0")
    out = -np.expm1(-E_p / E_s)
    return float(out) if out.ndim == 0 else out


def pulse_energy_correction(data: Dataset, pulse_energies: Sequence[float],
                            E_s: float) -> Dataset:
    """Rescale a two-pulse signal for per-point pulse-energy fluctuations.

    Each point is multiplied by P_e(mean energy)/P_e(E_i), removing the
    linear sensitivity of the prefactor to the per-pulse excitation
    probability.  Spreads beyond 1% are accepted with a warning recorded
    in the returned metadata.
    """
    energies = np.asarray(pulse_energies, dtype=float)
    if len(energies) != len(data):
        raise ValueError("need one pulse energy per data point")
    if np.any(energies <= 0.0):
        raise ValueError("pulse energies must be > 0 for the correction")
    p_ref = excitation_probability(float(np.mean(energies)), E_s)
    p_i = excitation_probability(energies, E_s)
    factor = p_ref / p_i
    meta = dict(data.metadata)
    spread = float(np.max(np.abs(energies / np.mean(energies) - 1.0)))
    if spread > ENERGY_FLUCTUATION_WARN:
        meta["energy_correction_warning"] = (
            f"pulse-energy spread {spread:.1%} exceeds the expected 1%")
    meta["energy_corrected"] = True
    sigma = None if data.sigma is None else data.sigma * factor
    return Dataset(data.x, data.y * factor, sigma, meta)


# --------------------------------------------------------------------------
# two-pulse joint fit


def _two_pulse_profile(datasets: Sequence[Dataset], tau_ms: float,
                       ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Profiled chi^2 over the per-dataset amplitudes at fixed tau_ms:
    the amplitude enters linearly, so each alpha_k is closed-form."""
    chi2 = 0.0
    alphas = np.empty(len(datasets))
    sig_alphas = np.empty(len(datasets))
    for k, ds in enumerate(datasets):
        w = 1.0 / ds.weights_sigma() ** 2
        e = np.exp(-ds.x / tau_ms)
        denom = float(np.sum(w * e * e))
        alpha = float(np.sum(w * ds.y * e)) / denom
        chi2 += float(np.sum(w * (ds.y - alpha * e) ** 2))
        alphas[k] = alpha
        sig_alphas[k] = math.sqrt(1.0 / denom)
    return chi2, alphas, sig_alphas


def _minimize_tau(datasets: Sequence[Dataset], lo: float, hi: float) -> float:
    """Golden-section minimum of the profiled chi^2 in log(tau_ms)."""
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(lo), math.log(hi)
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc = _two_pulse_profile(datasets, math.exp(c))[0]
    fd = _two_pulse_profile(datasets, math.exp(d))[0]
    for _ in range(200):
        if b - a < 1e-12:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = _two_pulse_profile(datasets, math.exp(c))[0]
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = _two_pulse_profile(datasets, math.exp(d))[0]
    return math.exp((a + b) / 2.0)


def _tau_curvature_sigma(datasets: Sequence[Dataset], tau: float) -> float:
    """1-sigma width of the profiled chi^2 around its minimum."""
    h = 1e-3 * tau
    f0 = _two_pulse_profile(datasets, tau)[0]
    fp = _two_pulse_profile(datasets, tau + h)[0]
    fm = _two_pulse_profile(datasets, tau - h)[0]
    curv = (fp - 2.0 * f0 + fm) / (h * h)
    if curv <= 0.0:
        return math.inf
    return math.sqrt(2.0 / curv)


def fit_two_pulse(datasets: Sequence[Dataset], min_tau: float = 0.0,
                  tau_bounds: Tuple[float, float] = (10.0, 1e5)) -> FitResult:
    """Joint two-pulse fit: one shared metastable decay time, one amplitude
    per dataset, and the amplitude-versus-P_e slope through the origin.

    Datasets are exponential-decay signals versus pump-probe delay; the
    excitation probability of each dataset is read from metadata["P_e"].
    min_tau drops delay points below the validity domain of the analytic
    form.  Raises FitError when the per-dataset decay times disagree
    beyond 3 sigma.
    """
    if len(datasets) == 0:
        raise ValueError("need at least one dataset")
    used = []
    for ds in datasets:
        keep = ds.x >= min_tau
        if np.sum(keep) < 8:
            raise ValueError("need >= 8 delay points per dataset "
                             f"(after the min_tau cut {min_tau:g})")
        sigma = None if ds.sigma is None else ds.sigma[keep]
        used.append(Dataset(ds.x[keep], ds.y[keep], sigma, dict(ds.metadata)))
    warnings = []
    if len(used) == 1:
        warnings.append("single dataset: slope taken from one excitation "
                        "level, uncertainty inflated")

    tau = _minimize_tau(used, *tau_bounds)
    chi2, alphas, sig_alphas = _two_pulse_profile(used, tau)
    sig_tau = _tau_curvature_sigma(used, tau)

    # per-dataset consistency: each curve alone must give the same decay
    if len(used) > 1:
        taus_k = np.array([_minimize_tau([ds], *tau_bounds) for ds in used])
        sigs_k = np.array([_tau_curvature_sigma([ds], t)
                           for ds, t in zip(used, taus_k)])
        for i in range(len(used)):
            for j in range(i + 1, len(used)):
                gap = abs(taus_k[i] - taus_k[j])
                err = math.hypot(sigs_k[i], sigs_k[j])
                if np.isfinite(err) and gap > 3.0 * err:
                    raise FitError(
                        f"inconsistent decay times: datasets {i} and {j} give "
                        f"{taus_k[i]:.1f} and {taus_k[j]:.1f} ns "
                        f"({gap/err:.1f} sigma apart)")

    p_e = [ds.metadata.get("P_e") for ds in used]
    names = ["tau_ms"]
    values = [tau]
    uncertainties = [sig_tau]
    for k, ds in enumerate(used):
        tag = f"{p_e[k]:g}" if p_e[k] is not None else str(k)
        names.append(f"alpha_{tag}")
        values.append(alphas[k])
        uncertainties.append(sig_alphas[k])

    if all(p is not None for p in p_e):
        p_arr = np.asarray(p_e, dtype=float)
        w = 1.0 / sig_alphas ** 2
        denom = float(np.sum(w * p_arr * p_arr))
        slope = float(np.sum(w * alphas * p_arr)) / denom
        sig_slope = math.sqrt(1.0 / denom)
        if len(used) == 1:
            sig_slope *= 10.0
        else:
            # alpha(P_e)/P_e consistency across datasets
            ratios = alphas / p_arr
            sig_ratios = sig_alphas / p_arr
            spread = float(np.max(ratios) - np.min(ratios))
            if spread > 3.0 * float(np.max(sig_ratios)) * 2.0:
                warnings.append("alpha/P_e varies beyond fit error across "
                                "datasets; prefactor linearity is strained")
        names.append("alpha_slope")
        values.append(slope)
        uncertainties.append(sig_slope)
    else:
        warnings.append("missing P_e metadata: alpha-versus-P_e slope not fitted")

    return FitResult(names=tuple(names), values=np.asarray(values),
                     uncertainties=np.asarray(uncertainties),
                     objective=chi2, converged=True, iterations=1,
                     warnings=tuple(warnings))


# --------------------------------------------------------------------------
# optimizers


def nelder_mead(objective: Callable[[np.ndarray], float], x0: Sequence[float],
                reflection: float = 1.0, expansion: float = 2.0,
                contraction: float = 0.5, shrink: float = 0.5,
                x_tol: float = 1e-10, f_tol: float = 1e-10,
                max_iter: Optional[int] = None,
                names: Optional[Sequence[str]] = None) -> FitResult:
    """Simplex descent (reflect/expand/contract/shrink), deterministic.

    Terminates when the simplex diameter falls below x_tol and the spread
    of function values below f_tol * max(1, |f_best|); raises FitError
    with the best-so-far result when max_iter is exhausted first.
    """
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    if n == 0:
        raise ValueError("x0 must be non-empty")
    f0 = float(objective(x0))
    if not math.isfinite(f0):
        raise ValueError(f"objective is not finite at x0: {f0!r}")
    if max_iter is None:
        max_iter = 400 * n

    # standard initial simplex: 5% displacement per coordinate
    simplex = np.tile(x0, (n + 1, 1))
    for i in range(n):
        if simplex[i + 1, i] != 0.0:
            simplex[i + 1, i] *= 1.05
        else:
            simplex[i + 1, i] = 0.00025
    fvals = np.array([f0] + [float(objective(p)) for p in simplex[1:]])

    def make_result(converged: bool, iterations: int) -> FitResult:
        order = np.argsort(fvals, kind="stable")
        best = simplex[order[0]]
        nm = tuple(names) if names is not None else tuple(f"x{i}" for i in range(n))
        return FitResult(names=nm, values=best,
                         uncertainties=np.full(n, np.nan),
                         objective=float(fvals[order[0]]),
                         converged=converged, iterations=iterations)

    for it in range(max_iter):
        order = np.argsort(fvals, kind="stable")
        simplex = simplex[order]
        fvals = fvals[order]
        diam = float(np.max(np.abs(simplex[1:] - simplex[0])))
        spread = float(fvals[-1] - fvals[0])
        if diam <= x_tol and spread <= f_tol * max(1.0, abs(float(fvals[0]))):
            return make_result(True, it)

        centroid = np.mean(simplex[:-1], axis=0)
        xr = centroid + reflection * (centroid - simplex[-1])
        fr = float(objective(xr))
        if fr < fvals[0]:
            xe = centroid + expansion * (xr - centroid)
            fe = float(objective(xe))
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = centroid + contraction * (xr - centroid)
            else:
                xc = centroid + contraction * (simplex[-1] - centroid)
            fc = float(objective(xc))
            if fc < min(fr, fvals[-1]):
                simplex[-1], fvals[-1] = xc, fc
            else:
                simplex[1:] = simplex[0] + shrink * (simplex[1:] - simplex[0])
                fvals[1:] = [float(objective(p)) for p in simplex[1:]]

    raise FitError(f"simplex did not converge in {max_iter} iterations",
                   result=make_result(False, max_iter))


def differential_evolution(objective: Callable[[np.ndarray], float],
                           bounds: Sequence[Tuple[float, float]],
                           population: Optional[int] = None,
                           F: float = 0.8, CR: float = 0.9,
                           seed: Optional[int] = None,
                           max_generations: int = 1000,
                           tol: float = 1e-12,
                           names: Optional[Sequence[str]] = None) -> FitResult:
    """Generation-synchronous rand/1/bin differential evolution.

    All trial vectors of a generation are built from the current
    population and reduced in index order, so results are bit-for-bit
    reproducible for a given seed regardless of evaluation order.
    Returns the best member with the final population spread as a
    per-dimension uncertainty proxy; raises FitError with the best-so-far
    result when max_generations is exhausted before the population
    converges (std of objective values <= tol * max(1, |mean|)).
    """
    bounds_arr = np.asarray(bounds, dtype=float)
    if bounds_arr.ndim != 2 or bounds_arr.shape[1] != 2:
        raise ValueError("bounds must be a sequence of (low, high) pairs")
    if not np.all(np.isfinite(bounds_arr)):
        raise ValueError("bounds must be finite")
    lo, hi = bounds_arr[:, 0], bounds_arr[:, 1]
    if np.any(hi <= lo):
        raise ValueError("each bound must satisfy low < high")
    dim = len(bounds_arr)
    if population is None:
        population = 15 * dim
    if population < 4:
        raise ValueError(f"population must be >= 4, got {population}")

    rng = np.random.default_rng(seed)
    pop = rng.uniform(lo, hi, size=(population, dim))

    def safe_eval(x: np.ndarray) -> float:
        v = float(objective(x))
        return v if math.isfinite(v) else math.inf

    fvals = np.array([safe_eval(x) for x in pop])

    def make_result(converged: bool, generations: int) -> FitResult:
        i_best = int(np.argmin(fvals))
        nm = tuple(names) if names is not None else tuple(f"x{i}" for i in range(dim))
        return FitResult(names=nm, values=pop[i_best].copy(),
                         uncertainties=np.std(pop, axis=0),
                         objective=float(fvals[i_best]),
                         converged=converged, iterations=generations)

    for gen in range(1, max_generations + 1):
        finite = fvals[np.isfinite(fvals)]
        if len(finite) == population and \
                float(np.std(finite)) <= tol * max(1.0, abs(float(np.mean(finite)))):
            return make_result(True, gen - 1)

        trials = np.empty_like(pop)
        for i in range(population):
            idx = rng.choice(population - 1, size=3, replace=False)
            idx[idx >= i] += 1          # distinct from i
            r1, r2, r3 = pop[idx]
            mutant = np.clip(r1 + F * (r2 - r3), lo, hi)
            cross = rng.random(dim) < CR
            cross[rng.integers(dim)] = True
            trials[i] = np.where(cross, mutant, pop[i])
        f_trials = np.array([safe_eval(x) for x in trials])
        accept = f_trials <= fvals
        pop[accept] = trials[accept]
        fvals[accept] = f_trials[accept]

    raise FitError(f"population did not converge in {max_generations} "
                   "generations", result=make_result(False, max_generations))


# --------------------------------------------------------------------------
# global depletion fit


@dataclass(frozen=True)
class DepletionFitConfig:
    """Options for the joint depletion-curve fit.

    Lifetime bounds are in ns for (1/gamma_r, 1/gamma1, 1/gamma2,
    1/gamma3, 1/gamma4); omega bounds are the per-power drive amplitudes
    in MHz.  The forward model runs in constant-drive mode on the target
    ground population, matching normalized synthetic or measured curves.
    """

    lambda_mix: float = 1.0
    gamma_s: float = 0.0
    D_g: float = 2.25
    D_e: float = 250.0
    lifetime_bounds: Tuple[Tuple[float, float], ...] = (
        (5.0, 15.0), (5.0, 30.0), (8.0, 45.0), (100.0, 500.0), (100.0, 500.0))
    # None: each power's drive amplitude is searched in (power/4, 4*power),
    # reading the nominal power label as an amplitude scale in MHz
    omega_bounds: Optional[Tuple[float, float]] = None
    seed: int = 7
    de_population: Optional[int] = None     # default 15 x dim
    de_generations: int = 60
    nm_max_iter: int = 4000
    refinement_rounds: int = 2
    refinement_step: float = 0.08


_LIFETIME_NAMES = ("tau_r", "tau_1", "tau_2", "tau_3", "tau_4")


def _depletion_params(theta: np.ndarray, config: DepletionFitConfig,
                      ) -> SixLevelParams:
    rates = RateSet(1.0 / theta[0], 0.0, 1.0 / theta[1], 1.0 / theta[2],
                    1.0 / theta[3], 1.0 / theta[4], split_known=False)
    return SixLevelParams(rates, lambda_mix=config.lambda_mix,
                          gamma_s=config.gamma_s, D_g=config.D_g,
                          D_e=config.D_e)


def _depletion_objective(datasets: Sequence[Dataset], powers: Sequence[float],
                         config: DepletionFitConfig,
                         bounds: Sequence[Tuple[float, float]],
                         ) -> Callable[[np.ndarray], float]:
    power_index = {p: i for i, p in enumerate(powers)}
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(theta: np.ndarray) -> float:
        # keep the unbounded simplex stage inside the search box
        if np.any(theta < lo) or np.any(theta > hi):
            return math.inf
        try:
            params = _depletion_params(theta, config)
        except ValueError:
            return math.inf
        chi2 = 0.0
        for ds in datasets:
            omega = theta[5 + power_index[ds.metadata["power"]]]
            try:
                _, sim = lindblad.simulate_depletion(
                    params, omega, ds.x, target=str(ds.metadata["target"]),
                    mode="cw", readout="population")
            except (ValueError, np.linalg.LinAlgError):
                return math.inf
            r = (sim - ds.y) / ds.weights_sigma()
            chi2 += float(np.sum(r * r))
        return chi2 if math.isfinite(chi2) else math.inf

    return objective


def _hessian_ci(objective: Callable[[np.ndarray], float], theta: np.ndarray,
                rel_step: float = 1e-3) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """95% half-widths from the local quadratic model of a chi^2 surface:
    cov = 2 H^-1, interval 1.96 sqrt(diag cov)."""
    n = len(theta)
    h = rel_step * np.maximum(np.abs(theta), 1.0)
    f0 = objective(theta)
    H = np.empty((n, n))
    warnings = []
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (objective(theta + ei) - 2.0 * f0 + objective(theta - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (objective(theta + ei + ej) - objective(theta + ei - ej)
                                 - objective(theta - ei + ej) + objective(theta - ei - ej)
                                 ) / (4.0 * h[i] * h[j])
    try:
        cov = 2.0 * np.linalg.inv(H)
        diag = np.diag(cov).copy()
    except np.linalg.LinAlgError:
        diag = np.full(n, np.nan)
        warnings.append("singular curvature matrix: confidence intervals "
                        "unavailable")
    bad = ~(diag > 0.0)
    if np.any(bad) and not warnings:
        warnings.append("non-positive curvature for some parameters; their "
                        "intervals are reported as NaN")
    diag[bad] = np.nan
    return 1.96 * np.sqrt(diag), tuple(warnings)


def fit_depletion_global(datasets: Sequence[Dataset],
                         config: Optional[DepletionFitConfig] = None) -> FitResult:
    """Joint fit of depletion curves at several powers and both targets.

    Free parameters: the five lifetimes (1/gamma_r, 1/gamma1..4) shared by
    all curves, plus one drive amplitude per distinct power level (shared
    between the A1 and A2 curves of that power).  Differential evolution
    seeds a simplex refinement; a convergence-analysis loop then restarts
    the simplex from perturbed gamma1/gamma2 values and keeps the best
    minimum.  Reported uncertainties are 95% confidence half-widths from
    the objective curvature.

    Each dataset needs metadata["power"] and metadata["target"] ("A1" or
    "A2").  Fitting normalized curves leaves gamma3/gamma4 nearly
    degenerate unless both targets are present; weakly constrained
    parameters are flagged.
    """
    if config is None:
        config = DepletionFitConfig()
    if len(datasets) == 0:
        raise ValueError("need at least one dataset")
    for ds in datasets:
        if "power" not in ds.metadata or "target" not in ds.metadata:
            raise ValueError("each dataset needs metadata 'power' and 'target'")
        if str(ds.metadata["target"]) not in ("A1", "A2"):
            raise ValueError(f"target must be 'A1' or 'A2', got "
                             f"{ds.metadata['target']!r}")
    powers = sorted({float(ds.metadata["power"]) for ds in datasets})
    warnings = []
    if len(powers) < 2:
        warnings.append("single power level: gamma_3 and gamma_4 are weakly "
                        "constrained")
    targets = {str(ds.metadata["target"]) for ds in datasets}
    if targets != {"A1", "A2"}:
        warnings.append("curves for only one target transition: normalized "
                        "signals leave the branching ratios poorly determined")

    if config.omega_bounds is None:
        omega_bounds = [(p / 4.0, 4.0 * p) for p in powers]
    else:
        omega_bounds = [config.omega_bounds] * len(powers)
    bounds = list(config.lifetime_bounds) + omega_bounds
    objective = _depletion_objective(datasets, powers, config, bounds)
    names = _LIFETIME_NAMES + tuple(f"omega_{p:g}" for p in powers)

    try:
        coarse = differential_evolution(
            objective, bounds, population=config.de_population, seed=config.seed,
            max_generations=config.de_generations, tol=1e-4, names=names)
    except FitError as exc:
        if exc.result is None:
            raise
        coarse = exc.result
        warnings.append("global stage hit its generation limit; refined from "
                        "best member")

    def refine(x0: np.ndarray) -> FitResult:
        # parameter scales span 1e1..1e2 and curvature intervals ~1e-1, so a
        # 1e-4 simplex diameter resolves every parameter far below its CI
        try:
            return nelder_mead(objective, x0, max_iter=config.nm_max_iter,
                               x_tol=1e-4, f_tol=1e-8, names=names)
        except FitError as exc:
            if exc.result is None:
                raise
            return exc.result

    best = refine(coarse.values)
    iterations = coarse.iterations + best.iterations

    # convergence analysis over gamma1 and gamma2: restart the simplex from
    # perturbed branching lifetimes and keep the lowest minimum found
    rng = np.random.default_rng(config.seed + 1)
    for _ in range(config.refinement_rounds):
        x0 = best.values.copy()
        x0[1] *= 1.0 + config.refinement_step * rng.standard_normal()
        x0[2] *= 1.0 + config.refinement_step * rng.standard_normal()
        x0[1:3] = np.clip(x0[1:3], [b[0] for b in bounds[1:3]],
                          [b[1] for b in bounds[1:3]])
        trial = refine(x0)
        iterations += trial.iterations
        if trial.objective < best.objective:
            best = trial
    if not best.converged:
        raise FitError("depletion fit did not converge within the simplex "
                       f"budget (objective {best.objective:.4g})", result=best)

    ci, ci_warnings = _hessian_ci(objective, best.values)
    warnings.extend(ci_warnings)

    # sensitivity flags: parameters whose 2% perturbation barely moves chi^2
    f_best = best.objective
    for i, name in enumerate(names):
        x = best.values.copy()
        x[i] *= 1.02
        if objective(x) - f_best < 0.5:
            warnings.append(f"{name} is weakly constrained by these curves")

    return FitResult(names=names, values=best.values, uncertainties=ci,
                     objective=best.objective, converged=True,
                     iterations=iterations,
                     units=("ns", "ns", "ns", "ns", "ns") + ("MHz",) * len(powers),
                     warnings=tuple(warnings))


# --------------------------------------------------------------------------
# I/O helpers


def read_dataset_csv(path: str, **metadata) -> Dataset:
    """Read a dataset from CSV with a header line (x, y[, sigma]); lines
    starting with '#' are comments."""
    with open(path) as fh:
        # genfromtxt(names=True) would read the column names from a leading
        # comment line, so strip comments before handing the rows over
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: no data rows")
    raw = np.genfromtxt(lines, delimiter=",", names=True)
    cols = raw.dtype.names
    if cols is None or len(cols) < 2:
        raise ValueError(f"{path}: expected columns x, y[, sigma]")
    x = np.atleast_1d(raw[cols[0]])
    y = np.atleast_1d(raw[cols[1]])
    sigma = np.atleast_1d(raw[cols[2]]) if len(cols) >= 3 else None
    return Dataset(x, y, sigma, dict(metadata))


def write_fit_json(path: str, result: FitResult,
                   seed: Optional[int] = None) -> None:
    """JSON fit report: parameters, uncertainties, objective, iterations."""
    payload = result.as_dict()
    payload["seed"] = seed
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
