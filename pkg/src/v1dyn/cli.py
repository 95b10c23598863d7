"""Config-driven command line for reproducible simulation and fit runs.

Each run is described by one TOML config file; the command line adds only
the output directory, the seed, and ad-hoc ``--set key=value`` overrides.
Every run writes its data files plus a ``manifest.json`` recording the
resolved configuration, package versions, and SHA-256 checksums of all
outputs, so a run can be reproduced and diffed byte for byte.  The
manifest is written even when the run fails, with the error recorded.

Commands
--------
simulate
    ``protocol`` is one of lifetime, rabi, pulse-train, two-pulse,
    depletion, steady-state; protocol options sit at the top level and
    model parameters in optional ``[rates]`` / ``[six_level]`` /
    ``[field_calibration]`` tables (missing tables fall back to the
    published values).
fit
    ``kind`` is one of exponential, saturation, two-pulse, depletion.
    Single-curve fits take ``data = "file.csv"``; joint fits take
    ``[[datasets]]`` entries with per-curve metadata, and the depletion
    fit accepts a ``[fit]`` table with solver options.
derive
    Optional ``[field_calibration]`` / ``[material]`` / ``[rates]``
    tables plus scalar overrides; writes the full derived-quantity
    report with a stable key order.
sweep
    ``parameter`` (dotted key), ``values``, and a ``[run]`` table holding
    a complete simulate/fit/derive config; each point runs in its own
    ``point_NNN`` subdirectory with its own manifest.  Points are
    independent and may run in parallel (``V1DYN_THREADS``).

Exit codes: 0 success, 2 configuration error, 3 fit non-convergence,
4 I/O error.
"""

import argparse
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from copy import deepcopy
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, inference, lindblad, photophys, ratedyn
from .inference import DepletionFitConfig, FitError, read_dataset_csv, write_fit_json
from .model import (
    DeltaPulse,
    FieldCalibration,
    LevelPopulations,
    MaterialParams,
    PulseSequence,
    RateSet,
    SixLevelParams,
    V1_RATES,
    Wait,
    from_mapping,
)

__all__ = ["ConfigError", "RunConfig", "main"]

DEFAULT_SEED = 7
THREADS_ENV = "V1DYN_THREADS"


class ConfigError(ValueError):
    """Invalid run configuration; the message lists every problem found."""


@dataclass(frozen=True)
class RunConfig:
    """One command-line invocation: command, file paths, seed, overrides."""

    command: str
    config_path: str
    out_dir: str
    seed: int = DEFAULT_SEED
    overrides: Tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# config plumbing


def _coerce(raw, kind: str):
    if kind == "float":
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ValueError(f"expected a number, got {raw!r}")
        return float(raw)
    if kind == "int":
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ValueError(f"expected an integer, got {raw!r}")
        return raw
    if kind == "str":
        if not isinstance(raw, str):
            raise ValueError(f"expected a string, got {raw!r}")
        return raw
    if kind == "bool":
        if not isinstance(raw, bool):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw
    if kind == "floats":
        if not isinstance(raw, list) or not raw:
            raise ValueError(f"expected a non-empty array of numbers, got {raw!r}")
        return [_coerce(v, "float") for v in raw]
    raise AssertionError(kind)


class _Options:
    """Typed consumer for one configuration table.

    take()/table()/params() pop keys as they validate them; finish()
    rejects whatever is left and raises a single ConfigError listing
    every problem found, so a bad config is reported in one pass.
    """

    def __init__(self, mapping: dict, where: str = "config"):
        self._map = dict(mapping)
        self._where = where
        self.errors: List[str] = []

    def error(self, message: str) -> None:
        self.errors.append(message)

    def take(self, key: str, kind: str, default=None, required: bool = False,
             choices: Optional[Sequence[str]] = None):
        if key not in self._map:
            if required:
                self.error(f"missing required key '{key}'")
            return default
        raw = self._map.pop(key)
        try:
            value = _coerce(raw, kind)
        except ValueError as exc:
            self.error(f"key '{key}': {exc}")
            return default
        if choices is not None and value not in choices:
            self.error(f"key '{key}': expected one of "
                       f"{', '.join(map(str, choices))}, got {value!r}")
            return default
        return value

    def table(self, key: str) -> Optional[dict]:
        if key not in self._map:
            return None
        raw = self._map.pop(key)
        if not isinstance(raw, dict):
            self.error(f"key '{key}': expected a table")
            return None
        return raw

    def tables(self, key: str) -> List[dict]:
        if key not in self._map:
            self.error(f"missing required [[{key}]] entries")
            return []
        raw = self._map.pop(key)
        if not isinstance(raw, list) or not all(isinstance(v, dict) for v in raw) or not raw:
            self.error(f"key '{key}': expected one or more [[{key}]] tables")
            return []
        return raw

    def params(self, key: str, cls):
        """Parameter dataclass from a nested table, or None when absent."""
        raw = self.table(key)
        if raw is None:
            return None
        try:
            return from_mapping(cls, raw)
        except (TypeError, ValueError) as exc:
            self.error(f"[{key}]: {exc}")
            return None

    def merge(self, other: "_Options") -> None:
        try:
            other.finish()
        except ConfigError as exc:
            self.error(str(exc))

    def finish(self) -> None:
        for key in sorted(self._map):
            self.error(f"unknown key '{key}'")
        if self.errors:
            raise ConfigError(f"invalid {self._where}:\n"
                              + "\n".join("  - " + e for e in self.errors))


def _rates_from(opts: _Options) -> RateSet:
    rates = opts.params("rates", RateSet)
    return V1_RATES if rates is None else rates


def _six_level_from(opts: _Options) -> SixLevelParams:
    """[six_level] table (with optional nested rates) or [rates] plus
    default coherent parameters; the published rates when neither is given."""
    six_raw = opts.table("six_level")
    rates = opts.params("rates", RateSet)
    if six_raw is None:
        return SixLevelParams(V1_RATES if rates is None else rates)
    if "rates" in six_raw and rates is not None:
        opts.error("give [rates] or [six_level.rates], not both")
    elif "rates" not in six_raw:
        six_raw = dict(six_raw, rates=V1_RATES if rates is None else rates)
    try:
        return from_mapping(SixLevelParams, six_raw)
    except (TypeError, ValueError) as exc:
        opts.error(f"[six_level]: {exc}")
        return SixLevelParams(V1_RATES)


# ---------------------------------------------------------------------------
# file writers


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


def _write_columns_csv(path: Path, units: str, names: Sequence[str],
                       columns: Sequence[np.ndarray]) -> None:
    header = [f"# {units}", ",".join(names)]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, np.column_stack(columns), delimiter=",", fmt="%.12g")


def _write_residuals_csv(path: Path, dataset: inference.Dataset,
                         model: np.ndarray) -> None:
    sigma = dataset.weights_sigma()
    _write_columns_csv(
        path, "x as in the dataset; weighted_residual = (y - model)/sigma",
        ("x", "y", "model", "weighted_residual"),
        (dataset.x, dataset.y, model, (dataset.y - model) / sigma))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# simulate protocols


def _sim_lifetime(opts: _Options, out: Path, seed: int) -> List[Path]:
    rates = _rates_from(opts)
    branch = opts.take("branch", "str", "both", choices=("A1", "A2", "both"))
    p_e = opts.take("P_e", "float", 0.5)
    t_max = opts.take("t_max_ns", "float", 60.0)
    sample_dt = opts.take("sample_dt_ns", "float", 0.05)
    opts.finish()

    written = []
    pairs = (("A1", "g1"), ("A2", "g2"))
    for target, level in pairs:
        if branch not in (target, "both"):
            continue
        sequence = PulseSequence((DeltaPulse(p_e), Wait(t_max)))
        times, pops, trace = ratedyn.simulate_sequence(
            rates, sequence, p0=LevelPopulations.pure(level), sample_dt=sample_dt)
        path = out / f"lifetime_{target.lower()}.csv"
        ratedyn.write_trace_csv(str(path), times, pops, trace.emission_rate)
        written.append(path)
    return written


def _sim_rabi(opts: _Options, out: Path, seed: int) -> List[Path]:
    six = _six_level_from(opts)
    cal = opts.params("field_calibration", FieldCalibration) or FieldCalibration()
    target = opts.take("target", "str", "A1", choices=("A1", "A2"))
    max_energy = opts.take("max_energy_fJ", "float", 15.0)
    points = opts.take("energy_points", "int", 61)
    fwhm = opts.take("fwhm_ns", "float", 1.5)
    if max_energy is not None and max_energy <= 0.0:
        opts.error("max_energy_fJ must be > 0")
    if points is not None and points < 2:
        opts.error("energy_points must be >= 2")
    opts.finish()

    scale = lindblad.field_scale_from_calibration(cal)
    energies = np.linspace(0.0, max_energy, points)
    _, signal = lindblad.simulate_rabi(six, energies, scale, target=target, fwhm=fwhm)
    path = out / f"rabi_{target.lower()}.csv"
    lindblad.write_curve_csv(
        str(path), energies, signal, "pulse_energy_fJ", "gated_signal",
        units="pulse energy in fJ, gated emission signal dimensionless")
    return [path]


def _sim_pulse_train(opts: _Options, out: Path, seed: int) -> List[Path]:
    rates = _rates_from(opts)
    p_e = opts.take("P_e", "float", 0.608)
    n_pulses = opts.take("n_pulses", "int", 100)
    t_p = opts.take("pulse_spacing_ns", "float", ratedyn.PULSE_SPACING)
    if n_pulses is not None and n_pulses < 1:
        opts.error("n_pulses must be >= 1")
    opts.finish()

    g1_star, g2_star = ratedyn.pulse_train_steady_state_analytic(rates)
    pops = LevelPopulations.depolarized_ground()
    rows = []
    for k in range(1, n_pulses + 1):
        pops = ratedyn.pulse_train_steady_state_simulated(
            rates, p_e, t_p=t_p, N_p=1, relax=0.0, p0=pops)
        rows.append((float(k), *pops.values))
    arr = np.asarray(rows)

    csv_path = out / "pulse_train.csv"
    _write_columns_csv(
        csv_path, "populations sampled after each pulse plus its full gap",
        ("pulse_index", "population_g1", "population_g2", "population_e1",
         "population_e2", "population_d"),
        tuple(arr[:, j] for j in range(arr.shape[1])))

    # the closed form gives the relative ground-state split, which is what
    # a spin-selective readout measures; normalize before comparing
    g_sum = pops["g1"] + pops["g2"]
    json_path = out / "pulse_train.json"
    _write_json(json_path, {
        "analytic_ground_split": {"g1": g1_star, "g2": g2_star},
        "final_ground_split": {"g1": pops["g1"] / g_sum, "g2": pops["g2"] / g_sum},
        "ground_split_deviation": abs(pops["g1"] / g_sum - g1_star),
        "final_populations": pops.as_dict(),
        "pulses": n_pulses,
    })
    return [csv_path, json_path]


def _sim_two_pulse(opts: _Options, out: Path, seed: int) -> List[Path]:
    rates = _rates_from(opts)
    p_e = opts.take("P_e", "float", 0.608)
    mode = opts.take("mode", "str", "analytic", choices=("analytic", "simulated"))
    prep = opts.take("prep", "str", "loop", choices=("loop", "cold", "ideal"))
    taus = opts.take("taus_ns", "floats", None)
    window = opts.take("window_ns", "float", None)
    opts.finish()

    grid = ratedyn.default_tau_grid() if taus is None else np.asarray(taus)
    signal = np.array([
        ratedyn.two_pulse_signal(rates, p_e, tau, mode=mode, prep=prep, window=window)
        for tau in grid])
    path = out / "two_pulse.csv"
    lindblad.write_curve_csv(
        str(path), grid, signal, "tau_ns", "relative_signal",
        units="pump-probe delay tau in ns, relative signal 1 - N2/N1 dimensionless")
    return [path]


def _sim_depletion(opts: _Options, out: Path, seed: int) -> List[Path]:
    six = _six_level_from(opts)
    power = opts.take("power", "float", required=True)
    target = opts.take("target", "str", "A1", choices=("A1", "A2"))
    mode = opts.take("mode", "str", "cw", choices=("cw", "quasi_cw"))
    readout = opts.take("readout", "str", "population", choices=("population", "pulse"))
    taus = opts.take("taus_ns", "floats", None)
    opts.finish()

    grid = (np.concatenate(([0.0], np.geomspace(30.0, 10000.0, 24)))
            if taus is None else np.asarray(taus))
    x, y = lindblad.simulate_depletion(six, power, grid, target=target,
                                       mode=mode, readout=readout)
    path = out / f"depletion_{target.lower()}_p{power:g}.csv"
    lindblad.write_curve_csv(
        str(path), x, y, "tau_ns", "normalized_signal",
        units="pump duration tau in ns, signal normalized to the shortest tau")
    return [path]


def _sim_steady_state(opts: _Options, out: Path, seed: int) -> List[Path]:
    rates = _rates_from(opts)
    w1 = opts.take("W1", "float", photophys.SATURATING_PUMP)
    w2 = opts.take("W2", "float", photophys.SATURATING_PUMP)
    dwf = opts.take("dwf", "float", 0.08)
    eta_det = opts.take("eta_det", "float", 1.0)
    pump_grid = opts.take("pump_grid", "floats", None)
    opts.finish()

    json_path = out / "steady_state.json"
    ratedyn.write_steady_state_json(str(json_path), ratedyn.cw_steady_state(rates, w1, w2))

    grid = (np.geomspace(1e-4, 50.0, 40) if pump_grid is None
            else np.asarray(pump_grid))
    emission = np.array([
        ratedyn.saturation_emission_rate(rates, dwf, eta_det, w, w) for w in grid])
    csv_path = out / "saturation_curve.csv"
    lindblad.write_curve_csv(
        str(csv_path), grid, emission, "pump_rate_per_ns", "emission_rate_MHz",
        units="pump rate W1 = W2 in 1/ns, detected PSB emission rate in MHz")
    return [json_path, csv_path]


_PROTOCOLS: Dict[str, Callable[[_Options, Path, int], List[Path]]] = {
    "lifetime": _sim_lifetime,
    "rabi": _sim_rabi,
    "pulse-train": _sim_pulse_train,
    "two-pulse": _sim_two_pulse,
    "depletion": _sim_depletion,
    "steady-state": _sim_steady_state,
}


# ---------------------------------------------------------------------------
# fit kinds


def _fit_exponential(opts: _Options, out: Path, seed: int) -> List[Path]:
    data_path = opts.take("data", "str", required=True)
    with_offset = opts.take("with_offset", "bool", False)
    opts.finish()

    dataset = read_dataset_csv(data_path)
    result = inference.fit_exponential(dataset, with_offset=with_offset)
    p = dict(zip(result.names, result.values))
    model = p["amplitude"] * np.exp(-dataset.x / p["tau"]) + p["offset"]

    fit_path = out / "fit.json"
    write_fit_json(str(fit_path), result, seed=seed)
    resid_path = out / "residuals.csv"
    _write_residuals_csv(resid_path, dataset, model)
    return [fit_path, resid_path]


def _fit_saturation(opts: _Options, out: Path, seed: int) -> List[Path]:
    data_path = opts.take("data", "str", required=True)
    opts.finish()

    dataset = read_dataset_csv(data_path)
    result = inference.fit_saturation(dataset)
    p = dict(zip(result.names, result.values))
    model = p["I0"] * (1.0 - np.exp(-dataset.x / p["E_s"]))

    fit_path = out / "fit.json"
    write_fit_json(str(fit_path), result, seed=seed)
    resid_path = out / "residuals.csv"
    _write_residuals_csv(resid_path, dataset, model)
    return [fit_path, resid_path]


def _fit_two_pulse(opts: _Options, out: Path, seed: int) -> List[Path]:
    entries = opts.tables("datasets")
    min_tau = opts.take("min_tau_ns", "float", 0.0)
    specs = []
    for i, raw in enumerate(entries):
        sub = _Options(raw, f"[[datasets]] entry {i}")
        path = sub.take("path", "str", required=True)
        p_e = sub.take("P_e", "float", required=True)
        opts.merge(sub)
        specs.append((path, p_e))
    opts.finish()

    datasets = [read_dataset_csv(path, P_e=p_e) for path, p_e in specs]
    result = inference.fit_two_pulse(datasets, min_tau=min_tau)
    p = dict(zip(result.names, result.values))

    fit_path = out / "fit.json"
    write_fit_json(str(fit_path), result, seed=seed)
    written = [fit_path]
    for i, ds in enumerate(datasets):
        alpha = p.get(f"alpha_{ds.metadata['P_e']:g}")
        if alpha is None:
            continue  # dataset entirely below min_tau_ns
        model = alpha * np.exp(-ds.x / p["tau_ms"])
        resid_path = out / f"residuals_{i:03d}.csv"
        _write_residuals_csv(resid_path, ds, model)
        written.append(resid_path)
    return written


def _fit_depletion(opts: _Options, out: Path, seed: int) -> List[Path]:
    entries = opts.tables("datasets")
    fit_raw = opts.table("fit") or {}
    specs = []
    for i, raw in enumerate(entries):
        sub = _Options(raw, f"[[datasets]] entry {i}")
        path = sub.take("path", "str", required=True)
        power = sub.take("power", "float", required=True)
        target = sub.take("target", "str", required=True, choices=("A1", "A2"))
        opts.merge(sub)
        specs.append((path, power, target))
    if "seed" in fit_raw:
        opts.error("[fit]: the seed comes from the command line (--seed)")
        fit_raw = {k: v for k, v in fit_raw.items() if k != "seed"}
    try:
        config = replace(from_mapping(DepletionFitConfig, fit_raw), seed=seed)
    except (TypeError, ValueError) as exc:
        opts.error(f"[fit]: {exc}")
        config = DepletionFitConfig(seed=seed)
    opts.finish()

    datasets = [read_dataset_csv(path, power=power, target=target)
                for path, power, target in specs]
    fit_path = out / "fit.json"
    try:
        result = inference.fit_depletion_global(datasets, config)
    except FitError as exc:
        if exc.result is not None:
            # best point so far, flagged non-converged in the report
            write_fit_json(str(fit_path), exc.result, seed=seed)
        raise

    write_fit_json(str(fit_path), result, seed=seed)
    p = dict(zip(result.names, result.values))
    rates = RateSet(1.0 / p["tau_r"], 0.0, 1.0 / p["tau_1"], 1.0 / p["tau_2"],
                    1.0 / p["tau_3"], 1.0 / p["tau_4"], split_known=False)
    params = SixLevelParams(rates, lambda_mix=config.lambda_mix,
                            gamma_s=config.gamma_s, D_g=config.D_g, D_e=config.D_e)
    written = [fit_path]
    for i, ds in enumerate(datasets):
        omega = p[f"omega_{ds.metadata['power']:g}"]
        _, model = lindblad.simulate_depletion(
            params, omega, ds.x, target=ds.metadata["target"],
            mode="cw", readout="population")
        resid_path = out / f"residuals_{i:03d}.csv"
        _write_residuals_csv(resid_path, ds, model)
        written.append(resid_path)
    return written


_FIT_KINDS: Dict[str, Callable[[_Options, Path, int], List[Path]]] = {
    "exponential": _fit_exponential,
    "saturation": _fit_saturation,
    "two-pulse": _fit_two_pulse,
    "depletion": _fit_depletion,
}


# ---------------------------------------------------------------------------
# derive and sweep


def _cmd_derive(opts: _Options, out: Path, seed: int) -> List[Path]:
    cal = opts.params("field_calibration", FieldCalibration)
    mat = opts.params("material", MaterialParams)
    rates = opts.params("rates", RateSet)
    wavelength = opts.take("wavelength_nm", "float", photophys.DEFAULT_WAVELENGTH)
    gamma_deph = opts.take("gamma_deph", "float", 0.0)
    measured_psb = opts.take("measured_psb_khz", "float", 33.0)
    pump_rate = opts.take("pump_rate", "float", photophys.SATURATING_PUMP)
    opts.finish()

    report = photophys.derived_report(
        cal, mat, rates, wavelength=wavelength, gamma_deph=gamma_deph,
        measured_psb_khz=measured_psb, pump_rate=pump_rate)
    path = out / "derive.json"
    _write_json(path, report)
    return [path]


def _sweep_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(workers, 1)


def _cmd_sweep(cfg: dict, out: Path, seed: int) -> List[Path]:
    opts = _Options(cfg, "sweep config")
    parameter = opts.take("parameter", "str", required=True)
    values = opts._map.pop("values", None)
    if not isinstance(values, list) or not values:
        opts.error("key 'values': expected a non-empty array")
        values = []
    run_raw = opts.table("run")
    if run_raw is None:
        opts.error("missing required [run] table")
    opts.finish()

    command = run_raw.get("command")
    if command not in ("simulate", "fit", "derive"):
        raise ConfigError("[run]: command must be simulate, fit, or derive "
                          f"(got {command!r}); sweeps do not nest")
    base = {k: v for k, v in run_raw.items() if k != "command"}

    points = []
    for i, value in enumerate(values):
        sub_cfg = deepcopy(base)
        _set_dotted(sub_cfg, parameter, value)
        points.append((i, value, sub_cfg, out / f"point_{i:03d}"))

    def run_point(point) -> List[Path]:
        i, value, sub_cfg, sub_out = point
        override = f"{parameter}={json.dumps(value)}"
        return _execute(command, sub_cfg, sub_out, seed,
                        config_path=None, overrides=(override,))

    workers = _sweep_workers()
    written: List[Path] = []
    if workers == 1:
        for point in points:
            written.extend(run_point(point))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for outputs in pool.map(run_point, points):
                written.extend(outputs)

    summary = out / "sweep.json"
    _write_json(summary, {
        "command": command,
        "parameter": parameter,
        "values": values,
        "points": [p[3].name for p in points],
    })
    written.append(summary)
    return written


# ---------------------------------------------------------------------------
# dispatch, manifest, entry point


def _dispatch(command: str, cfg: dict, out: Path, seed: int) -> List[Path]:
    body = {k: v for k, v in cfg.items() if k != "command"}
    if command == "simulate":
        opts = _Options(body, "simulate config")
        protocol = opts.take("protocol", "str", required=True,
                             choices=tuple(_PROTOCOLS))
        if protocol is None:
            # fail on the selector alone; other keys depend on it
            raise ConfigError(f"invalid {opts._where}: {'; '.join(opts.errors)}")
        return _PROTOCOLS[protocol](opts, out, seed)
    if command == "fit":
        opts = _Options(body, "fit config")
        kind = opts.take("kind", "str", required=True, choices=tuple(_FIT_KINDS))
        if kind is None:
            raise ConfigError(f"invalid {opts._where}: {'; '.join(opts.errors)}")
        return _FIT_KINDS[kind](opts, out, seed)
    if command == "derive":
        return _cmd_derive(_Options(body, "derive config"), out, seed)
    if command == "sweep":
        return _cmd_sweep(body, out, seed)
    raise ConfigError(f"unknown command {command!r}")


def _scan_outputs(out: Path) -> Dict[str, str]:
    checksums = {}
    for path in sorted(out.rglob("*")):
        rel = path.relative_to(out).as_posix()
        if rel == "manifest.json" or not path.is_file():
            continue
        checksums[rel] = _sha256(path)
    return checksums


def _write_manifest(out: Path, command: str, config_path: Optional[str],
                    overrides: Sequence[str], resolved: Optional[dict],
                    seed: int, status: str, error: Optional[str]) -> None:
    config_sha = None
    if config_path is not None and Path(config_path).is_file():
        config_sha = _sha256(Path(config_path))
    _write_json(out / "manifest.json", {
        "command": command,
        "status": status,
        "error": error,
        "seed": seed,
        "config_path": config_path,
        "config_sha256": config_sha,
        "overrides": list(overrides),
        "resolved_config": resolved,
        "versions": {
            "v1dyn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": _scan_outputs(out),
    })


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, FitError):
        return 3
    if isinstance(exc, (ConfigError, ValueError)):
        return 2
    if isinstance(exc, OSError):
        return 4
    raise exc


def _execute(command: str, cfg: dict, out: Path, seed: int,
             config_path: Optional[str], overrides: Sequence[str]) -> List[Path]:
    """Run one command in its own directory; the manifest is written on
    both success and failure, then failures propagate to the caller."""
    out.mkdir(parents=True, exist_ok=True)
    try:
        written = _dispatch(command, cfg, out, seed)
    except BaseException as exc:
        _write_manifest(out, command, config_path, overrides, cfg, seed,
                        "error", str(exc) or type(exc).__name__)
        raise
    _write_manifest(out, command, config_path, overrides, cfg, seed, "ok", None)
    return written


def _set_dotted(mapping: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = mapping
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override '{dotted}': '{part}' is not a table")
        node = child
    node[parts[-1]] = value


def _parse_override(item: str) -> Tuple[str, object]:
    key, sep, text = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r}: expected KEY=VALUE")
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text  # bare string
    return key, value


def _load_config(run: RunConfig) -> dict:
    raw = Path(run.config_path).read_bytes()
    try:
        cfg = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{run.config_path}: {exc}")
    for item in run.overrides:
        key, value = _parse_override(item)
        _set_dotted(cfg, key, value)
    declared = cfg.get("command")
    if declared is not None and declared != run.command:
        raise ConfigError(f"config declares command = {declared!r} but "
                          f"'{run.command}' was invoked")
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="v1dyn",
        description="Simulation, fitting, and derived-quantity runs for the "
                    "V1 center's spin-optical dynamics.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "run one simulation protocol and write trace/curve files",
        "fit": "fit one or more datasets and write a fit report",
        "derive": "compute the derived-quantity report from calibrations",
        "sweep": "run a command repeatedly over a parameter grid",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", required=True,
                       help="output directory (created if absent)")
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (default {DEFAULT_SEED})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, TOML value)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    seed = DEFAULT_SEED if args.seed is None else args.seed
    run = RunConfig(args.command, args.config, args.out, seed, tuple(args.set))

    out = Path(run.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"v1dyn {run.command}: error: {exc}", file=sys.stderr)
        return 4

    cfg = None
    try:
        cfg = _load_config(run)
        written = _execute(run.command, cfg, out, run.seed,
                           config_path=run.config_path, overrides=run.overrides)
    except (ConfigError, FitError, ValueError, OSError) as exc:
        if cfg is None:
            # _execute was never reached; record the failure here
            _write_manifest(out, run.command, run.config_path, run.overrides,
                            cfg, run.seed, "error", str(exc) or type(exc).__name__)
        print(f"v1dyn {run.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)

    print(f"v1dyn {run.command}: wrote {len(written)} file(s) plus manifest.json "
          f"to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
