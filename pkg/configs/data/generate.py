"""Regenerate the example datasets in this directory.

Every curve is drawn from the package's own forward models with a fixed
seed, so the shipped fit examples recover known ground truth.  Run from
the repository root:

    python3 configs/data/generate.py
"""

from pathlib import Path

import numpy as np

from v1dyn import lindblad, ratedyn
from v1dyn.model import SixLevelParams, V1_RATES, V1_RATES_DEPLETION

SEED = 20260816


def write_csv(path: Path, units: str, names, columns) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {units}\n" + ",".join(names) + "\n")
        np.savetxt(fh, np.column_stack(columns), delimiter=",", fmt="%.12g")


def main() -> None:
    out = Path(__file__).resolve().parent
    rng = np.random.default_rng(SEED)

    # spin-selective excited-state decay, Poisson photon counts
    t = np.arange(0.0, 50.0, 0.5)
    mean = 2000.0 * np.exp(-t / V1_RATES.tau_e1)
    write_csv(out / "lifetime_a1.csv", "time in ns, photon counts per bin",
              ("time_ns", "counts"), (t, rng.poisson(mean)))

    # detected PSB rate versus excitation power
    power = np.geomspace(10.0, 2000.0, 24)
    sat = 800.0 * (1.0 - np.exp(-power / 254.0))
    write_csv(out / "saturation.csv", "power in uW, detected rate in kHz",
              ("power_uW", "rate_kHz", "sigma_kHz"),
              (power, sat * (1.0 + 0.02 * rng.standard_normal(power.size)),
               0.02 * sat))

    # two-pulse relative signal at three excitation probabilities
    taus = ratedyn.default_tau_grid()
    for p_e in (0.2, 0.4, 0.6):
        clean = np.array([ratedyn.two_pulse_signal(V1_RATES, p_e, tau)
                          for tau in taus])
        write_csv(out / f"two_pulse_pe{round(100 * p_e):02d}.csv",
                  "pump-probe delay in ns, relative signal dimensionless",
                  ("tau_ns", "signal", "sigma"),
                  (taus, clean + 0.003 * rng.standard_normal(taus.size),
                   np.full(taus.size, 0.003)))

    # ground-state depletion at two powers, both optical targets
    six = SixLevelParams(V1_RATES_DEPLETION)
    taus_d = np.concatenate(([0.0], np.geomspace(30.0, 10000.0, 12)))
    for power_level in (15.0, 40.0):
        for target in ("A1", "A2"):
            _, clean = lindblad.simulate_depletion(
                six, power_level, taus_d, target=target,
                mode="cw", readout="population")
            write_csv(out / f"depletion_{target.lower()}_p{power_level:g}.csv",
                      "pump duration in ns, normalized signal dimensionless",
                      ("tau_ns", "signal", "sigma"),
                      (taus_d, clean * (1.0 + 0.02 * rng.standard_normal(clean.size)),
                       0.02 * np.maximum(np.abs(clean), 1e-3)))


if __name__ == "__main__":
    main()
