"""Seeded synthetic worlds with known ground-truth physics.

The traffic world is a three-sensor chain ``a -> b -> c``. Sensor ``b``
evolves by the speed-volume reaction-diffusion equation, so the speed-volume
model is correctly specified there and the speed-only model is not. Ramp
volumes between the sensors follow their own time-of-day profile, so the
volume terms the speed-only model leaves out change with the hour.

The epidemic world runs the discrete SIR model once per year from a fresh
seed infection of a few hundred cases, then applies multiplicative observation
noise. Seeding well above single digits keeps the early weeks out of the regime
where rounding to whole counts dominates the residuals. Recovery is
slow next to transmission, so acquired immunity bends the late season hard and
a model without it errs differently on the way up and on the way down.
"""
from __future__ import annotations

import numpy as np

from .data import EpidemicSeries, TrafficData, yearly_boundaries
from .epidemic import EpiParams, simulate
from .traffic import RdParams, SensorGraph

STEPS_PER_DAY = 288
START = np.datetime64("2024-01-01T00:00:00", "s")

TRUE_RD = RdParams(
    "UQ",
    rho_u={"a": 0.3}, sigma_u={"c": 0.2},
    d=0.5, r=0.2,
    rho_q={"a": 0.02}, sigma_q={"c": 0.03},
)
TRUE_SIR = EpiParams("SIR", beta=0.9, gamma=0.2)


def _ar1(rng, n, phi, sd):
    x = np.empty(n)
    x[0] = rng.normal(0, sd / np.sqrt(1 - phi**2))
    eps = rng.normal(0, sd, n)
    for k in range(1, n):
        x[k] = phi * x[k - 1] + eps[k]
    return x


def _bump(h, centre, width):
    return np.exp(-0.5 * ((h - centre) / width) ** 2)


def synth_traffic(seed: int = 0, n_days: int = 20, noise_sd: float = 0.5,
                  shift: float = 1.5) -> tuple[TrafficData, RdParams]:
    """Generate the chain world; returns the data and sensor ``b``'s true params.

    ``shift`` scales the hour-dependent ramp flows. At 0 the ramps vanish and
    both models coincide in distribution across hours.
    """
    rng = np.random.default_rng(seed)
    n = n_days * STEPS_PER_DAY
    hour = (np.arange(n) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY

    mainline = 40 + 120 * _bump(hour, 8.0, 1.0) + 130 * _bump(hour, 17.5, 1.5)
    load = mainline / mainline.max()
    q_a = np.maximum(mainline * (1 + _ar1(rng, n, 0.9, 0.03)), 0)
    # Ramp surges are fresh each step, so speed differences cannot see them.
    # Their spread alternates in 6-hour blocks, switching on hour boundaries,
    # so no single hour looks like the pooled day.
    phase = 2 * np.pi * (hour - 3) / 24
    surge = np.where((hour // 6) % 2 == 0, 40.0, 3.0)
    on_ramp = shift * (25 + 20 * np.sin(phase) + surge * rng.standard_normal(n))
    off_ramp = shift * (15 + 12 * np.sin(2 * np.pi * (hour - 9) / 12)) * (1 + 0.6 * rng.standard_normal(n))
    q_b = np.maximum(q_a + on_ramp, 0)
    q_c = np.maximum(q_b - off_ramp, 0)

    u_a = 65 - 20 * load**2 + _ar1(rng, n, 0.8, 1.5)
    u_c = 62 - 25 * load**2 + _ar1(rng, n, 0.8, 1.5)
    theta = TRUE_RD.to_vector()  # [rho_u, rho_q, sigma_u, sigma_q, d, r]
    eps = rng.normal(0, noise_sd, n) if noise_sd > 0 else np.zeros(n)
    u_b = np.empty(n)
    u_b[0] = u_a[0]
    for k in range(n - 1):
        diffusion = theta[0] * (u_a[k] - u_b[k]) + theta[1] * (q_a[k] - q_b[k])
        reaction = theta[2] * (u_c[k] - u_b[k]) + theta[3] * (q_c[k] - q_b[k]) + theta[5]
        u_b[k + 1] = max(u_b[k] + diffusion + theta[4] + np.tanh(reaction) + eps[k], 0.0)

    graph = SensorGraph({"a": (), "b": ("a",), "c": ("b",)},
                        {"a": ("b",), "b": ("c",), "c": ()})
    data = TrafficData(
        START + np.timedelta64(300, "s") * np.arange(n),
        ["a", "b", "c"],
        np.column_stack([np.maximum(u_a, 0), u_b, np.maximum(u_c, 0)]),
        np.column_stack([q_a, q_b, q_c]),
        graph,
    )
    truth = RdParams.from_dict(TRUE_RD.to_dict())
    return data, truth


def synth_epidemic(seed: int = 0, n_years: int = 20, noise_sd: float = 0.05,
                   n_locations: int = 1, population: float = 200_000.0,
                   period_weeks: int = 52) -> tuple[list[EpidemicSeries], EpiParams]:
    """Yearly SIR outbreaks with lognormal observation noise, rounded to counts."""
    rng = np.random.default_rng(seed)
    out = []
    for loc in range(n_locations):
        years = []
        for _ in range(n_years):
            seed_cases = rng.uniform(300, 600)
            traj = simulate(TRUE_SIR, seed_cases, population, period_weeks)
            years.append(traj.I)
        latent = np.concatenate(years)
        noise = np.exp(noise_sd * rng.standard_normal(latent.size)) if noise_sd > 0 else 1.0
        counts = np.minimum(np.round(latent * noise), population)
        weeks = np.datetime64("2010-01-04", "D") + np.timedelta64(7, "D") * np.arange(counts.size)
        out.append(EpidemicSeries(f"L{loc:02d}", weeks, counts, population,
                                  yearly_boundaries(counts.size, period_weeks)))
    return out, TRUE_SIR
