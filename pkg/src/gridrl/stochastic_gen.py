"""Stochastic renewable availability and the generation cost model.

Wind speed is Weibull distributed and pushed through a piecewise-linear power
curve; solar irradiance is lognormal, capped at the rated irradiance and
shaped by a half-sine daylight envelope.  Reserve and penalty costs are
expectations over the induced power distribution, which is mixed: a density
on the open interval plus point masses at zero and at the top output.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from gridrl.grid_model import Generator, NetworkCase, SolarParams, WindParams

GL_NODES = 64


@dataclass(frozen=True)
class PowerDistribution:
    top: float
    pdf: Callable[[np.ndarray], np.ndarray] | None
    mass_zero: float = 0.0
    mass_top: float = 0.0


def wind_power_curve(speed, params: WindParams, rated: float):
    s = np.asarray(speed, dtype=float)
    ramp = (s - params.v_cut_in) / (params.v_rated - params.v_cut_in)
    out = np.where(s < params.v_cut_in, 0.0, np.where(s < params.v_rated, ramp, 1.0))
    return rated * np.where(s >= params.v_cut_out, 0.0, out)


def weibull_pdf(x, k: float, c: float):
    x = np.asarray(x, dtype=float)
    z = np.clip(x, 0.0, None) / c
    return np.where(x >= 0, (k / c) * z ** (k - 1) * np.exp(-(z**k)), 0.0)


def weibull_sf(x: float, k: float, c: float) -> float:
    return math.exp(-((max(x, 0.0) / c) ** k))


def wind_distribution(params: WindParams, rated: float) -> PowerDistribution:
    if rated <= 0:
        return PowerDistribution(0.0, None, mass_zero=1.0)
    k, c = params.weibull_k, params.weibull_c
    h = (params.v_rated - params.v_cut_in) / rated

    def pdf(p):
        return weibull_pdf(params.v_cut_in + np.asarray(p) * h, k, c) * h

    return PowerDistribution(
        top=rated,
        pdf=pdf,
        mass_zero=1.0 - weibull_sf(params.v_cut_in, k, c) + weibull_sf(params.v_cut_out, k, c),
        mass_top=weibull_sf(params.v_rated, k, c) - weibull_sf(params.v_cut_out, k, c),
    )


def daylight_envelope(hour: int) -> float:
    """Zero outside 06:00-18:00, half-sine peaking at noon."""
    h = hour % 24
    if h <= 6 or h >= 18:
        return 0.0
    return math.sin(math.pi * (h - 6) / 12.0)


def solar_distribution(params: SolarParams, rated: float, hour: int) -> PowerDistribution:
    top = rated * daylight_envelope(hour)
    if top <= 0:
        return PowerDistribution(0.0, None, mass_zero=1.0)
    mu, sigma, g_std = params.ln_mu, params.ln_sigma, params.g_std
    scale = g_std / top

    def pdf(p):
        g = np.asarray(p, dtype=float) * scale
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.exp(-((np.log(g) - mu) ** 2) / (2 * sigma**2)) / (g * sigma * math.sqrt(2 * math.pi))
        return np.where(g > 0, dens, 0.0) * scale

    z = (math.log(g_std) - mu) / sigma
    return PowerDistribution(top=top, pdf=pdf, mass_top=0.5 * math.erfc(z / math.sqrt(2)))


@dataclass
class AvailabilitySample:
    """Availability for one hour, arrays in case generator order (p.u.).

    Thermal entries carry their box limits and no distribution.
    """

    hour: int
    p_bar: np.ndarray
    p_min: np.ndarray
    kinds: tuple[str, ...]
    dists: tuple[PowerDistribution | None, ...]
    draws: np.ndarray  # wind speed (m/s) or irradiance (W/m^2); nan for thermal

    @property
    def cap(self) -> np.ndarray:
        return np.array([pb if k != "thermal" else np.inf for pb, k in zip(self.p_bar, self.kinds)])

    @property
    def rer_mask(self) -> np.ndarray:
        return np.array([k != "thermal" for k in self.kinds])


def draw_wind_speed(params: WindParams, rng: np.random.Generator, size=None):
    return params.weibull_c * rng.weibull(params.weibull_k, size)


def sample_availability(case: NetworkCase, hour: int, rng: np.random.Generator) -> AvailabilitySample:
    hour = int(hour) % 24
    n = len(case.generators)
    p_bar = np.zeros(n)
    p_min = np.zeros(n)
    draws = np.full(n, np.nan)
    dists: list[PowerDistribution | None] = []
    env = daylight_envelope(hour)
    for i, g in enumerate(case.generators):
        if g.kind == "wind":
            draws[i] = draw_wind_speed(case.wind, rng)
            p_bar[i] = float(wind_power_curve(draws[i], case.wind, g.rated_p))
            dists.append(wind_distribution(case.wind, g.rated_p))
        elif g.kind == "solar":
            draws[i] = rng.lognormal(case.solar.ln_mu, case.solar.ln_sigma)
            p_bar[i] = g.rated_p * env * min(draws[i] / case.solar.g_std, 1.0)
            dists.append(solar_distribution(case.solar, g.rated_p, hour))
        else:
            p_bar[i] = g.p_max
            dists.append(None)
        p_min[i] = min(g.p_min, p_bar[i])
    return AvailabilitySample(hour, p_bar, p_min, tuple(g.kind for g in case.generators),
                              tuple(dists), draws)


@functools.lru_cache(maxsize=8)
def _gl_rule(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(nodes)


def _gl_integral(func, a: float, b: float, nodes: int) -> float:
    if b <= a:
        return 0.0
    x, w = _gl_rule(nodes)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return float(half * (w @ func(mid + half * x)))


def mismatch_costs(
    dist: PowerDistribution,
    scheduled: float,
    p_min: float,
    p_bar: float,
    reserve_coeff: float,
    penalty_coeff: float,
    nodes: int = GL_NODES,
) -> tuple[float, float]:
    """Expected reserve and penalty cost of scheduling ``scheduled``.

    reserve = c_r * E[(scheduled - P); p_min <= P <= scheduled]
    penalty = c_p * E[(P - scheduled); scheduled <= P <= p_bar]
    """
    eps = 1e-12
    if scheduled < p_min - eps or scheduled > p_bar + eps:
        raise ValueError(f"scheduled power {scheduled} outside [{p_min}, {p_bar}]")
    scheduled = min(max(scheduled, p_min), p_bar)
    reserve = penalty = 0.0
    if dist.pdf is not None:
        lo, hi = max(p_min, 0.0), min(scheduled, dist.top)
        reserve = _gl_integral(lambda p: (scheduled - p) * dist.pdf(p), lo, hi, nodes)
        lo, hi = max(scheduled, 0.0), min(p_bar, dist.top)
        penalty = _gl_integral(lambda p: (p - scheduled) * dist.pdf(p), lo, hi, nodes)
    if p_min <= 0.0:
        reserve += scheduled * dist.mass_zero
    if dist.mass_top and p_bar >= dist.top - eps:
        penalty += (dist.top - scheduled) * dist.mass_top
    return reserve_coeff * reserve, penalty_coeff * penalty


def thermal_cost(gen: Generator, p_mw: float) -> float:
    """Quadratic fuel cost; ``p_mw`` in MW."""
    c = gen.cost
    return c.a * p_mw**2 + c.b * p_mw + c.c


@dataclass
class GenerationCosts:
    thermal: np.ndarray  # per thermal generator
    wind: np.ndarray  # reserve + penalty per wind generator
    solar: np.ndarray

    @property
    def subtotals(self) -> tuple[float, float, float]:
        return float(self.thermal.sum()), float(self.wind.sum()), float(self.solar.sum())

    @property
    def total(self) -> float:
        return float(sum(self.subtotals))


def generation_costs(p_actual: np.ndarray, online: np.ndarray, sample: AvailabilitySample,
                     case: NetworkCase, nodes: int = GL_NODES) -> GenerationCosts:
    """Per-generator costs.  Power arguments in p.u.; costs are evaluated in MW."""
    mva = case.base_mva
    parts: dict[str, list[float]] = {"thermal": [], "wind": [], "solar": []}
    for i, g in enumerate(case.generators):
        if g.kind == "thermal":
            parts["thermal"].append(thermal_cost(g, p_actual[i] * mva) if online[i] else 0.0)
            continue
        dist = sample.dists[i]
        if not online[i] or dist is None:
            parts[g.kind].append(0.0)
            continue
        r, p = mismatch_costs(dist, float(p_actual[i]), float(sample.p_min[i]),
                              float(sample.p_bar[i]), g.cost.reserve, g.cost.penalty, nodes)
        parts[g.kind].append(mva * (r + p))
    return GenerationCosts(*(np.array(parts[k], dtype=float) for k in ("thermal", "wind", "solar")))


def total_generation_cost(p_actual: np.ndarray, online: np.ndarray, sample: AvailabilitySample,
                          case: NetworkCase) -> float:
    return generation_costs(p_actual, online, sample, case).total
