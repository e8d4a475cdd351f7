"""Empirical law distances, decay fitting, and convergence-envelope checks.

Total variation here is the sup over |f| <= 1, so distances live in [0, 2];
histogram distances are lower bounds of the true ones, consistent as bins
refine.  Decay fits only use points above a bootstrap noise floor so that
the plateau where Monte Carlo noise dominates is never fitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from kinsde.core import EmpiricalLaw, HistogramSpec, SimConfig
from kinsde.fields import LyapunovV, PhiFamily
from kinsde.integrators import Ensemble, bootstrap_rng, simulate_ensemble


@dataclass(frozen=True)
class HistogramLaw:
    """Binned proxy for a probability law on the configured box."""

    spec: HistogramSpec
    masses: np.ndarray
    out_mass: float

    def __post_init__(self):
        total = math.fsum(self.masses.tolist()) + self.out_mass
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"histogram mass {total!r} is not 1 within 1e-12")


def histogram_law(law: EmpiricalLaw, spec: HistogramSpec) -> HistogramLaw:
    pts = law.points()
    if pts.shape[1] != spec.dim:
        raise ValueError("law dimension does not match histogram spec")
    hist, _ = np.histogramdd(
        pts, bins=spec.bins, range=list(zip(spec.lo, spec.hi)), weights=law.weights
    )
    masses = hist.ravel()
    inbox = math.fsum(masses.tolist())
    return HistogramLaw(spec, masses, max(0.0, 1.0 - inbox))


def _check_binning(a: HistogramLaw, b: HistogramLaw):
    sa, sb = a.spec, b.spec
    if not (
        np.array_equal(sa.lo, sb.lo)
        and np.array_equal(sa.hi, sb.hi)
        and np.array_equal(sa.bins, sb.bins)
    ):
        raise ValueError("binning mismatch between histogram laws")


def empirical_var_distance(a: HistogramLaw, b: HistogramLaw) -> float:
    """sup over bin-measurable |f| <= 1 of |a(f) - b(f)|; range [0, 2]."""
    _check_binning(a, b)
    return float(np.sum(np.abs(a.masses - b.masses)) + abs(a.out_mass - b.out_mass))


def empirical_v_distance(a: HistogramLaw, b: HistogramLaw, V: LyapunovV | None) -> float:
    """Weighted variation distance, test functions bounded by V at bin centers.

    ``V = None`` means the constant weight 1 (the theta -> 0 limit) and then
    this is exactly :func:`empirical_var_distance`.  Out-of-box mass gets the
    weight at the farthest box corner, a conservative overestimate.
    """
    _check_binning(a, b)
    if V is None:
        return empirical_var_distance(a, b)
    w = V.value_points(a.spec.centers())
    w_out = float(V.value_points(a.spec.corner()[None, :])[0])
    return float(np.sum(w * np.abs(a.masses - b.masses)) + w_out * abs(a.out_mass - b.out_mass))


def bootstrap_noise_floor(
    law: EmpiricalLaw,
    spec: HistogramSpec,
    n_boot: int = 100,
    seed: int = 0,
    quantile: float = 95.0,
) -> float:
    """95th percentile of TV between two same-law resamples of the cloud."""
    rng = bootstrap_rng(seed, stream=1)
    n = law.n
    uniform = np.allclose(law.weights, 1.0 / n)
    tvs = np.empty(n_boot)
    for i in range(n_boot):
        if uniform:
            ia = rng.integers(0, n, n)
            ib = rng.integers(0, n, n)
        else:
            ia = rng.choice(n, size=n, p=law.weights)
            ib = rng.choice(n, size=n, p=law.weights)
        ha = histogram_law(EmpiricalLaw(law.x[ia], law.y[ia]), spec)
        hb = histogram_law(EmpiricalLaw(law.x[ib], law.y[ib]), spec)
        tvs[i] = empirical_var_distance(ha, hb)
    return float(np.percentile(tvs, quantile))


# --- exponential decay fits -------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    times: np.ndarray
    distances: np.ndarray
    noise_floor: float
    used: np.ndarray
    lam: float
    prefactor: float
    r2: float
    verdict: str  # decay confirmed | no decay | insufficient signal


def fit_exponential_decay(
    times,
    distances,
    noise_floor: float = 0.0,
    r2_threshold: float = 0.9,
) -> DecayFit:
    """Least squares on (t, log distance) restricted to points above the floor."""
    times = np.asarray(times, dtype=float)
    distances = np.asarray(distances, dtype=float)
    used = (distances > noise_floor) & (distances > 0.0) & np.isfinite(distances)
    if np.count_nonzero(used) < 4:
        return DecayFit(times, distances, noise_floor, used,
                        math.nan, math.nan, math.nan, "insufficient signal")
    t = times[used]
    logd = np.log(distances[used])
    slope, intercept = np.polyfit(t, logd, 1)
    resid = logd - (slope * t + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((logd - logd.mean()) ** 2))
    r2 = 1.0 if ss_tot < 1e-30 and ss_res < 1e-30 else (1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0)
    lam = -float(slope)
    verdict = "decay confirmed" if (lam > 0.0 and r2 > r2_threshold) else "no decay"
    return DecayFit(times, distances, noise_floor, used, lam, float(np.exp(intercept)), r2, verdict)


# --- two-flow decay experiment ----------------------------------------------------

@dataclass(frozen=True)
class TVDecaySeries:
    times: np.ndarray
    tv: np.ndarray
    noise_floor: float


def tv_decay_experiment(
    cfg: SimConfig,
    coeffs,
    init_a,
    init_b,
    record_times: Sequence[float],
    streams: tuple[int, int] = (1, 2),
    workers: int = 1,
    n_boot: int = 100,
) -> TVDecaySeries:
    """TV(t) between the laws of two flows started from different initial laws.

    The two runs use independent noise streams; the noise floor is the
    bootstrap TV between same-law resamples of the terminal cloud.
    """
    ens_a = simulate_ensemble(cfg, coeffs, init_a, stream=streams[0],
                              record_times=record_times, workers=workers)
    ens_b = simulate_ensemble(cfg, coeffs, init_b, stream=streams[1],
                              record_times=record_times, workers=workers)
    tv = np.array([
        empirical_var_distance(histogram_law(la, cfg.hist), histogram_law(lb, cfg.hist))
        for la, lb in zip(ens_a.records, ens_b.records)
    ])
    floor = bootstrap_noise_floor(ens_a.records[-1], cfg.hist, n_boot=n_boot, seed=cfg.seed)
    return TVDecaySeries(ens_a.record_times, tv, floor)


# --- H-transform envelope (integrated rate function) ------------------------------

class HTransform:
    """H(r) = int_0^r ds / Phi(s) with a bisection inverse.

    Only defined for the superlinear family: a linear Phi makes the
    integrand 1/(c0 s), which diverges at 0.
    """

    def __init__(self, phi: PhiFamily):
        if phi.kind == "linear":
            raise ValueError("H diverges at 0 for linear Phi")
        self.phi = phi

    def value(self, r: float) -> float:
        if r < 0:
            raise ValueError("H is defined for r >= 0")
        if r == 0.0:
            return 0.0
        out, _ = quad(lambda s: 1.0 / self.phi(s), 0.0, r, limit=200)
        return float(out)

    def inverse(self, w: float) -> float:
        """H^-1 with the convention H^-1(w) = 0 for w <= 0."""
        if w <= 0.0:
            return 0.0
        hi = 1.0
        while self.value(hi) < w:
            hi *= 2.0
            if hi > 1e15:
                raise ValueError(f"H^-1({w}) out of reach: H saturates below it")
        return float(brentq(lambda r: self.value(r) - w, 0.0, hi, xtol=1e-12, rtol=1e-14))


def h_envelope(phi: PhiFamily, v0: float, k: float, lam: float, times) -> np.ndarray:
    """Envelope k (1 + H^-1(H(V0) - t/k)) e^(-lam t), nonincreasing in t.

    For t >= k H(V0) the inverse clamps to zero and the curve is exactly
    k e^(-lam t).
    """
    if v0 < 1.0:
        raise ValueError("V0 must be >= 1 (Lyapunov functions are >= 1)")
    if k <= 0 or lam <= 0:
        raise ValueError("k and lam must be positive")
    H = HTransform(phi)
    h_v0 = H.value(v0)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = np.empty_like(times)
    for i, t in enumerate(times):
        out[i] = k * (1.0 + H.inverse(h_v0 - t / k)) * math.exp(-lam * t)
    return out


@dataclass(frozen=True)
class HEnvelopeFit:
    k: float
    lam: float
    envelope: np.ndarray
    dominated: bool


def fit_h_envelope(
    times,
    curve,
    phi: PhiFamily,
    v0: float,
    noise_floor: float = 0.0,
) -> HEnvelopeFit:
    """Smallest-k envelope of the given shape dominating an empirical curve.

    The decay rate candidates come from the curve's own log-linear fit,
    relaxed progressively; for each rate the minimal k is found by doubling
    then bisection (the envelope is monotone increasing in k).
    """
    times = np.asarray(times, dtype=float)
    curve = np.asarray(curve, dtype=float)
    fit = fit_exponential_decay(times, curve, noise_floor)
    lam0 = fit.lam if np.isfinite(fit.lam) and fit.lam > 0 else 0.5

    def dominated_at(k: float, lam: float) -> bool:
        return bool(np.all(h_envelope(phi, v0, k, lam, times) >= curve - 1e-12))

    for frac in (1.0, 0.75, 0.5, 0.25):
        lam = lam0 * frac
        k = 1e-3
        while k < 1e9 and not dominated_at(k, lam):
            k *= 2.0
        if k >= 1e9:
            continue
        lo, hi = k / 2.0, k
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if dominated_at(mid, lam):
                hi = mid
            else:
                lo = mid
        return HEnvelopeFit(hi, lam, h_envelope(phi, v0, hi, lam, times), True)
    lam = lam0 * 0.25
    return HEnvelopeFit(1e9, lam, h_envelope(phi, v0, 1e9, lam, times), False)


# --- moment bound check -----------------------------------------------------------

@dataclass(frozen=True)
class MomentBoundReport:
    initial_values: np.ndarray   # V(X_0, Y_0) per run
    ratios: np.ndarray           # E[sup_t V] / V(X_0, Y_0) per run
    n_dead: np.ndarray
    verdict: str                 # bounded | unbounded


def moment_bound_check(runs: Sequence[Ensemble], V: LyapunovV) -> MomentBoundReport:
    """Ratio E[sup_t V(X_t, Y_t)] / V(X_0, Y_0) per initial point.

    Verdict is "bounded" when the ratios across runs stay within a common
    factor-2 band and nothing blew up; dead particles are excluded from the
    expectation, counted in the report, and themselves evidence of an
    unbounded system.
    """
    v0s, ratios, dead = [], [], []
    for ens in runs:
        if ens.paths_x is None:
            raise ValueError("moment_bound_check needs ensembles run with store_paths")
        sup = None
        for k in range(ens.times.size):
            pts = np.concatenate([ens.paths_x[k], ens.paths_y[k]], axis=1)
            vals = V.value_points(pts)
            sup = vals if sup is None else np.maximum(sup, vals)
        alive = ens.alive
        v0 = V.value_points(np.concatenate([ens.initial_x, ens.initial_y], axis=1))
        v0_ref = float(np.mean(v0))
        ratios.append(float(np.mean(sup[alive])) / v0_ref)
        v0s.append(v0_ref)
        dead.append(ens.n_dead)
    ratios = np.asarray(ratios)
    dead = np.asarray(dead)
    ok = ratios.max() <= 2.0 * ratios.min() and not np.any(dead)
    return MomentBoundReport(np.asarray(v0s), ratios, dead, "bounded" if ok else "unbounded")
