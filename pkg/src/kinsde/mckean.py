"""Mean-field dynamics: interacting particles, fixed-point iteration, sweeps.

The law-flow map sends a candidate flow of measures to the law flow of the
decoupled dynamics with that flow frozen into the drift; its fixed point is
the mean-field law, approximated directly by the interacting particle
system.  Iterations reuse common random numbers by default so the measure
argument's effect is isolated from Monte Carlo noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from kinsde.core import CoefficientSet, EmpiricalLaw, SimConfig, validate_config
from kinsde.ergodicity import (
    DecayFit,
    bootstrap_noise_floor,
    empirical_v_distance,
    empirical_var_distance,
    fit_exponential_decay,
    histogram_law,
)
from kinsde.integrators import Ensemble, _resolve_record_indices, _run_loop, simulate_ensemble


@dataclass
class MeasureFlow:
    """Time-grid-indexed particle clouds standing in for a flow of laws."""

    times: np.ndarray
    clouds: list[EmpiricalLaw]

    def __post_init__(self):
        if len(self.clouds) != self.times.size:
            raise ValueError("one cloud per grid time required")

    def law_at(self, t: float) -> EmpiricalLaw:
        idx = int(np.argmin(np.abs(self.times - t)))
        return self.clouds[idx]

    def histograms(self, spec) -> list:
        return [histogram_law(c, spec) for c in self.clouds]

    @staticmethod
    def from_ensemble(ens: Ensemble) -> "MeasureFlow":
        if ens.records is None:
            raise ValueError("ensemble carries no recorded clouds")
        return MeasureFlow(ens.record_times, ens.records)


def constant_flow(law: EmpiricalLaw, times) -> MeasureFlow:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return MeasureFlow(times, [law] * times.size)


def rho_lambda(a: MeasureFlow, b: MeasureFlow, lam: float, spec, V=None) -> float:
    """sup over grid times of e^(-lam t) times the slice distance.

    The slice distance is plain total variation, or its V-weighted variant
    when a Lyapunov weight is supplied.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if a.times.size != b.times.size or not np.allclose(a.times, b.times):
        raise ValueError("flows live on different grids")
    best = 0.0
    for t, ca, cb in zip(a.times, a.clouds, b.clouds):
        ha, hb = histogram_law(ca, spec), histogram_law(cb, spec)
        tv = empirical_var_distance(ha, hb) if V is None else empirical_v_distance(ha, hb, V)
        best = max(best, math.exp(-lam * t) * tv)
    return best


# --- interacting particle system ----------------------------------------------------

def particle_system_run(
    cfg: SimConfig,
    coeffs: CoefficientSet,
    init,
    record_times: Sequence[float] | None = None,
    stream: int = 0,
    workers: int = 1,
) -> tuple[MeasureFlow, Ensemble]:
    """N coupled particles; the measure argument is the ensemble's own law.

    Each step sees the empirical law of the previous slice's states, so the
    mean-field average never reads in-progress updates.  Dead particles are
    excluded from the law and reported.
    """
    bad = validate_config(cfg, coeffs)
    if bad:
        raise ValueError("invalid configuration: " + "; ".join(bad))
    if record_times is None:
        record_times = cfg.times()

    def own_law(k, t, x, y, alive):
        if int(np.count_nonzero(alive)) == x.shape[0]:
            return EmpiricalLaw(x.copy(), y.copy())
        return EmpiricalLaw(x[alive].copy(), y[alive].copy())

    x0, y0 = init.sample(cfg.N, cfg.seed, stream)
    ens = _run_loop(
        cfg, coeffs, x0, y0, own_law, stream,
        store_paths=False, store_increments=False,
        record_idx=_resolve_record_indices(cfg, record_times),
        workers=workers, step_callback=None,
    )
    return MeasureFlow.from_ensemble(ens), ens


# --- fixed-point iteration over measure flows ---------------------------------------

@dataclass
class PicardState:
    iteration: int
    flow: MeasureFlow
    rho_history: list[float]
    lam: float
    common_random_numbers: bool
    base_stream: int


def picard_start(
    cfg: SimConfig,
    init,
    lam: float,
    common_random_numbers: bool = True,
    stream: int = 0,
) -> PicardState:
    """Iteration zero: the flow frozen at the initial law for all times."""
    x0, y0 = init.sample(cfg.N, cfg.seed, stream)
    flow = constant_flow(EmpiricalLaw(x0, y0), cfg.times())
    return PicardState(0, flow, [], lam, common_random_numbers, stream)


def picard_iterate(state: PicardState, cfg: SimConfig, coeffs: CoefficientSet, init,
                   workers: int = 1) -> PicardState:
    """One application of the law-flow map with the current flow frozen in."""
    stream = state.base_stream if state.common_random_numbers \
        else state.base_stream + state.iteration + 1
    ens = simulate_ensemble(
        cfg, coeffs, init, frozen_flow=state.flow, stream=stream,
        record_times=cfg.times(), workers=workers,
    )
    new_flow = MeasureFlow.from_ensemble(ens)
    rho = rho_lambda(new_flow, state.flow, state.lam, cfg.hist)
    return PicardState(
        state.iteration + 1, new_flow, state.rho_history + [rho],
        state.lam, state.common_random_numbers, state.base_stream,
    )


@dataclass(frozen=True)
class PicardResult:
    state: PicardState
    converged: bool
    noise_floor: float
    n_iterations: int


def picard_fixed_point(
    cfg: SimConfig,
    coeffs: CoefficientSet,
    init,
    kappa: float,
    lam: float | None = None,
    max_iter: int = 20,
    common_random_numbers: bool = True,
    stream: int = 0,
    n_boot: int = 100,
    workers: int = 1,
) -> PicardResult:
    """Iterate the law-flow map until successive flows agree at noise level.

    The contraction metric weight defaults to the 4 kappa T heuristic; the
    stopping rule is rho below twice the bootstrap noise floor or the
    iteration cap.
    """
    if lam is None:
        lam = 4.0 * max(kappa, 0.25) * max(1.0, cfg.T)
    state = picard_start(cfg, init, lam, common_random_numbers, stream)
    state = picard_iterate(state, cfg, coeffs, init, workers=workers)
    floor = bootstrap_noise_floor(state.flow.clouds[-1], cfg.hist, n_boot=n_boot, seed=cfg.seed)
    converged = False
    while state.iteration < max_iter:
        state = picard_iterate(state, cfg, coeffs, init, workers=workers)
        if state.rho_history[-1] < 2.0 * floor:
            converged = True
            break
    return PicardResult(state, converged, floor, state.iteration)


# --- Girsanov comparison of two frozen flows -----------------------------------------

@dataclass(frozen=True)
class FlowBoundReport:
    times: np.ndarray
    tv: np.ndarray
    pinsker_bound: np.ndarray
    xi_integral_bound: np.ndarray
    noise_floor: float
    verdict: str  # bound respected | bound violated


def girsanov_flow_bound(
    cfg: SimConfig,
    coeffs: CoefficientSet,
    flow_mu: MeasureFlow,
    flow_nu: MeasureFlow,
    record_times: Sequence[float],
    init=None,
    streams: tuple[int, int] = (21, 22),
    n_boot: int = 100,
    workers: int = 1,
    V=None,
) -> FlowBoundReport:
    """Empirical TV between the two decoupled laws against its Girsanov bound.

    The reference run freezes ``flow_nu``; reweighting it by the exponential
    martingale of the drift-shift field reproduces the ``flow_mu`` dynamics,
    so twice the weighted relative entropy bounds the squared TV.  The
    running shift-integral bound is accumulated alongside for the chart.
    Passing a Lyapunov weight V swaps in the weighted variation distance on
    the empirical side of the comparison.
    """
    from kinsde.integrators import drift_difference_xi

    def delta_z2(t, x, y):
        return np.asarray(coeffs.z2(t, x, y, flow_mu.law_at(t))) - np.asarray(
            coeffs.z2(t, x, y, flow_nu.law_at(t))
        )

    xi = drift_difference_xi(coeffs, delta_z2)
    if init is None:
        init = _flow_init(flow_nu)  # the two decoupled runs share one initial law
    rec_idx = _resolve_record_indices(cfg, record_times)
    rec_set = set(rec_idx.tolist())
    h, n = cfg.h, cfg.N

    ito = np.zeros(n)
    comp = np.zeros(n)
    a_int = np.zeros(n)
    prev_sq = {"v": None}
    snapshots: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def pre_step(k, t, x, y, dW):
        xi_k = np.asarray(xi(t, x, y), dtype=float)
        sq = np.sum(xi_k * xi_k, axis=1)
        if prev_sq["v"] is not None:
            np.add(comp, 0.5 * h * (prev_sq["v"] + sq), out=comp)
        if k in rec_set:
            logw = ito - 0.5 * comp
            snapshots[k] = (logw.copy(), a_int.copy())
        np.add(a_int, np.exp(ito - 0.5 * comp) * sq * h, out=a_int)
        np.add(ito, np.sum(xi_k * dW, axis=1), out=ito)
        prev_sq["v"] = sq

    ens_ref = simulate_ensemble(
        cfg, coeffs, init, frozen_flow=flow_nu, stream=streams[0],
        record_times=record_times, workers=workers, pre_step_callback=pre_step,
    )
    # close the compensator at the final state and snapshot the horizon
    xi_last = np.asarray(xi(cfg.T, ens_ref.x, ens_ref.y), dtype=float)
    sq_last = np.sum(xi_last * xi_last, axis=1)
    np.add(comp, 0.5 * h * (prev_sq["v"] + sq_last), out=comp)
    if cfg.n_steps in rec_set:
        snapshots[cfg.n_steps] = (ito - 0.5 * comp, a_int.copy())

    ens_tgt = simulate_ensemble(
        cfg, coeffs, init, frozen_flow=flow_mu, stream=streams[1],
        record_times=record_times, workers=workers,
    )

    times = rec_idx * h
    tv = np.empty(times.size)
    pinsker = np.empty(times.size)
    xi_bound = np.empty(times.size)
    for j, k in enumerate(rec_idx.tolist()):
        href = histogram_law(ens_ref.records[j], cfg.hist)
        htgt = histogram_law(ens_tgt.records[j], cfg.hist)
        tv[j] = (empirical_var_distance(href, htgt) if V is None
                 else empirical_v_distance(href, htgt, V))
        logw, a_t = snapshots[k]
        w = np.exp(logw)
        pinsker[j] = math.sqrt(max(0.0, 2.0 * float(np.mean(w * logw))))
        xi_bound[j] = math.sqrt(max(0.0, float(np.mean(a_t))))
    floor = bootstrap_noise_floor(ens_ref.records[-1], cfg.hist, n_boot=n_boot, seed=cfg.seed)
    ok = bool(np.all(tv <= pinsker + floor))
    return FlowBoundReport(times, tv, pinsker, xi_bound, floor,
                           "bound respected" if ok else "bound violated")


class _flow_init:
    """Start from the t = 0 cloud of a flow (resized by tiling if needed)."""

    def __init__(self, flow: MeasureFlow):
        self.cloud = flow.clouds[0]

    def sample(self, n, seed, stream):
        c = self.cloud
        if c.n == n:
            return c.x.copy(), c.y.copy()
        reps = -(-n // c.n)
        return (np.tile(c.x, (reps, 1))[:n], np.tile(c.y, (reps, 1))[:n])


# --- uniform ergodicity sweep --------------------------------------------------------

@dataclass(frozen=True)
class SweepEntry:
    kappa: float
    fit: DecayFit
    noise_floor: float
    times: np.ndarray
    tv: np.ndarray


@dataclass(frozen=True)
class SweepResult:
    entries: list[SweepEntry]
    kappa_star: float | None

    def entry(self, kappa: float) -> SweepEntry:
        for e in self.entries:
            if e.kappa == kappa:
                return e
        raise KeyError(kappa)


def uniform_ergodicity_sweep(
    cfg: SimConfig,
    coeffs_factory: Callable[[float], CoefficientSet],
    kappas: Sequence[float],
    init_a,
    init_b,
    record_times: Sequence[float],
    fit_from: float = 1.0,
    base_stream: int = 40,
    n_boot: int = 100,
    workers: int = 1,
) -> SweepResult:
    """Two-initial-law TV decay of the interacting system across couplings.

    Each coupling strength runs the particle system from both initial laws
    with independent seeds and fits the log-linear decay of TV(t) above the
    bootstrap floor.  Returns the largest coupling whose decay is confirmed.
    """
    entries: list[SweepEntry] = []
    for i, kappa in enumerate(kappas):
        coeffs = coeffs_factory(kappa)
        flow_a, ens_a = particle_system_run(
            cfg, coeffs, init_a, record_times, stream=base_stream + 2 * i, workers=workers
        )
        flow_b, _ = particle_system_run(
            cfg, coeffs, init_b, record_times, stream=base_stream + 2 * i + 1, workers=workers
        )
        ha = flow_a.histograms(cfg.hist)
        hb = flow_b.histograms(cfg.hist)
        tv = np.array([empirical_var_distance(a, b) for a, b in zip(ha, hb)])
        floor = bootstrap_noise_floor(flow_a.clouds[-1], cfg.hist, n_boot=n_boot, seed=cfg.seed + i)
        window = flow_a.times >= fit_from
        fit = fit_exponential_decay(flow_a.times[window], tv[window], noise_floor=floor)
        entries.append(SweepEntry(kappa, fit, floor, flow_a.times, tv))
    confirmed = [e.kappa for e in entries if e.fit.verdict == "decay confirmed"]
    return SweepResult(entries, max(confirmed) if confirmed else None)
