"""Target-to-hotspot SAR quotient and its particle-swarm maximisation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import AntennaFieldSet, ExcitationVector, SarMap, sar_from_field, superpose
from .phantom import PhantomGrid


class DegenerateSarError(ValueError):
    """Raised when the SAR quotient is undefined (zero hotspot SAR)."""


@dataclass(frozen=True)
class ThqReport:
    thq: float
    sar_target_avg: float
    sar_v1_avg: float
    v1_cell_count: int

    def to_dict(self) -> dict:
        return {
            "thq": self.thq,
            "sar_target_avg": self.sar_target_avg,
            "sar_v1_avg": self.sar_v1_avg,
            "v1_cell_count": self.v1_cell_count,
        }


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 40
    max_evals: int = 20_000
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    seed: int = 0
    optimize_amplitudes: bool = True
    v1_fraction: float = 0.01

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ValueError("swarm_size must be >= 2")
        if self.max_evals < self.swarm_size:
            raise ValueError("max_evals must be >= swarm_size")


def _hotspot_order(values: np.ndarray) -> np.ndarray:
    # descending value, ascending index on ties
    return np.lexsort((np.arange(len(values)), -values))


def hotspot_average(sar, healthy_mask: np.ndarray, fraction: float = 0.01) -> tuple[float, np.ndarray]:
    """Mean SAR of the hottest ``fraction`` of healthy cells.

    Takes the top ``ceil(fraction * n_healthy)`` cells, ties at the cutoff
    going to the lower flat index. Returns the mean and the selected flat
    cell indices.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    values = sar.values if isinstance(sar, SarMap) else np.asarray(sar)
    cells = np.flatnonzero(np.asarray(healthy_mask).ravel())
    if cells.size == 0:
        raise ValueError("healthy mask is empty")
    v = values.ravel()[cells]
    m = math.ceil(fraction * cells.size)
    top = _hotspot_order(v)[:m]
    return float(np.mean(v[top])), cells[top]


def thq(sar, gtv_mask: np.ndarray, healthy_mask: np.ndarray, fraction: float = 0.01) -> ThqReport:
    values = sar.values if isinstance(sar, SarMap) else np.asarray(sar)
    gtv_mask = np.asarray(gtv_mask, dtype=bool)
    if not gtv_mask.any():
        raise ValueError("target mask is empty")
    if (gtv_mask & np.asarray(healthy_mask, dtype=bool)).any():
        raise ValueError("target and healthy masks overlap")
    target = float(np.mean(values[gtv_mask]))
    v1, cells = hotspot_average(values, healthy_mask, fraction)
    if v1 <= 0:
        raise DegenerateSarError("hotspot SAR is zero; THQ undefined (degenerate excitation)")
    return ThqReport(target / v1, target, v1, len(cells))


# ---------------------------------------------------------------------------
# PSO


@dataclass
class PsoResult:
    weights: ExcitationVector
    report: ThqReport
    evals: int
    history: list[float] = field(default_factory=list)  # best 1/THQ per iteration
    t_lc: float = 0.0  # mean seconds per objective evaluation
    elapsed: float = 0.0


class _Objective:
    """Batched 1/THQ over tissue cells only."""

    def __init__(self, fields: AntennaFieldSet, phantom: PhantomGrid, target: np.ndarray, fraction: float):
        tissue = phantom.tissue_mask.ravel()
        self.F = fields.flat(phantom.tissue_mask)
        sigma = phantom.property_map("sigma").ravel()[tissue]
        rho = phantom.property_map("rho").ravel()[tissue]
        self.scale = sigma / (2 * rho)
        t = np.asarray(target, dtype=bool).ravel()[tissue]
        self.target = t
        self.healthy = ~t
        self.m = math.ceil(fraction * int(self.healthy.sum()))
        self.n_evals = 0

    def __call__(self, W: np.ndarray) -> np.ndarray:
        E = W @ self.F
        sar = (E.real**2 + E.imag**2) * self.scale
        tgt = sar[:, self.target].mean(axis=1)
        h = sar[:, self.healthy]
        top = np.partition(h, h.shape[1] - self.m, axis=1)[:, h.shape[1] - self.m :]
        v1 = top.mean(axis=1)
        self.n_evals += len(W)
        with np.errstate(divide="ignore", invalid="ignore"):
            obj = v1 / tgt
        return np.where(np.isfinite(obj), obj, np.inf)


def _to_weights(x: np.ndarray, n: int, optimize_amplitudes: bool) -> np.ndarray:
    """Decode particle positions (..., n amplitudes + n-1 phases) to weights."""
    if optimize_amplitudes:
        amp, ph = x[..., :n], x[..., n:]
    else:
        amp, ph = np.ones(x.shape[:-1] + (n,)), x
    phase = np.concatenate([np.zeros(x.shape[:-1] + (1,)), ph], axis=-1)
    return amp * np.exp(1j * phase)


def pso_optimize(
    fields: AntennaFieldSet,
    phantom: PhantomGrid,
    target_mask: np.ndarray,
    cfg: PsoConfig = PsoConfig(),
    monitor: Callable[[int, float], None] | None = None,
) -> PsoResult:
    """Minimise 1/THQ over antenna amplitudes in [0, 1] and phases.

    Antenna 0 has its phase fixed at zero. Each particle draws from its own
    RNG stream spawned from ``cfg.seed``, so results are reproducible.
    The healthy region is every tissue cell outside ``target_mask``.
    """
    target_mask = np.asarray(target_mask, dtype=bool) & phantom.tissue_mask
    if not target_mask.any():
        raise ValueError("target mask has no tissue cells")
    n = fields.n_antennas
    obj = _Objective(fields, phantom, target_mask, cfg.v1_fraction)
    n_amp = n if cfg.optimize_amplitudes else 0
    dim = n_amp + n - 1
    lo = np.zeros(dim)
    hi = np.concatenate([np.ones(n_amp), np.full(n - 1, 2 * np.pi)])
    span = hi - lo
    is_phase = np.arange(dim) >= n_amp
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.swarm_size)]

    def sample(i: int) -> np.ndarray:
        while True:
            x = lo + span * rngs[i].random(dim)
            if n_amp == 0 or x[:n_amp].any():
                return x

    t0 = time.perf_counter()
    X = np.stack([sample(i) for i in range(cfg.swarm_size)])
    V = np.stack([(rngs[i].random(dim) * 2 - 1) * span * 0.1 for i in range(cfg.swarm_size)])
    f = obj(_to_weights(X, n, cfg.optimize_amplitudes))
    P, Pf = X.copy(), f.copy()
    g = int(np.argmin(Pf))
    history = [float(Pf[g])]
    vmax = 0.5 * span
    it = 0
    while obj.n_evals + cfg.swarm_size <= cfg.max_evals:
        it += 1
        R1 = np.stack([r.random(dim) for r in rngs])
        R2 = np.stack([r.random(dim) for r in rngs])
        V = cfg.inertia * V + cfg.cognitive * R1 * (P - X) + cfg.social * R2 * (P[g] - X)
        V = np.clip(V, -vmax, vmax)
        X = X + V
        X = np.where(is_phase, np.mod(X, 2 * np.pi), np.clip(X, lo, hi))
        hit = ~is_phase & ((X <= lo) | (X >= hi))
        V[hit] = 0.0
        if n_amp:
            for i in np.flatnonzero(~X[:, :n_amp].any(axis=1)):
                X[i] = sample(i)
        f = obj(_to_weights(X, n, cfg.optimize_amplitudes))
        better = f < Pf
        P[better], Pf[better] = X[better], f[better]
        g = int(np.argmin(Pf))
        history.append(float(Pf[g]))
        if monitor is not None:
            monitor(it, history[-1])
    elapsed = time.perf_counter() - t0

    w = ExcitationVector(_to_weights(P[g], n, cfg.optimize_amplitudes))
    sar = sar_from_field(superpose(fields, w), phantom)
    report = thq(sar, target_mask, phantom.tissue_mask & ~target_mask, cfg.v1_fraction)
    return PsoResult(w, report, obj.n_evals, history, elapsed / obj.n_evals, elapsed)
