"""Temperature shaping through a re-targeted SAR optimization.

The SAR focus and the temperature peak it produces do not coincide when the
skin is cooled by a water bolus or the airway by breathing. Rather than
optimizing temperature directly, the optimized |E|^2 focus is replaced by a
Gaussian mask, the mask centre is swept over a small lattice around the
tumor, and the bioheat problem is solved once per candidate. The SAR
optimization is then repeated on a target sphere at the best centre.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bioheat import BoundarySpec, SteadySolver, TemperatureField
from .fields import AntennaFieldSet, ExcitationVector, SarMap, sar_from_field, superpose
from .gaussfit import GaussianParams, fit_gaussian, gaussian_sar
from .phantom import BloodModel, Grid, PhantomGrid, smallest_enclosing_ball
from .sar_planner import PsoConfig, PsoResult, ThqReport, pso_optimize, thq


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Temperature metrics


def peak_location(values: np.ndarray, mask: np.ndarray) -> tuple[int, ...]:
    """Index of the largest value inside ``mask``; ties go to the lowest
    flat index. NaNs count as -inf, and an all-equal field returns the first
    masked cell."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    v = np.where(mask & ~np.isnan(values), values, -np.inf)
    flat = int(np.argmax(v))
    if not mask.ravel()[flat]:
        flat = int(np.flatnonzero(mask)[0])
    return tuple(int(i) for i in np.unravel_index(flat, mask.shape))


def shift_magnitude(sar, temp, region_mask: np.ndarray, grid: Grid) -> tuple[float, np.ndarray]:
    """Distance (m) and unit direction from the SAR peak to the temperature
    peak, both taken inside ``region_mask``. Zero shift gives a zero vector."""
    s = sar.values if isinstance(sar, SarMap) else sar
    t = temp.values if isinstance(temp, TemperatureField) else temp
    if s.shape != t.shape:
        raise ValueError("SAR and temperature maps are on different grids")
    ps = grid.coords_of(peak_location(s, region_mask))
    pt = grid.coords_of(peak_location(t, region_mask))
    d = pt - ps
    mag = float(np.linalg.norm(d))
    return mag, (d / mag if mag > 0 else np.zeros_like(d))


def _gtv_temps(temp, gtv_mask) -> np.ndarray:
    t = temp.values if isinstance(temp, TemperatureField) else np.asarray(temp)
    vals = t[np.asarray(gtv_mask, dtype=bool)]
    if vals.size == 0:
        raise ValueError("empty GTV")
    return vals


def t90(temp, gtv_mask) -> float:
    """Temperature exceeded by 90% of GTV cells: element ceil(0.1 n) - 1 of
    the ascending sort."""
    vals = np.sort(_gtv_temps(temp, gtv_mask))
    return float(vals[math.ceil(0.1 * vals.size) - 1])


def tau90(temp, gtv_mask) -> float:
    """T90 over the GTV maximum temperature."""
    vals = _gtv_temps(temp, gtv_mask)
    return t90(vals, np.ones(vals.shape, bool)) / float(vals.max())


# ---------------------------------------------------------------------------
# Refinement region


@dataclass(frozen=True)
class RefinementRegion:
    center: np.ndarray  # tumor centroid r_t, m
    diameter: float  # d_R = d + 2 delta
    spacing: float  # delta / density
    candidates: np.ndarray  # (n, ndim) m, lexicographic lattice order
    d: float = 0.0
    delta: float = 0.0

    @property
    def n_points(self) -> int:
        return len(self.candidates)

    @property
    def center_index(self) -> int:
        return int(np.argmin(np.linalg.norm(self.candidates - self.center, axis=1)))


def refinement_lattice(center, diameter: float, spacing: float) -> np.ndarray:
    """Lattice points ``center + spacing * n`` (n integer) inside the closed
    ball of the given diameter. Always contains ``center``."""
    center = np.asarray(center, dtype=float)
    m = int(math.floor(diameter / 2 / spacing + 1e-9))
    rng = np.arange(-m, m + 1)
    offs = np.stack(np.meshgrid(*([rng] * len(center)), indexing="ij"), axis=-1).reshape(-1, len(center))
    keep = np.linalg.norm(offs * spacing, axis=1) <= diameter / 2 * (1 + 1e-12)
    pts = center + offs[keep] * spacing
    if len(pts) == 0:
        pts = center[None, :]
    return pts


def enclosing_diameter(mask: np.ndarray, grid: Grid) -> float:
    """Diameter of the smallest ball around the mask's cell centres, plus one
    cell for the voxel extent."""
    pts = grid.centers()[np.asarray(mask, bool).ravel()]
    _, r = smallest_enclosing_ball(pts)
    return 2 * r + grid.spacing


def build_refinement_region(
    center, d: float, delta: float, density: int, ndim: int = 2
) -> RefinementRegion:
    """Ball (3D) or disc (2D) of diameter d + 2 delta around ``center``,
    sampled every delta / density."""
    if not delta > 0:
        raise ValueError("shift delta must be positive")
    if density < 1:
        raise ValueError("sampling density must be >= 1")
    center = np.asarray(center, dtype=float)[:ndim]
    diameter = d + 2 * delta
    spacing = delta / density
    pts = refinement_lattice(center, diameter, spacing)
    return RefinementRegion(center, diameter, spacing, pts, d, delta)


# ---------------------------------------------------------------------------
# Search


class _SolverPool:
    """One SteadySolver per worker thread over shared inputs."""

    def __init__(self, phantom, blood, bc, solver=None):
        self._args = (phantom, blood, bc)
        self._local = threading.local()
        if solver is not None:
            self._local.solver = solver

    def get(self) -> SteadySolver:
        s = getattr(self._local, "solver", None)
        if s is None:
            s = self._local.solver = SteadySolver(*self._args)
        return s


def search_optimal_center(
    region: RefinementRegion,
    p: GaussianParams,
    phantom: PhantomGrid,
    blood: BloodModel,
    bc: BoundarySpec,
    threads: int = 1,
    solver: SteadySolver | None = None,
    order: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """tau90 of the Gaussian SAR mask centred at every candidate.

    Returns the best centre and the tau90 surface (in candidate order).
    Ties go to the candidate nearest the region centre, then to the lowest
    lattice index. ``order`` only changes the evaluation sequence.
    """
    if region.n_points == 0:
        raise ValueError("refinement region has no candidates")
    pool = _SolverPool(phantom, blood, bc, solver)
    gtv = phantom.gtv

    def evaluate(i: int) -> float:
        try:
            temp = pool.get().solve(gaussian_sar(p.moved(region.candidates[i]), phantom))
        except Exception as exc:
            raise RuntimeError(f"candidate {i} at {region.candidates[i]}: {exc}") from exc
        return tau90(temp, gtv)

    idx = np.arange(region.n_points) if order is None else np.asarray(order)
    surface = np.empty(region.n_points)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for i, v in zip(idx, ex.map(evaluate, idx)):
                surface[i] = v
    else:
        for i in idx:
            surface[i] = evaluate(i)
    dist = np.linalg.norm(region.candidates - region.center, axis=1)
    best = int(np.lexsort((np.arange(region.n_points), dist, -surface))[0])
    return region.candidates[best].copy(), surface


def sphere_mask(phantom: PhantomGrid, center, diameter: float) -> np.ndarray:
    """Tissue cells whose centre lies within diameter / 2 of ``center``."""
    c = phantom.grid.centers()
    center = np.asarray(center, dtype=float)[: phantom.grid.ndim]
    inside = np.linalg.norm(c - center, axis=1) <= diameter / 2
    return inside.reshape(phantom.dims) & phantom.tissue_mask


def retarget_sar_optimization(
    fields: AntennaFieldSet, r_bar, d: float, phantom: PhantomGrid, cfg: PsoConfig
) -> PsoResult:
    target = sphere_mask(phantom, r_bar, d)
    if not target.any():
        raise ValueError(f"target sphere at {np.asarray(r_bar) * 1e3} mm contains no tissue")
    return pso_optimize(fields, phantom, target, cfg)


def scale_to_peak(
    fields: AntennaFieldSet,
    w: ExcitationVector,
    phantom: PhantomGrid,
    solver: SteadySolver,
    target_max: float,
    reference: str = "gtv",
) -> tuple[ExcitationVector, float]:
    """Scale weights so the hottest reference cell reaches ``target_max`` degC.

    ``reference`` is "tissue" (every tissue cell) or "gtv". Temperature is
    affine in the SAR scale s (T = T0 + s T1), so the power factor is the
    min over reference cells of (target - T0) / T1.
    """
    if reference not in ("tissue", "gtv"):
        raise ValueError(f"power reference must be 'tissue' or 'gtv', got {reference!r}")
    cells = phantom.gtv if reference == "gtv" else phantom.tissue_mask
    sar = sar_from_field(superpose(fields, w), phantom)
    T0 = solver.solve(np.zeros(phantom.dims)).values[cells]
    T1 = solver.solve(sar).values[cells] - T0
    ok = T1 > 0
    if not ok.any():
        raise ValueError(f"excitation does not heat the {reference}")
    s = float(np.min((target_max - T0[ok]) / T1[ok]))
    if not s > 0:
        raise ValueError(f"{reference} already at or above {target_max} degC without heating")
    return w.scaled(math.sqrt(s)), s


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class Timings:
    t_em: float = 0.0
    t_sar_opt: list[float] = field(default_factory=list)
    t_search: float = 0.0
    t_bioheat_single: float = 0.0
    t_lc_single: float = 0.0
    t_tsar: float = 0.0  # wall time of steps 2-7
    total: float = 0.0
    n_opt: int = 0
    n_rfn: int = 0

    @property
    def t_sar(self) -> float:
        return float(np.mean(self.t_sar_opt)) if self.t_sar_opt else 0.0

    def to_dict(self) -> dict:
        return {
            "t_em": self.t_em,
            "t_sar_opt": list(self.t_sar_opt),
            "t_sar": self.t_sar,
            "t_search": self.t_search,
            "t_bioheat_single": self.t_bioheat_single,
            "t_lc_single": self.t_lc_single,
            "t_tsar": self.t_tsar,
            "total": self.total,
            "n_opt": self.n_opt,
            "n_rfn": self.n_rfn,
        }


@dataclass
class PlanStage:
    """Metrics of one optimized (and power-scaled) excitation."""

    weights: ExcitationVector
    thq: ThqReport
    power_scale: float
    e2: np.ndarray
    sar: SarMap
    temp: TemperatureField
    t90: float
    tau90: float
    evals: int

    def summary(self) -> dict:
        return {
            "weights": self.weights.to_json(),
            "thq": self.thq.to_dict(),
            "power_scale": self.power_scale,
            "t90": self.t90,
            "tau90": self.tau90,
            "pso_evals": self.evals,
        }


@dataclass
class PlanResult:
    before: PlanStage
    after: PlanStage
    r_t: np.ndarray
    d: float
    shift_delta: float  # measured SAR -> T shift, m
    shift_direction: np.ndarray
    delta_used: float  # after the minimum floor
    gaussian: GaussianParams
    fit_rms: float
    region: RefinementRegion
    r_bar: np.ndarray
    tau90_surface: np.ndarray
    tau90_mask_at_rt: float
    timings: Timings

    @property
    def weights_before(self) -> ExcitationVector:
        return self.before.weights

    @property
    def weights_after(self) -> ExcitationVector:
        return self.after.weights

    @property
    def tau90_before(self) -> float:
        return self.before.tau90

    @property
    def tau90_after(self) -> float:
        return self.after.tau90


def _stage(fields, phantom, solver, res: PsoResult, target_mask, power, fraction) -> PlanStage:
    w, s = scale_to_peak(fields, res.weights, phantom, solver, *power)
    e2 = superpose(fields, w)
    sar = sar_from_field(e2, phantom)
    temp = solver.solve(sar)
    report = thq(sar, target_mask, phantom.tissue_mask & ~target_mask, fraction)
    return PlanStage(w, report, s, e2, sar, temp, t90(temp, phantom.gtv), tau90(temp, phantom.gtv), res.evals)


def run_pipeline(scenario, threads: int = 1, fields: AntennaFieldSet | None = None) -> PlanResult:
    """Steps 1-7: fields, SAR optimization on the GTV, Gaussian fit,
    refinement region, tau90 search, best centre, re-targeted optimization.

    ``scenario`` is a :class:`thermofocus.scenario.Scenario`.
    """
    t_start = time.perf_counter()
    timings = Timings()
    ref = scenario.refinement
    phantom = _run("phantom", scenario.phantom)
    blood, bc = scenario.blood, scenario.boundaries
    pso = scenario.pso
    power = (scenario.target_max, scenario.power_reference)

    t0 = time.perf_counter()
    if fields is None:
        fields = _run("fields", scenario.fields, phantom)
    timings.t_em = time.perf_counter() - t0
    solver = _run("bioheat", SteadySolver, phantom, blood, bc)

    t_tsar0 = time.perf_counter()
    res1 = _run("sar_opt", pso_optimize, fields, phantom, phantom.gtv, pso)
    timings.t_sar_opt.append(res1.elapsed)
    before = _run("sar_opt", _stage, fields, phantom, solver, res1, phantom.gtv, power, pso.v1_fraction)

    grid = phantom.grid
    r_t = phantom.gtv_centroid()
    d = scenario.gtv_diameter if scenario.gtv_diameter else enclosing_diameter(phantom.gtv, grid)
    near = np.linalg.norm(grid.centers() - r_t, axis=1).reshape(grid.dims)
    shift_region = phantom.tissue_mask & (near <= ref.shift_radius)
    delta, direction = shift_magnitude(before.sar, before.temp, shift_region, grid)

    fit_roi = near <= ref.fit_radius
    gauss, rms = _run("fit", fit_gaussian, before.e2, grid, fit_roi, ref.fit_threshold)

    if ref.delta is not None:
        delta_used = ref.delta
    elif delta < 2 * grid.spacing:
        delta_used = ref.min_delta
    else:
        delta_used = delta
    search_phantom, search_solver, search_gauss, center = phantom, solver, gauss, r_t
    if ref.search_mode == "2d" and grid.ndim == 3:
        search_phantom = _run("search", scenario.slice_phantom)
        search_solver = _run("search", SteadySolver, search_phantom, blood, scenario.slice_boundaries)
        search_gauss = GaussianParams(gauss.a, gauss.r0[:2], gauss.sigma[:2])
        center = r_t[:2]
    region = _run(
        "region", build_refinement_region, center, d, delta_used, ref.sampling_density, search_phantom.grid.ndim
    )

    t0 = time.perf_counter()
    r_bar, surface = _run(
        "search", search_optimal_center, region, search_gauss, search_phantom, blood,
        scenario.slice_boundaries if search_phantom is not phantom else bc, threads, search_solver,
    )
    timings.t_search = time.perf_counter() - t0
    timings.n_rfn = region.n_points
    timings.t_bioheat_single = timings.t_search / region.n_points
    if len(r_bar) < grid.ndim:
        r_bar = np.concatenate([r_bar, r_t[len(r_bar):]])

    res2 = _run("retarget", retarget_sar_optimization, fields, r_bar, d, phantom, pso)
    timings.t_sar_opt.append(res2.elapsed)
    target2 = sphere_mask(phantom, r_bar, d)
    timings.t_tsar = time.perf_counter() - t_tsar0
    after = _run("retarget", _stage, fields, phantom, solver, res2, target2, power, pso.v1_fraction)

    timings.n_opt = res1.evals
    timings.t_lc_single = float(np.mean([res1.t_lc, res2.t_lc]))
    timings.total = time.perf_counter() - t_start
    return PlanResult(
        before=before,
        after=after,
        r_t=r_t,
        d=d,
        shift_delta=delta,
        shift_direction=direction,
        delta_used=delta_used,
        gaussian=gauss,
        fit_rms=rms,
        region=region,
        r_bar=r_bar,
        tau90_surface=surface,
        tau90_mask_at_rt=float(surface[region.center_index]),
        timings=timings,
    )


def _run(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, exc) from exc


# ---------------------------------------------------------------------------
# Sensitivity


SENSITIVITY_CASES = {
    "baseline": {},
    "a": {"tumor": 2.0},
    "b": {"tumor": 2.0, "muscle": 2.0},
    "c": {"tumor": 0.5, "muscle": 1.5},
}


@dataclass(frozen=True)
class SweepRow:
    case: str
    tau90_before: float
    tau90_after: float

    def to_dict(self) -> dict:
        return {"case": self.case, "tau90_before": self.tau90_before, "tau90_after": self.tau90_after}


def sensitivity_sweep(
    plan,
    scenario,
    cases=("a", "b", "c"),
    fields: AntennaFieldSet | None = None,
) -> list[SweepRow]:
    """tau90 before/after with perfusion perturbed and the weights held fixed.

    ``plan`` needs ``weights_before`` and ``weights_after``. A case is a key
    of SENSITIVITY_CASES or a ``{tissue: perfusion factor}`` dict.
    """
    phantom = scenario.phantom()
    fields = fields if fields is not None else scenario.fields(phantom)
    rows = []
    for case in cases:
        factors = SENSITIVITY_CASES[case] if isinstance(case, str) else case
        name = case if isinstance(case, str) else ",".join(f"{k}x{v}" for k, v in case.items())
        db = scenario.tissue_db.scale_perfusion(factors)
        perturbed = phantom.with_tissues(db)
        solver = SteadySolver(perturbed, scenario.blood, scenario.boundaries)
        taus = []
        for w in (plan.weights_before, plan.weights_after):
            sar = sar_from_field(superpose(fields, w), perturbed)
            taus.append(tau90(solver.solve(sar), perturbed.gtv))
        rows.append(SweepRow(name, *taus))
    return rows
