"""Command-line front end.

Subcommands::

    thermofocus plan    --scenario s.json --out report/
    thermofocus sar-opt --scenario s.json --target gtv --out weights.json
    thermofocus export  --scenario s.json --weights weights.json --out maps/
    thermofocus solve   --scenario s.json --sar maps/sar.csv --out temp.csv
    thermofocus fit     --scenario s.json --e2 maps/e2.csv --out gauss.json
    thermofocus sweep   --plan report/plan.json --cases a,b,c

``--scenario`` takes a path or ``bundled:<name>``. Exit status is 0 on
success, 1 on a numerical failure and 2 on a configuration or file error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from .bioheat import ConvergenceError, SteadySolver
from .fields import ExcitationVector, FieldFormatError, export_fields, sar_from_field, superpose
from .gaussfit import GaussianFitError, fit_gaussian
from .phantom import GeometryError, Grid, UnknownTissueError
from .sar_planner import DegenerateSarError, pso_optimize, thq
from .scenario import Scenario, ScenarioError
from .tshape import (
    PipelineError,
    SENSITIVITY_CASES,
    PlanResult,
    run_pipeline,
    scale_to_peak,
    sensitivity_sweep,
    sphere_mask,
    t90,
    tau90,
)

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
CONFIG_ERRORS = (ScenarioError, FileNotFoundError, FieldFormatError, GeometryError, UnknownTissueError,
                 json.JSONDecodeError, OSError)
NUMERIC_ERRORS = (ConvergenceError, DegenerateSarError, GaussianFitError, FloatingPointError, ValueError,
                  RuntimeError)
BUNDLED_PREFIX = "bundled:"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# File formats


def write_map(path: str | Path, values: np.ndarray, grid: Grid) -> None:
    """Full-grid CSV: cell indices, centre in mm, value. 17 significant
    digits so a read-back is bit-exact; NaN marks non-tissue cells."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.dims:
        raise ValueError(f"map {values.shape} does not match grid {grid.dims}")
    idx = np.indices(grid.dims).reshape(grid.ndim, -1).T
    xyz = grid.centers() * 1e3
    names = "ijk"[: grid.ndim]
    axes = ("x_mm", "y_mm", "z_mm")[: grid.ndim]
    header = ",".join([*names, *axes, "value"])
    with open(path, "w") as fh:
        fh.write(f"# dims {' '.join(map(str, grid.dims))}\n{header}\n")
        for ii, xx, v in zip(idx, xyz, values.ravel()):
            fh.write(",".join([*map(str, ii), *(f"{x:.17g}" for x in xx), f"{v:.17g}"]) + "\n")


def read_map(path: str | Path, grid: Grid) -> np.ndarray:
    path = Path(path)
    try:
        with open(path) as fh:
            first = fh.readline().split()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read map {path}: {exc.strerror}") from None
    if first[:2] != ["#", "dims"] or tuple(int(v) for v in first[2:]) != grid.dims:
        raise FieldFormatError(f"{path}: map dims {first[2:]} do not match grid {list(grid.dims)}")
    data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    if data.shape != (grid.size, 2 * grid.ndim + 1):
        raise FieldFormatError(f"{path}: expected {grid.size} rows of {2 * grid.ndim + 1} columns")
    idx = data[:, : grid.ndim].astype(int)
    out = np.full(grid.dims, np.nan)
    out[tuple(idx.T)] = data[:, -1]
    return out


def write_pgm(path: str | Path, values: np.ndarray) -> float:
    """8-bit binary PGM of a 2D map (or the middle z slice of a 3D map),
    scaled so the maximum is 255. NaN cells are black. Returns the max."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 3:
        v = v[:, :, v.shape[2] // 2]
    finite = np.isfinite(v)
    vmax = float(v[finite].max()) if finite.any() else 0.0
    img = np.zeros(v.shape)
    if vmax > 0:
        img[finite] = np.clip(v[finite] / vmax, 0, 1) * 255
    # rows top to bottom = +y to -y
    img = np.rint(img.T[::-1]).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return vmax


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FieldFormatError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_weights(path: str | Path, w: ExcitationVector, report=None, seed=None, **extra) -> None:
    doc = {"weights": w.to_json(), "seed": seed}
    if report is not None:
        doc["thq"] = report.to_dict()
    doc.update(extra)
    _write_json(path, doc)


def read_weights(path: str | Path) -> ExcitationVector:
    doc = _read_json(path)
    items = doc["weights"] if isinstance(doc, dict) else doc
    try:
        return ExcitationVector.from_json(items)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"{path}: malformed weights ({exc})") from None


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON: {exc}") from None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def determinism_hash(report: dict) -> str:
    """Hash of a plan report without wall-clock fields."""
    doc = {k: v for k, v in report.items() if k not in ("timings", "timing_report", "determinism_hash")}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Reports


def timing_report(plan: PlanResult) -> tuple[str, dict]:
    """Time decomposition of a plan, and the estimated cost of optimizing
    temperature directly: T_T = N_OPT (t_LC + t_bioH)."""
    t = plan.timings
    t_lc, t_bio = t.t_lc_single, t.t_bioheat_single
    direct = t.n_opt * (t_lc + t_bio)
    parts = t.t_search + 2 * t.t_sar
    d = {
        "T_EM": t.t_em,
        "T_SAR": t.t_sar,
        "T_search": t.t_search,
        "T_TSAR": t.t_tsar,
        "T_TSAR_parts": parts,
        "T_TSAR_total": t.t_em + t.t_tsar,
        "N_OPT": t.n_opt,
        "N_rfn": t.n_rfn,
        "t_LC": t_lc,
        "t_bioH": t_bio,
        "ratio_bioH_LC": t_bio / t_lc if t_lc > 0 else math.inf,
        "T_T_estimate": direct,
        "saving_factor": direct / t.t_tsar if t.t_tsar > 0 else math.inf,
    }
    rows = [
        ("T_EM", t.t_em),
        ("T_SAR (mean of 2 runs)", t.t_sar),
        (f"T_search ({t.n_rfn} candidates)", t.t_search),
        ("T_TSAR measured", t.t_tsar),
        ("T_search + 2 T_SAR", parts),
        ("T_TSAR total (with T_EM)", t.t_em + t.t_tsar),
    ]
    lines = ["timing decomposition (s)"] + [f"  {k:32s}{v:12.3f}" for k, v in rows]
    lines += [
        f"  {'t_LC per evaluation':32s}{t_lc:12.3e}",
        f"  {'t_bioH per solve':32s}{t_bio:12.3e}",
        f"  {'t_bioH / t_LC':32s}{d['ratio_bioH_LC']:12.1f}",
        f"  direct T-optimization estimate N_OPT (t_LC + t_bioH), N_OPT = {t.n_opt}: {direct:.1f} s",
    ]
    return "\n".join(lines), d


def _surface_image(plan: PlanResult) -> np.ndarray:
    r = plan.region
    pts = r.candidates
    if pts.shape[1] == 3:
        keep = np.isclose(pts[:, 2], r.center[2])
        pts, vals = pts[keep, :2], plan.tau90_surface[keep]
    else:
        vals = plan.tau90_surface
    ij = np.rint((pts - pts.min(axis=0)) / r.spacing).astype(int)
    img = np.full(tuple(ij.max(axis=0) + 1), np.nan)
    img[tuple(ij.T)] = vals
    return img


def write_plan_report(plan: PlanResult, scenario: Scenario, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    grid = scenario.grid
    manifest = []

    def add(name, kind, **meta):
        manifest.append({"file": name, "kind": kind, "sha256": _sha256(out / name), **meta})

    for tag, stage in (("before", plan.before), ("after", plan.after)):
        write_weights(out / f"weights_{tag}.json", stage.weights, stage.thq, scenario.seed)
        add(f"weights_{tag}.json", "json")
        for field, values in (("e2", stage.e2), ("sar", stage.sar.values), ("temp", stage.temp.values)):
            write_map(out / f"{field}_{tag}.csv", values, grid)
            add(f"{field}_{tag}.csv", "csv")
            vmax = write_pgm(out / f"{field}_{tag}.pgm", values)
            add(f"{field}_{tag}.pgm", "pgm", max_value=vmax)

    pts = plan.region.candidates * 1e3
    cols = ["x_mm", "y_mm", "z_mm"][: pts.shape[1]]
    with open(out / "tau90_surface.csv", "w") as fh:
        fh.write(",".join(cols + ["tau90"]) + "\n")
        for p, v in zip(pts, plan.tau90_surface):
            fh.write(",".join(f"{x:.17g}" for x in (*p, v)) + "\n")
    add("tau90_surface.csv", "csv")
    vmax = write_pgm(out / "tau90_surface.pgm", _surface_image(plan))
    add("tau90_surface.pgm", "pgm", max_value=vmax)

    text, timing = timing_report(plan)
    report = {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "weights_before": plan.before.weights.to_json(),
        "weights_after": plan.after.weights.to_json(),
        "thq_before": plan.before.thq.to_dict(),
        "thq_after": plan.after.thq.to_dict(),
        "power_scale_before": plan.before.power_scale,
        "power_scale_after": plan.after.power_scale,
        "t90_before": plan.before.t90,
        "t90_after": plan.after.t90,
        "tau90_before": plan.tau90_before,
        "tau90_after": plan.tau90_after,
        "tau90_mask_at_r_t": plan.tau90_mask_at_rt,
        "r_t_mm": (plan.r_t * 1e3).tolist(),
        "d_mm": plan.d * 1e3,
        "delta_mm": plan.shift_delta * 1e3,
        "delta_used_mm": plan.delta_used * 1e3,
        "shift_direction": plan.shift_direction.tolist(),
        "r_bar_mm": (plan.r_bar * 1e3).tolist(),
        "gaussian": plan.gaussian.to_dict(plan.fit_rms),
        "refinement": {
            "d_R_mm": plan.region.diameter * 1e3,
            "spacing_mm": plan.region.spacing * 1e3,
            "n_candidates": plan.region.n_points,
        },
        "pso_evals": [plan.before.evals, plan.after.evals],
        "config_echo": scenario.config,
        "manifest": manifest,
        "timings": plan.timings.to_dict(),
        "timing_report": timing,
    }
    report["determinism_hash"] = determinism_hash(report)
    _write_json(out / "plan.json", report)
    (out / "timing.txt").write_text(text + "\n")
    return report


# ---------------------------------------------------------------------------
# Commands


def _load_scenario(args) -> Scenario:
    name = args.scenario
    if name is None:
        raise CliError("--scenario is required", EXIT_CONFIG)
    sc = Scenario.bundled(name[len(BUNDLED_PREFIX):]) if name.startswith(BUNDLED_PREFIX) else Scenario.load(name)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    mode = getattr(args, "mode", None)
    if mode is not None:
        if mode == "3d" and sc.grid.ndim == 2:
            raise CliError("--mode 3d needs a 3D scenario grid", EXIT_CONFIG)
        overrides["refinement"] = {"search_mode": mode}
    if overrides:
        sc = sc.with_overrides(**overrides)
    if getattr(args, "dry_run", False):
        sc.phantom()  # rasterization catches geometry errors; nothing is solved
        print(f"scenario {sc.name}: valid ({'x'.join(map(str, sc.grid.dims))} grid, {sc.phantom().tissue_mask.sum()} tissue cells)")
    return sc


def _target_mask(sc: Scenario, spec: str) -> np.ndarray:
    ph = sc.phantom()
    if spec == "gtv":
        return ph.gtv
    if spec.startswith("sphere:"):
        try:
            vals = [float(v) * 1e-3 for v in spec[len("sphere:"):].split(",")]
        except ValueError:
            raise CliError(f"bad target {spec!r}", EXIT_CONFIG) from None
        if len(vals) != sc.grid.ndim + 1:
            raise CliError(f"target sphere needs {sc.grid.ndim} coordinates and a diameter (mm)", EXIT_CONFIG)
        return sphere_mask(ph, vals[:-1], vals[-1])
    raise CliError(f"target must be 'gtv' or 'sphere:x,y[,z],d', got {spec!r}", EXIT_CONFIG)


def cmd_plan(args) -> int:
    sc = _load_scenario(args)
    if args.dry_run:
        return EXIT_OK
    out = Path(args.out or sc.output_dir or "report")
    plan = run_pipeline(sc, threads=args.threads)
    report = write_plan_report(plan, sc, out)
    print(f"tau90 before {report['tau90_before']:.4f}  after {report['tau90_after']:.4f}")
    print(f"delta {report['delta_mm']:.2f} mm  r_bar {np.round(report['r_bar_mm'], 2).tolist()} mm")
    print((out / "timing.txt").read_text(), end="")
    print(f"report written to {out / 'plan.json'}")
    return EXIT_OK


def cmd_sar_opt(args) -> int:
    sc = _load_scenario(args)
    if args.dry_run:
        return EXIT_OK
    ph = sc.phantom()
    target = _target_mask(sc, args.target)
    fields = sc.fields(ph)
    res = pso_optimize(fields, ph, target, sc.pso)
    w, s = res.weights, 1.0
    if not args.no_scale:
        w, s = scale_to_peak(fields, w, ph, SteadySolver(ph, sc.blood, sc.boundaries), sc.target_max,
                             sc.power_reference)
    sar = sar_from_field(superpose(fields, w), ph)
    report = thq(sar, target, ph.tissue_mask & ~target, sc.pso.v1_fraction)
    write_weights(args.out, w, report, sc.seed, power_scale=s, target=args.target, pso_evals=res.evals)
    print(f"THQ {report.thq:.6f} after {res.evals} evaluations; weights written to {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    sc = _load_scenario(args)
    if args.dry_run:
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ph = sc.phantom()
    fields = sc.fields(ph)
    written = []
    if args.weights:
        w = read_weights(args.weights)
        e2 = superpose(fields, w)
        for name, values in (("e2", e2), ("sar", sar_from_field(e2, ph).values)):
            write_map(out / f"{name}.csv", values, sc.grid)
            write_pgm(out / f"{name}.pgm", values)
            written += [f"{name}.csv", f"{name}.pgm"]
    if args.fields:
        export_fields(fields, out / ("fields.bin" if args.binary else "fields.txt"), binary=args.binary)
        written.append("fields.bin" if args.binary else "fields.txt")
    if args.phantom:
        ph.export_csv(out / "phantom.csv")
        written.append("phantom.csv")
    if not written:
        raise CliError("nothing to export: give --weights, --fields or --phantom", EXIT_CONFIG)
    print("wrote " + ", ".join(str(out / f) for f in written))
    return EXIT_OK


def cmd_solve(args) -> int:
    sc = _load_scenario(args)
    if args.dry_run:
        return EXIT_OK
    ph = sc.phantom()
    sar = read_map(args.sar, sc.grid)
    sar = np.where(ph.tissue_mask, sar, 0.0)
    temp = SteadySolver(ph, sc.blood, sc.boundaries).solve(sar)
    write_map(args.out, temp.values, sc.grid)
    diag = {**temp.diagnostics(), "t90": t90(temp, ph.gtv), "tau90": tau90(temp, ph.gtv),
            "t_max": float(np.nanmax(temp.values))}
    _write_json(Path(args.out).with_suffix(".json"), diag)
    print(f"T90 {diag['t90']:.4f} C  tau90 {diag['tau90']:.4f}  residual {temp.residual:.2e}")
    return EXIT_OK


def cmd_fit(args) -> int:
    sc = _load_scenario(args)
    if args.dry_run:
        return EXIT_OK
    ph = sc.phantom()
    e2 = read_map(args.e2, sc.grid)
    r_t = ph.gtv_centroid()
    roi = (np.linalg.norm(sc.grid.centers() - r_t, axis=1) <= sc.refinement.fit_radius).reshape(sc.grid.dims)
    p, rms = fit_gaussian(e2, sc.grid, roi, sc.refinement.fit_threshold)
    _write_json(args.out, p.to_dict(rms))
    print(f"a {p.a:.6g} V^2/m^2  r0 {np.round(np.array(p.r0) * 1e3, 3).tolist()} mm  "
          f"sigma {np.round(np.array(p.sigma) * 1e3, 3).tolist()} mm  rms {rms:.4f}")
    return EXIT_OK


class _PlanWeights:
    def __init__(self, doc: dict):
        self.weights_before = ExcitationVector.from_json(doc["weights_before"])
        self.weights_after = ExcitationVector.from_json(doc["weights_after"])


def cmd_sweep(args) -> int:
    if not args.plan:
        raise CliError("--plan is required", EXIT_CONFIG)
    doc = _read_json(args.plan)
    try:
        plan = _PlanWeights(doc)
        sc = Scenario(doc["config_echo"]) if args.scenario is None else _load_scenario(args)
    except KeyError as exc:
        raise CliError(f"{args.plan}: missing key {exc}", EXIT_CONFIG) from None
    cases = [c.strip() for c in args.cases.split(",") if c.strip()]
    unknown = [c for c in cases if c not in SENSITIVITY_CASES]
    if unknown:
        raise CliError(f"unknown sensitivity cases {unknown}; choose from {sorted(SENSITIVITY_CASES)}", EXIT_CONFIG)
    if args.dry_run:
        return EXIT_OK
    rows = sensitivity_sweep(plan, sc, cases)
    print(f"{'case':8s} {'tau90_before':>12s} {'tau90_after':>12s}")
    for r in rows:
        print(f"{r.case:8s} {r.tau90_before:12.4f} {r.tau90_after:12.4f}")
    out = Path(args.out) if args.out else Path(args.plan).with_name("sweep.json")
    _write_json(out, [r.to_dict() for r in rows])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thermofocus", description="Temperature-aware hyperthermia planning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--scenario", help="scenario JSON path or bundled:<name>")
        p.add_argument("--out", required=out_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--mode", choices=["2d", "3d"], help="refinement search dimension")
        p.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
        return p

    p = common(sub.add_parser("plan", help="run the full planning pipeline"))
    p.set_defaults(func=cmd_plan)
    p = common(sub.add_parser("sar-opt", help="optimize antenna weights for a target"), True)
    p.add_argument("--target", default="gtv", help="'gtv' or 'sphere:x,y[,z],d' in mm")
    p.add_argument("--no-scale", action="store_true", help="skip power scaling to the target GTV maximum")
    p.set_defaults(func=cmd_sar_opt)
    p = common(sub.add_parser("export", help="write |E|^2/SAR maps, antenna fields or the phantom"), True)
    p.add_argument("--weights")
    p.add_argument("--fields", action="store_true")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--phantom", action="store_true")
    p.set_defaults(func=cmd_export)
    p = common(sub.add_parser("solve", help="steady temperature for a SAR map"), True)
    p.add_argument("--sar", required=True)
    p.set_defaults(func=cmd_solve)
    p = common(sub.add_parser("fit", help="Gaussian fit of an |E|^2 map"), True)
    p.add_argument("--e2", required=True)
    p.set_defaults(func=cmd_fit)
    p = common(sub.add_parser("sweep", help="perfusion sensitivity of a finished plan"))
    p.add_argument("--plan")
    p.add_argument("--cases", default="a,b,c")
    p.set_defaults(func=cmd_sweep)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        return _exit_code(exc.cause)
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("thermofocus: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (CliError, PipelineError, *CONFIG_ERRORS, *NUMERIC_ERRORS) as exc:
        stage = f" [{args.command}]" if not isinstance(exc, PipelineError) else ""
        print(f"thermofocus: error{stage}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
