"""Scenario files: JSON documents describing one planning problem.

Lengths are in mm in the file and in m once loaded. The schema lives in
``SCHEMA`` (also written to ``docs/scenario.schema.json``); unknown keys are
rejected before any stage runs.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema

from .bioheat import BoundarySpec, default_neck_bc
from .fields import AntennaFieldSet, ArrayConfig, build_array, import_fields
from .phantom import (
    DEFAULT_TISSUES,
    BloodModel,
    Grid,
    PhantomGrid,
    NeckGeometry,
    build_irregular_neck,
    build_simple_neck,
    rasterize,
    shape_from_dict,
    shape_to_dict,
)
from .sar_planner import PsoConfig


class ScenarioError(ValueError):
    pass


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 2, "maxItems": 3}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_bc = _obj(
    {"kind": {"enum": ["convective", "isothermal", "insulated"]}, "T_s": _num, "h": _pos},
    ["kind"],
)
_shape = {
    "type": "object",
    "required": ["kind", "tissue"],
    "properties": {
        "kind": {"enum": ["cylinder", "sphere", "annulus", "polygon_prism"]},
        "tissue": {"type": "string"},
        "priority": {"type": "integer"},
        "center": _vec,
        "radius": _num,
        "r_in": _num,
        "r_out": _num,
        "axis": {"enum": ["x", "y", "z"]},
        "vertices": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
    },
    "additionalProperties": False,
}

SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "mode": {"enum": ["2d", "3d"]},
        "seed": {"type": "integer", "minimum": 0},
        "grid": _obj(
            {
                "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 3},
                "spacing_mm": _pos,
                "origin_mm": _vec,
            },
            ["dims", "spacing_mm", "origin_mm"],
        ),
        "tissues": {
            "type": "object",
            "additionalProperties": _obj(
                {"rho": _pos, "k": _pos, "w": {"type": "number", "minimum": 0}, "eps_r": _num, "sigma": _num}
            ),
        },
        "blood": _obj({"rho_b": _pos, "cp_b": _pos, "T_a": _pos}),
        "shapes": {"type": "array", "items": _shape, "minItems": 1},
        "gtv": _obj({"tissue": {"type": "string"}, "diameter_mm": _pos}),
        "boundaries": {
            "type": "object",
            "propertyNames": {"enum": ["exterior", "internal_air", "xmin", "xmax", "ymin", "ymax", "zmin", "zmax"]},
            "additionalProperties": _bc,
        },
        "array": _obj(
            {
                "n_antennas": {"type": "integer", "minimum": 2},
                "standoff_mm": _pos,
                "ring_radius_mm": _pos,
                "frequency_hz": _pos,
                "rotation_deg": _num,
                "peak_field_vpm": _pos,
                "medium": {"type": "string"},
                "field_file": {"type": "string"},
            }
        ),
        "pso": _obj(
            {
                "swarm_size": {"type": "integer", "minimum": 2},
                "max_evals": {"type": "integer", "minimum": 2},
                "inertia": _num,
                "cognitive": _num,
                "social": _num,
                "v1_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            }
        ),
        "power": _obj({"max_temperature_c": _pos, "reference": {"enum": ["tissue", "gtv"]}}),
        "refinement": _obj(
            {
                "delta_mm": _pos,
                "sampling_density": {"type": "integer", "minimum": 1},
                "search_mode": {"enum": ["2d", "3d"]},
                "min_delta_mm": _pos,
                "shift_radius_mm": _pos,
                "fit_radius_mm": _pos,
                "fit_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "output": _obj({"dir": {"type": "string"}}),
    },
    ["grid", "shapes"],
)


@dataclass(frozen=True)
class RefinementConfig:
    delta: float | None = None  # m; None = measured shift
    sampling_density: int = 6
    search_mode: str = "2d"
    min_delta: float = 4e-3
    shift_radius: float = 25e-3
    fit_radius: float = 30e-3
    fit_threshold: float = 0.05


class Scenario:
    def __init__(self, config: dict, base_dir: str | Path = "."):
        try:
            jsonschema.validate(config, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ScenarioError(f"invalid scenario at {where}: {exc.message}") from None
        self.config = copy.deepcopy(config)
        self.base_dir = Path(base_dir)
        c = self.config
        self.name = c.get("name", "scenario")
        g = c["grid"]
        if not (len(g["dims"]) == len(g["origin_mm"])):
            raise ScenarioError("grid dims and origin_mm differ in length")
        self.grid = Grid(tuple(g["dims"]), g["spacing_mm"] * 1e-3, tuple(o * 1e-3 for o in g["origin_mm"]))
        self.mode = c.get("mode", f"{self.grid.ndim}d")
        if self.mode != f"{self.grid.ndim}d":
            raise ScenarioError(f"mode {self.mode} does not match a {self.grid.ndim}D grid")
        self.seed = c.get("seed", 0)
        try:
            self.tissue_db = DEFAULT_TISSUES.with_overrides(c.get("tissues", {}))
            self.shapes = [shape_from_dict(s) for s in c["shapes"]]
            for s in self.shapes:
                self.tissue_db[s.tissue]
        except (ValueError, TypeError, KeyError) as exc:
            raise ScenarioError(str(exc)) from None
        self.blood = BloodModel(**c.get("blood", {}))
        gtv = c.get("gtv", {})
        self.gtv_tissue = gtv.get("tissue", "tumor")
        self.gtv_diameter = gtv["diameter_mm"] * 1e-3 if "diameter_mm" in gtv else None
        if "boundaries" in c:
            self.boundaries = BoundarySpec.from_dict(c["boundaries"])
        else:
            self.boundaries = default_neck_bc(self.grid.ndim)
        a = c.get("array", {})
        self.array = ArrayConfig(
            n_antennas=a.get("n_antennas", 8),
            standoff=a.get("standoff_mm", 50.0) * 1e-3,
            ring_radius=a["ring_radius_mm"] * 1e-3 if "ring_radius_mm" in a else None,
            frequency=a.get("frequency_hz", 434e6),
            rotation=math.radians(a.get("rotation_deg", 0.0)),
            peak_field=a.get("peak_field_vpm", 100.0),
            medium=a.get("medium", "muscle"),
        )
        self.field_file = a.get("field_file")
        p = c.get("pso", {})
        try:
            self.pso = PsoConfig(seed=self.seed, **p)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        power = c.get("power", {})
        self.target_max = power.get("max_temperature_c", 44.0)
        self.power_reference = power.get("reference", "gtv")
        r = c.get("refinement", {})
        self.refinement = RefinementConfig(
            delta=r["delta_mm"] * 1e-3 if "delta_mm" in r else None,
            sampling_density=r.get("sampling_density", 6),
            search_mode=r.get("search_mode", "2d"),
            min_delta=r.get("min_delta_mm", 4.0) * 1e-3,
            shift_radius=r.get("shift_radius_mm", 25.0) * 1e-3,
            fit_radius=r.get("fit_radius_mm", 30.0) * 1e-3,
            fit_threshold=r.get("fit_threshold", 0.05),
        )
        self.output_dir = c.get("output", {}).get("dir")

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read scenario {path}: {exc.strerror}") from None
        try:
            config = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON: {exc}") from None
        return cls(config, path.parent)

    @classmethod
    def bundled(cls, name: str) -> "Scenario":
        """Load one of the scenarios shipped with the package."""
        ref = resources.files("thermofocus") / "scenarios" / f"{name}.json"
        return cls(json.loads(ref.read_text()))

    def with_overrides(self, **sections) -> "Scenario":
        """Copy with top-level sections merged (dicts) or replaced."""
        c = copy.deepcopy(self.config)
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(c.get(key), dict):
                c[key].update(value)
            else:
                c[key] = value
        return Scenario(c, self.base_dir)

    def phantom(self) -> PhantomGrid:
        return self._phantom

    @cached_property
    def _phantom(self) -> PhantomGrid:
        return rasterize(self.shapes, self.grid, self.tissue_db, self.gtv_tissue)

    def fields(self, phantom: PhantomGrid | None = None) -> AntennaFieldSet:
        phantom = phantom or self.phantom()
        if self.field_file:
            return import_fields(self.base_dir / self.field_file, self.grid)
        return build_array(self.array, phantom)

    @property
    def slice_grid(self) -> Grid:
        return Grid(self.grid.dims[:2], self.grid.spacing, self.grid.origin[:2])

    def slice_phantom(self) -> PhantomGrid:
        """z = 0 cross-section used for 2D searches on 3D scenarios."""
        return rasterize(self.shapes, self.slice_grid, self.tissue_db, self.gtv_tissue)

    @property
    def slice_boundaries(self) -> BoundarySpec:
        return BoundarySpec({k: v for k, v in self.boundaries.entries.items() if k not in ("zmin", "zmax")})


def _neck_config(name: str, shapes, seed: int) -> dict:
    return {
        "name": name,
        "mode": "2d",
        "seed": seed,
        "grid": {"dims": [120, 120], "spacing_mm": 1.0, "origin_mm": [-59.5, -59.5]},
        "shapes": [shape_to_dict(s) for s in shapes],
        "gtv": {"tissue": "tumor"},
        "boundaries": default_neck_bc(2).to_dict(),
    }


def simple_neck_config(seed: int = 1, **geometry) -> dict:
    """Scenario dict for the concentric-cylinder neck (2D, 1 mm grid)."""
    return _neck_config("simple_neck_2d", build_simple_neck(NeckGeometry(**geometry)), seed)


def realistic_neck_config(seed: int = 1, outline=(48.0, 42.0)) -> dict:
    """Scenario dict for the irregular neck with a non-spherical GTV."""
    return _neck_config("realistic_neck_2d", build_irregular_neck(outline), seed)
