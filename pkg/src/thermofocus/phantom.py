"""Tissue properties, geometric phantoms and their rasterization onto a grid.

Coordinates are in metres throughout; scenario files use millimetres and are
converted on load. A 2D phantom is the z = 0 cross-section of the same 3D
shapes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# w [ml/(min kg)] = omega [1/s] / rho * 6e7
PERFUSION_SCALE = 6.0e7

AIR = "internal_air"
BACKGROUND = -1


class UnknownTissueError(KeyError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TissueProperties:
    name: str
    rho: float  # kg/m^3
    k: float  # W/(m C)
    w: float  # ml/(min kg)
    eps_r: float
    sigma: float  # S/m

    def __post_init__(self):
        if not (self.rho > 0 and self.k > 0):
            raise ValueError(f"{self.name}: rho and k must be positive")
        if self.w < 0 or self.sigma < 0:
            raise ValueError(f"{self.name}: w and sigma must be non-negative")
        if self.eps_r < 1:
            raise ValueError(f"{self.name}: eps_r must be >= 1")

    @property
    def omega(self) -> float:
        """Volumetric perfusion rate in 1/s."""
        return self.w * self.rho / PERFUSION_SCALE

    @staticmethod
    def w_from_omega(omega: float, rho: float) -> float:
        return omega / rho * PERFUSION_SCALE


@dataclass(frozen=True)
class BloodModel:
    rho_b: float = 1050.0
    cp_b: float = 3617.0
    T_a: float = 37.0

    def __post_init__(self):
        if min(self.rho_b, self.cp_b, self.T_a) <= 0:
            raise ValueError("blood parameters must be positive")


# Thermal and dielectric properties at 434 MHz.
_TABLE = (
    TissueProperties("skin", 1109.0, 0.37, 106.0, 49.4, 0.681),
    TissueProperties("fat", 911.0, 0.21, 33.0, 11.6, 0.082),
    TissueProperties("muscle", 1090.0, 0.49, 39.1, 56.9, 0.805),
    TissueProperties("bone", 1908.0, 0.32, 10.0, 13.1, 0.094),
    TissueProperties("spinal_cord", 1075.0, 0.51, 160.0, 35.0, 0.456),
    TissueProperties("tumor", 1050.0, 0.51, 72.3, 59.0, 0.89),
    TissueProperties(AIR, 1.15, 0.026, 0.0, 1.0, 0.0),
)


class TissueDatabase:
    """Name -> TissueProperties mapping with JSON round-tripping."""

    def __init__(self, tissues: Iterable[TissueProperties] = _TABLE):
        self._tissues = {t.name: t for t in tissues}

    def __getitem__(self, name: str) -> TissueProperties:
        try:
            return self._tissues[name]
        except KeyError:
            raise UnknownTissueError(f"unknown tissue {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tissues

    def __iter__(self):
        return iter(self._tissues.values())

    def __len__(self) -> int:
        return len(self._tissues)

    def names(self) -> list[str]:
        return list(self._tissues)

    def register(self, tissue: TissueProperties) -> None:
        self._tissues[tissue.name] = tissue

    def with_overrides(self, overrides: dict[str, dict]) -> "TissueDatabase":
        """Copy with per-tissue field overrides; unknown names are new tissues."""
        db = TissueDatabase(self)
        for name, values in overrides.items():
            if name in db:
                db.register(replace(db[name], **values))
            else:
                db.register(TissueProperties(name=name, **values))
        return db

    def scale_perfusion(self, factors: dict[str, float]) -> "TissueDatabase":
        db = TissueDatabase(self)
        for name, f in factors.items():
            t = db[name]
            if t.w * f < 0:
                raise ValueError(f"perturbed perfusion of {name!r} is negative")
            db.register(replace(t, w=t.w * f))
        return db

    def to_json(self) -> str:
        return json.dumps([asdict(t) for t in self], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TissueDatabase":
        return cls(TissueProperties(**d) for d in json.loads(text))


DEFAULT_TISSUES = TissueDatabase()


def tissue_lookup(name: str, db: TissueDatabase | None = None) -> TissueProperties:
    return (db or DEFAULT_TISSUES)[name]


# ---------------------------------------------------------------------------
# Shapes


def _as3(p: Sequence[float]) -> tuple[float, float, float]:
    p = tuple(float(v) for v in p)
    if len(p) == 2:
        p = p + (0.0,)
    if len(p) != 3:
        raise GeometryError(f"expected 2 or 3 coordinates, got {p}")
    return p


_AXES = {"x": 0, "y": 1, "z": 2}


def _radial_sq(points: np.ndarray, center, axis: str) -> np.ndarray:
    ax = _AXES[axis]
    d = points - np.asarray(center)
    d[:, ax] = 0.0
    return np.einsum("ij,ij->i", d, d)


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float, float]
    radius: float
    tissue: str
    priority: int = 0
    axis: str = "z"

    def __post_init__(self):
        object.__setattr__(self, "center", _as3(self.center))
        if not self.radius > 0:
            raise GeometryError(f"cylinder radius must be positive, got {self.radius}")
        if self.axis not in _AXES:
            raise GeometryError(f"bad cylinder axis {self.axis!r}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        return _radial_sq(points, self.center, self.axis) <= self.radius**2


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    tissue: str
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", _as3(self.center))
        if not self.radius > 0:
            raise GeometryError(f"sphere radius must be positive, got {self.radius}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = points - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= self.radius**2


@dataclass(frozen=True)
class Annulus:
    """Cylindrical shell r_in < r <= r_out around the z axis."""

    center: tuple[float, float, float]
    r_in: float
    r_out: float
    tissue: str
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", _as3(self.center))
        if not (0 < self.r_in < self.r_out):
            raise GeometryError(f"annulus needs 0 < r_in < r_out, got {self.r_in}, {self.r_out}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        r2 = _radial_sq(points, self.center, "z")
        return (r2 > self.r_in**2) & (r2 <= self.r_out**2)


@dataclass(frozen=True)
class PolygonPrism:
    """Infinite prism along z with an (x, y) polygon cross-section."""

    vertices: tuple[tuple[float, float], ...]
    tissue: str
    priority: int = 0

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise GeometryError("polygon prism needs at least 3 vertices")
        object.__setattr__(self, "vertices", verts)

    def contains(self, points: np.ndarray) -> np.ndarray:
        # even-odd ray casting
        x, y = points[:, 0], points[:, 1]
        inside = np.zeros(len(points), dtype=bool)
        v = np.asarray(self.vertices)
        for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < xint)
        return inside


Shape = Cylinder | Sphere | Annulus | PolygonPrism

_SHAPE_KINDS = {
    "cylinder": Cylinder,
    "sphere": Sphere,
    "annulus": Annulus,
    "polygon_prism": PolygonPrism,
}
_MM_FIELDS = ("center", "radius", "r_in", "r_out", "vertices")


def _scale(value, s):
    if isinstance(value, (list, tuple)):
        return [_scale(v, s) for v in value]
    return value * s


def shape_from_dict(d: dict) -> Shape:
    """Build a shape from its scenario-file form (lengths in mm)."""
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _SHAPE_KINDS:
        raise GeometryError(f"unknown shape kind {kind!r}")
    for key in _MM_FIELDS:
        if key in d:
            d[key] = _scale(d[key], 1e-3)
    return _SHAPE_KINDS[kind](**d)


def shape_to_dict(shape: Shape) -> dict:
    kind = {v: k for k, v in _SHAPE_KINDS.items()}[type(shape)]
    d = {"kind": kind}
    for key, value in asdict(shape).items():
        d[key] = _scale(value, 1e3) if key in _MM_FIELDS else value
    return d


# ---------------------------------------------------------------------------
# Neck builders


@dataclass
class NeckGeometry:
    """Simple neck defaults in mm. Only the tumor values come from the
    reference case; every other dimension is an estimate."""

    neck_radius: float = 55.0
    skin_inner: float = 53.0
    fat_inner: float = 48.0
    bone_center: tuple[float, float] = (0.0, -15.0)
    bone_radius: float = 12.0
    cord_radius: float = 5.0
    trachea_center: tuple[float, float] = (0.0, 25.0)
    trachea_radius: float = 8.0
    tumor_center: tuple[float, float, float] = (18.0, -25.0, 0.0)
    tumor_diameter: float = 12.0


def build_simple_neck(geometry: NeckGeometry | None = None) -> list[Shape]:
    """Concentric-cylinder neck with a spherical tumor, paint order ascending."""
    g = geometry or NeckGeometry()
    if g.tumor_diameter <= 0:
        raise GeometryError(f"tumor diameter must be positive, got {g.tumor_diameter}")
    mm = 1e-3
    origin = (0.0, 0.0, 0.0)
    bone = (g.bone_center[0] * mm, g.bone_center[1] * mm, 0.0)
    return [
        Cylinder(origin, g.neck_radius * mm, "muscle", priority=0),
        Annulus(origin, g.skin_inner * mm, g.neck_radius * mm, "skin", priority=1),
        Annulus(origin, g.fat_inner * mm, g.skin_inner * mm, "fat", priority=1),
        Cylinder(bone, g.bone_radius * mm, "bone", priority=2),
        Cylinder(bone, g.cord_radius * mm, "spinal_cord", priority=3),
        Cylinder(
            (g.trachea_center[0] * mm, g.trachea_center[1] * mm, 0.0),
            g.trachea_radius * mm,
            AIR,
            priority=4,
        ),
        Sphere(tuple(c * mm for c in g.tumor_center), g.tumor_diameter / 2 * mm, "tumor", priority=5),
    ]


def _blob(cx, cy, rx, ry, bumps, n=48):
    """Closed polygon for a lobed ellipse (x, y in mm)."""
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    r = 1.0 + sum(a * np.cos(m * t + p) for a, m, p in bumps)
    return [(cx + rx * ri * math.cos(ti), cy + ry * ri * math.sin(ti)) for ti, ri in zip(t, r)]


def build_irregular_neck(outline: tuple[float, float] = (48.0, 42.0)) -> list[Shape]:
    """Coarse stand-in for an anatomical neck: lobed outline, multi-part
    vertebra and an irregular tumor (enclosing diameter about 10 mm).

    ``outline`` is the outer skin semi-axes in mm; skin is 2 mm and fat
    5 mm thick.
    """
    ox, oy = outline
    bumps = [(0.04, 3, 0.3), (0.025, 5, 1.1)]
    mm = 1e-3

    def poly(rx, ry, tissue, prio, cx=0.0, cy=0.0, b=bumps):
        verts = [(x * mm, y * mm) for x, y in _blob(cx, cy, rx, ry, b)]
        return PolygonPrism(tuple(verts), tissue, priority=prio)

    shapes: list[Shape] = [
        poly(ox, oy, "skin", 0),
        poly(ox - 2, oy - 2, "fat", 1),
        poly(ox - 7, oy - 7, "muscle", 2),
        Cylinder((0.0, -14e-3, 0.0), 11e-3, "bone", priority=3),
        Cylinder((-9e-3, -24e-3, 0.0), 4.5e-3, "bone", priority=3),
        Cylinder((9e-3, -24e-3, 0.0), 4.5e-3, "bone", priority=3),
        Cylinder((0.0, -16e-3, 0.0), 4.5e-3, "spinal_cord", priority=4),
        poly(7.0, 9.0, AIR, 5, cx=2.0, cy=22.0, b=[(0.08, 2, 0.0)]),
        Sphere((-16.5e-3, -23e-3, 0.0), 3.8e-3, "tumor", priority=6),
        Sphere((-14.2e-3, -21.5e-3, 0.0), 2.6e-3, "tumor", priority=6),
        Sphere((-18.6e-3, -25.0e-3, 0.0), 2.2e-3, "tumor", priority=6),
    ]
    return shapes


# ---------------------------------------------------------------------------
# Grid and rasterization


@dataclass(frozen=True)
class Grid:
    """Regular cell-centred grid; origin is the centre of cell (0, 0[, 0])."""

    dims: tuple[int, ...]
    spacing: float
    origin: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) not in (2, 3) or len(self.origin) != len(self.dims):
            raise ValueError(f"grid must be 2D or 3D, got dims={self.dims}")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if min(self.dims) < 1:
            raise ValueError("grid dims must be >= 1")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_volume(self) -> float:
        """Cell volume (3D) or area per metre of depth (2D)."""
        return self.spacing**self.ndim

    def axes(self) -> list[np.ndarray]:
        return [o + self.spacing * np.arange(n) for o, n in zip(self.origin, self.dims)]

    def centers(self) -> np.ndarray:
        """(size, ndim) cell-centre coordinates in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def centers3(self) -> np.ndarray:
        """Cell centres padded to 3 coordinates (z = 0 for 2D grids)."""
        c = self.centers()
        if self.ndim == 2:
            c = np.hstack([c, np.zeros((len(c), 1))])
        return c

    def index_of(self, point: Sequence[float]) -> tuple[int, ...]:
        """Nearest cell index, clipped to the grid."""
        idx = []
        for p, o, n in zip(point, self.origin, self.dims):
            i = int(np.floor((p - o) / self.spacing + 0.5))
            idx.append(min(max(i, 0), n - 1))
        return tuple(idx)

    def coords_of(self, index: Sequence[int]) -> np.ndarray:
        return np.array([o + self.spacing * i for o, i in zip(self.origin, index)])

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": self.spacing * 1e3,
            "origin_mm": [o * 1e3 for o in self.origin],
        }


@dataclass(frozen=True)
class BoundaryFaces:
    """Faces between a tissue cell and a non-tissue cell or the grid edge.

    ``surface`` labels each face: ``exterior``, ``internal_air`` or a grid
    plane name (``xmin`` .. ``zmax``) for faces on the domain border.
    """

    cell: np.ndarray  # flat index of the tissue cell
    axis: np.ndarray
    side: np.ndarray  # -1 or +1 along axis
    surface: np.ndarray  # str labels

    def __len__(self) -> int:
        return len(self.cell)

    def surfaces(self) -> list[str]:
        return sorted(set(self.surface.tolist()))


PLANE_NAMES = (("xmin", "xmax"), ("ymin", "ymax"), ("zmin", "zmax"))


@dataclass(frozen=True)
class PhantomGrid:
    grid: Grid
    tissues: tuple[TissueProperties, ...]
    material: np.ndarray  # int, BACKGROUND for exterior cells
    masks: dict[str, np.ndarray]
    boundary_faces: BoundaryFaces
    gtv_tissue: str = "tumor"
    _props: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    @property
    def tissue_mask(self) -> np.ndarray:
        return self.masks["tissue"]

    @property
    def gtv(self) -> np.ndarray:
        return self.masks["gtv"]

    @property
    def healthy(self) -> np.ndarray:
        return self.masks["healthy"]

    def property_map(self, name: str) -> np.ndarray:
        """Per-cell tissue property (``rho``, ``k``, ``w``, ``omega``,
        ``eps_r``, ``sigma``); zero on background cells."""
        if name not in self._props:
            table = np.array([getattr(t, name) for t in self.tissues] + [0.0])
            m = np.where(self.material == BACKGROUND, len(self.tissues), self.material)
            arr = table[m]
            arr.setflags(write=False)
            self._props[name] = arr
        return self._props[name]

    def with_tissues(self, db: TissueDatabase) -> "PhantomGrid":
        """Same geometry with tissue properties re-read from ``db``."""
        tissues = tuple(db[t.name] for t in self.tissues)
        return replace(self, tissues=tissues, _props={})

    def gtv_centroid(self) -> np.ndarray:
        return self.grid.centers()[self.gtv.ravel()].mean(axis=0)

    def export_csv(self, path: str | Path) -> None:
        """Write ``x_mm,y_mm[,z_mm],tissue_id`` rows (tissue_id -1 = outside)."""
        names = ["x_mm", "y_mm", "z_mm"][: self.grid.ndim]
        c = self.grid.centers() * 1e3
        with open(path, "w") as f:
            f.write(",".join(names + ["tissue_id"]) + "\n")
            for row, m in zip(c, self.material.ravel()):
                f.write(",".join(f"{v:.6g}" for v in row) + f",{m}\n")


def _boundary_faces(tissue: np.ndarray, air: np.ndarray) -> BoundaryFaces:
    ndim = tissue.ndim
    flat = np.arange(tissue.size).reshape(tissue.shape)
    cells, axes, sides, labels = [], [], [], []
    for ax in range(ndim):
        for side in (-1, 1):
            pad = [(0, 0)] * ndim
            pad[ax] = (1, 0) if side == -1 else (0, 1)
            # neighbour class: 0 tissue, 1 exterior, 2 internal air, 3 grid edge
            cls = np.where(tissue, 0, np.where(air, 2, 1))
            cls = np.pad(cls, pad, constant_values=3)
            sl = [slice(None)] * ndim
            sl[ax] = slice(0, -1) if side == -1 else slice(1, None)
            nb = cls[tuple(sl)]
            sel = tissue & (nb != 0)
            n = int(sel.sum())
            if not n:
                continue
            cells.append(flat[sel])
            axes.append(np.full(n, ax))
            sides.append(np.full(n, side))
            names = np.array(["", "exterior", AIR, PLANE_NAMES[ax][side > 0]], dtype=object)
            labels.append(names[nb[sel]])
    if not cells:
        empty = np.zeros(0, dtype=int)
        return BoundaryFaces(empty, empty, empty, np.zeros(0, dtype=object))
    return BoundaryFaces(
        np.concatenate(cells),
        np.concatenate(axes),
        np.concatenate(sides),
        np.concatenate(labels),
    )


def rasterize(
    shapes: Sequence[Shape],
    grid: Grid,
    db: TissueDatabase | None = None,
    gtv_tissue: str = "tumor",
    require_gtv: bool = True,
) -> PhantomGrid:
    """Paint shapes onto the grid by cell-centre membership.

    Shapes are painted in ascending priority (stable in list order), so later
    priorities overwrite earlier ones. Raises GeometryError if a shape covers
    no cell centre, or if ``require_gtv`` and the GTV ends up empty.
    """
    db = db or DEFAULT_TISSUES
    if not shapes:
        raise GeometryError("no shapes to rasterize")
    pts = grid.centers3()
    names: list[str] = []
    material = np.full(grid.size, BACKGROUND, dtype=np.int16)
    for shape in sorted(shapes, key=lambda s: s.priority):
        db[shape.tissue]  # validates the name
        inside = shape.contains(pts)
        if not inside.any():
            raise GeometryError(f"{type(shape).__name__} of {shape.tissue!r} does not intersect the grid")
        if shape.tissue not in names:
            names.append(shape.tissue)
        material[inside] = names.index(shape.tissue)
    material = material.reshape(grid.dims)
    material.setflags(write=False)

    air = np.zeros(grid.dims, dtype=bool)
    if AIR in names:
        air = material == names.index(AIR)
    tissue = (material != BACKGROUND) & ~air
    gtv = np.zeros(grid.dims, dtype=bool)
    if gtv_tissue in names:
        gtv = material == names.index(gtv_tissue)
    if require_gtv and not gtv.any():
        raise GeometryError(f"GTV ({gtv_tissue!r}) is empty on this grid")
    masks = {
        "tissue": tissue,
        "gtv": gtv,
        "healthy": tissue & ~gtv,
        "internal_air": air,
        "exterior": material == BACKGROUND,
    }
    for m in masks.values():
        m.setflags(write=False)
    return PhantomGrid(
        grid=grid,
        tissues=tuple(db[n] for n in names),
        material=material,
        masks=masks,
        boundary_faces=_boundary_faces(tissue, air),
        gtv_tissue=gtv_tissue,
    )


def smallest_enclosing_ball(points: np.ndarray, seed: int = 0) -> tuple[np.ndarray, float]:
    """Exact minimum enclosing ball (Welzl, move-to-front), returns (center, radius)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise ValueError("no points")
    if len(pts) > 8:
        from scipy.spatial import ConvexHull, QhullError

        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass  # degenerate (collinear/coplanar); use all points
    pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    dim = pts.shape[1]

    def ball_from(support):
        if not support:
            return np.zeros(dim), -1.0
        p0 = support[0]
        if len(support) == 1:
            return p0.copy(), 0.0
        # circumcentre in the affine hull of the support points
        a = np.array([p - p0 for p in support[1:]])
        rhs = 0.5 * np.einsum("ij,ij->i", a, a)
        coef, *_ = np.linalg.lstsq(a @ a.T, rhs, rcond=None)
        c = p0 + coef @ a
        return c, float(np.linalg.norm(c - p0))

    def inside(c, r, p):
        return r >= 0 and np.linalg.norm(p - c) <= r * (1 + 1e-12) + 1e-15

    def welzl(n, support):
        c, r = ball_from(support)
        if len(support) == dim + 1:
            return c, r
        for i in range(n):
            if not inside(c, r, pts[i]):
                c, r = welzl(i, support + [pts[i]])
        return c, r

    c, r = welzl(len(pts), [])
    return c, r
