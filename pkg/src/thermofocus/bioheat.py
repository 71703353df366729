"""Steady-state Pennes bioheat solver on a phantom grid.

Solves

    -div(k grad T) + rho_b c_b omega (T - T_a) = rho SAR

on tissue cells with a cell-centred finite-volume stencil (5-point in 2D,
7-point in 3D). Perfusion is a sink pulling T toward the arterial
temperature. Non-tissue cells are not unknowns; they act only through
boundary faces, which carry convective (Robin), isothermal (Dirichlet) or
insulated conditions. 2D problems are per metre of depth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import SarMap
from .phantom import PLANE_NAMES, BloodModel, PhantomGrid

DIRECT_LIMIT = 40_000


class BoundaryError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str  # "convective" | "isothermal" | "insulated"
    T_s: float = 37.0
    h: float = 0.0  # W/(m^2 C)

    def __post_init__(self):
        if self.kind not in ("convective", "isothermal", "insulated"):
            raise BoundaryError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "convective" and not self.h > 0:
            raise BoundaryError("convective boundary needs h > 0")

    @classmethod
    def convective(cls, h: float, T_s: float) -> "BoundaryCondition":
        return cls("convective", T_s, h)

    @classmethod
    def isothermal(cls, T_s: float) -> "BoundaryCondition":
        return cls("isothermal", T_s)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind != "insulated":
            d["T_s"] = self.T_s
        if self.kind == "convective":
            d["h"] = self.h
        return d


PLANES = tuple(p for pair in PLANE_NAMES for p in pair)
SELECTORS = ("exterior", "internal_air") + PLANES


@dataclass(frozen=True)
class BoundarySpec:
    """Surface selector -> condition.

    Faces on the grid border use their plane entry when one exists and fall
    back to ``exterior`` otherwise.
    """

    entries: dict[str, BoundaryCondition]

    def __post_init__(self):
        for sel in self.entries:
            if sel not in SELECTORS:
                raise BoundaryError(f"unknown surface selector {sel!r}")

    def resolve(self, surface: str) -> BoundaryCondition | None:
        if surface in self.entries:
            return self.entries[surface]
        if surface in PLANES:
            return self.entries.get("exterior")
        return None

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.entries.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundarySpec":
        return cls({k: BoundaryCondition(**v) for k, v in d.items()})


def default_neck_bc(ndim: int = 2) -> BoundarySpec:
    """Water bolus on the skin, air flow in the trachea, and (3D) body
    temperature on the axial cut planes."""
    entries = {
        "exterior": BoundaryCondition.convective(82.0, 20.0),
        "internal_air": BoundaryCondition.convective(50.0, 30.0),
    }
    if ndim == 3:
        entries["zmin"] = BoundaryCondition.isothermal(37.0)
        entries["zmax"] = BoundaryCondition.isothermal(37.0)
    return BoundarySpec(entries)


@dataclass
class LinearSystem:
    A: sp.csr_matrix
    b: np.ndarray
    cells: np.ndarray  # flat index of each unknown
    # pieces kept for budgets and re-solves
    b_fixed: np.ndarray = field(repr=False, default=None)  # boundary + perfusion terms of b
    face_cell: np.ndarray = field(repr=False, default=None)  # unknown index per BC face
    face_G: np.ndarray = field(repr=False, default=None)
    face_Ts: np.ndarray = field(repr=False, default=None)
    perf_G: np.ndarray = field(repr=False, default=None)
    volume: float = 0.0


def _harmonic(a, b):
    return 2 * a * b / (a + b)


def assemble_operator(phantom: PhantomGrid, blood: BloodModel, bc: BoundarySpec) -> LinearSystem:
    """Assemble the SAR-independent part of the system."""
    grid = phantom.grid
    h = grid.spacing
    area = h ** (grid.ndim - 1)
    vol = grid.cell_volume
    tissue = phantom.tissue_mask
    cells = np.flatnonzero(tissue.ravel())
    n = cells.size
    if n == 0:
        raise BoundaryError("phantom has no tissue cells")
    unknown = np.full(grid.size, -1)
    unknown[cells] = np.arange(n)
    k = phantom.property_map("k").ravel()

    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    idx = np.arange(grid.size).reshape(grid.dims)
    for ax in range(grid.ndim):
        sl_a = [slice(None)] * grid.ndim
        sl_b = [slice(None)] * grid.ndim
        sl_a[ax] = slice(0, -1)
        sl_b[ax] = slice(1, None)
        ia = idx[tuple(sl_a)].ravel()
        ib = idx[tuple(sl_b)].ravel()
        both = tissue.ravel()[ia] & tissue.ravel()[ib]
        ia, ib = ia[both], ib[both]
        G = _harmonic(k[ia], k[ib]) * area / h
        ua, ub = unknown[ia], unknown[ib]
        rows += [ua, ub]
        cols += [ub, ua]
        vals += [-G, -G]
        np.add.at(diag, ua, G)
        np.add.at(diag, ub, G)

    faces = phantom.boundary_faces
    uncovered = sorted({s for s in faces.surface.tolist() if bc.resolve(s) is None})
    if uncovered:
        count = sum(int((faces.surface == s).sum()) for s in uncovered)
        raise BoundaryError(f"{count} boundary faces not covered by the boundary spec: surfaces {uncovered}")
    f_cell, f_G, f_Ts = [], [], []
    for surface in faces.surfaces():
        cond = bc.resolve(surface)
        if cond.kind == "insulated":
            continue
        sel = faces.surface == surface
        kc = k[faces.cell[sel]]
        if cond.kind == "convective":
            # half-cell conduction in series with the film coefficient
            G = area / (h / (2 * kc) + 1.0 / cond.h)
        else:
            G = 2 * kc * area / h
        f_cell.append(unknown[faces.cell[sel]])
        f_G.append(G)
        f_Ts.append(np.full(int(sel.sum()), cond.T_s))
    f_cell = np.concatenate(f_cell) if f_cell else np.zeros(0, int)
    f_G = np.concatenate(f_G) if f_G else np.zeros(0)
    f_Ts = np.concatenate(f_Ts) if f_Ts else np.zeros(0)
    np.add.at(diag, f_cell, f_G)
    b_fixed = np.zeros(n)
    np.add.at(b_fixed, f_cell, f_G * f_Ts)

    perf = blood.rho_b * blood.cp_b * phantom.property_map("omega").ravel()[cells] * vol
    diag += perf
    b_fixed += perf * blood.T_a

    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    A.sum_duplicates()
    return LinearSystem(A, b_fixed.copy(), cells, b_fixed, f_cell, f_G, f_Ts, perf, vol)


def source_vector(phantom: PhantomGrid, sar, cells: np.ndarray) -> np.ndarray:
    values = sar.values if isinstance(sar, SarMap) else np.asarray(sar)
    if values.shape != phantom.dims:
        raise ValueError(f"SAR map {values.shape} does not match phantom {phantom.dims}")
    rho = phantom.property_map("rho").ravel()[cells]
    return rho * values.ravel()[cells] * phantom.grid.cell_volume


def assemble(phantom: PhantomGrid, blood: BloodModel, sar, bc: BoundarySpec) -> LinearSystem:
    """Full system (A, b) for one SAR map."""
    system = assemble_operator(phantom, blood, bc)
    system.b = system.b_fixed + source_vector(phantom, sar, system.cells)
    return system


@dataclass
class TemperatureField:
    values: np.ndarray  # degC on tissue cells, NaN elsewhere
    mask: np.ndarray  # tissue cells
    residual: float
    iterations: int
    wall_ms: float = 0.0

    def tissue_values(self) -> np.ndarray:
        return self.values[self.mask]

    def diagnostics(self) -> dict:
        return {"residual": self.residual, "iterations": self.iterations, "wall_ms": self.wall_ms}


class SteadySolver:
    """Factorizes the bioheat operator once and solves for many SAR maps.

    Systems up to ``direct_limit`` unknowns use a sparse LU factorization;
    larger ones use Jacobi-preconditioned conjugate gradients.
    """

    def __init__(
        self,
        phantom: PhantomGrid,
        blood: BloodModel,
        bc: BoundarySpec,
        tol: float = 1e-10,
        direct_limit: int = DIRECT_LIMIT,
        max_iter: int = 20_000,
    ):
        self.phantom = phantom
        self.blood = blood
        self.bc = bc
        self.tol = tol
        self.max_iter = max_iter
        self.system = assemble_operator(phantom, blood, bc)
        A = self.system.A
        self.direct = A.shape[0] <= direct_limit
        if self.direct:
            self._lu = spla.splu(A.tocsc())
        else:
            self._precond = sp.diags(1.0 / A.diagonal())

    def solve(self, sar) -> TemperatureField:
        t0 = time.perf_counter()
        A = self.system.A
        b = self.system.b_fixed + source_vector(self.phantom, sar, self.system.cells)
        bnorm = np.linalg.norm(b)
        if self.direct:
            x = self._lu.solve(b)
            iterations = 1
        else:
            count = [0]

            def cb(_):
                count[0] += 1

            x, info = spla.cg(
                A, b, rtol=self.tol, atol=0.0, maxiter=self.max_iter, M=self._precond, callback=cb
            )
            iterations = count[0]
            if info != 0:
                res = np.linalg.norm(A @ x - b) / bnorm
                raise ConvergenceError(f"CG did not converge in {self.max_iter} iterations (residual {res:.3e})")
        res = float(np.linalg.norm(A @ x - b) / bnorm) if bnorm > 0 else 0.0
        if res > self.tol:
            raise ConvergenceError(f"solve residual {res:.3e} exceeds tolerance {self.tol:.1e}")
        values = np.full(self.phantom.dims, np.nan)
        values.ravel()[self.system.cells] = x
        return TemperatureField(
            values, self.phantom.tissue_mask, res, iterations, (time.perf_counter() - t0) * 1e3
        )


def solve_steady(
    phantom: PhantomGrid, blood: BloodModel, sar, bc: BoundarySpec, tol: float = 1e-10
) -> TemperatureField:
    return SteadySolver(phantom, blood, bc, tol).solve(sar)


def energy_budget(
    phantom: PhantomGrid, blood: BloodModel, sar, bc: BoundarySpec, temp: TemperatureField
) -> dict:
    """Heat budget in W (3D) or W/m (2D): deposited = boundary + perfusion."""
    system = assemble_operator(phantom, blood, bc)
    T = temp.values.ravel()[system.cells]
    deposited = float(source_vector(phantom, sar, system.cells).sum())
    boundary = float((system.face_G * (T[system.face_cell] - system.face_Ts)).sum())
    perfusion = float((system.perf_G * (T - blood.T_a)).sum())
    return {"deposited": deposited, "boundary_outflow": boundary, "perfusion_sink": perfusion}
