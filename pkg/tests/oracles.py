"""Independent reference solutions for the bioheat solver."""

import numpy as np

from thermofocus.bioheat import BoundaryCondition, BoundarySpec
from thermofocus.phantom import DEFAULT_TISSUES, BloodModel, Cylinder, Grid, rasterize

BLOOD = BloodModel()


def slab_closed_form(x, L, k, c, q, h, T_s, T_a):
    """-k T'' + c (T - T_a) = q on [0, L], -k dT/dn = h (T - T_s) at both ends.

    Returns T(x) = T_a + q/c + C1 exp(lam x) + C2 exp(-lam (x - L)),
    with the exponentials written so both stay bounded.
    """
    lam = np.sqrt(c / k)
    Tp = T_a + q / c
    e = np.exp(-lam * L)
    # unknowns C1 (growing from x=L backwards), C2
    # T = Tp + C1 exp(lam (x - L)) + C2 exp(-lam x)
    # x = 0:  k T'(0) = h (T(0) - T_s)
    # x = L: -k T'(L) = h (T(L) - T_s)
    A = np.array(
        [
            [k * lam * e - h * e, -k * lam - h],
            [-k * lam - h, k * lam * e - h * e],
        ]
    )
    rhs = np.array([h * (Tp - T_s), h * (Tp - T_s)])
    C1, C2 = np.linalg.solve(A, rhs)
    return Tp + C1 * np.exp(lam * (x - L)) + C2 * np.exp(-lam * x)


def slab_problem(spacing, L=0.04, sar=20.0, h=82.0, T_s=20.0):
    """1D muscle slab as an nx x 1 grid with insulated side planes."""
    n = int(round(L / spacing))
    grid = Grid((n, 1), spacing, (spacing / 2, 0.0))
    ph = rasterize([Cylinder((L / 2, 0, 0), 10 * L, "muscle")], grid, require_gtv=False)
    bc = BoundarySpec(
        {
            "xmin": BoundaryCondition.convective(h, T_s),
            "xmax": BoundaryCondition.convective(h, T_s),
            "ymin": BoundaryCondition("insulated"),
            "ymax": BoundaryCondition("insulated"),
        }
    )
    m = DEFAULT_TISSUES["muscle"]
    c = BLOOD.rho_b * BLOOD.cp_b * m.omega
    x = grid.axes()[0]
    exact = slab_closed_form(x, L, m.k, c, m.rho * sar, h, T_s, BLOOD.T_a)
    return ph, bc, np.full(grid.dims, sar), exact


def manufactured_problem(spacing, L=0.04):
    """T* = 37 + sin(pi x / L) sin(pi y / L) on a muscle square, T = 37 on
    all sides, with the SAR that makes T* exact."""
    n = int(round(L / spacing))
    grid = Grid((n, n), spacing, (spacing / 2, spacing / 2))
    ph = rasterize([Cylinder((L / 2, L / 2, 0), 10 * L, "muscle")], grid, require_gtv=False)
    bc = BoundarySpec({"exterior": BoundaryCondition.isothermal(37.0)})
    m = DEFAULT_TISSUES["muscle"]
    c = BLOOD.rho_b * BLOOD.cp_b * m.omega
    X, Y = np.meshgrid(*grid.axes(), indexing="ij")
    bump = np.sin(np.pi * X / L) * np.sin(np.pi * Y / L)
    sar = (m.k * 2 * (np.pi / L) ** 2 + c) * bump / m.rho
    return ph, bc, sar, 37.0 + bump
