"""Axis-aligned Gaussian fit of a focused |E|^2 map, and the relocatable
SAR mask built from it."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .fields import SarMap
from .phantom import Grid, PhantomGrid


class GaussianFitError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianParams:
    a: float  # V^2/m^2
    r0: tuple[float, ...]  # m
    sigma: tuple[float, ...]  # m, per axis

    def __post_init__(self):
        object.__setattr__(self, "r0", tuple(float(v) for v in self.r0))
        object.__setattr__(self, "sigma", tuple(float(v) for v in self.sigma))
        if not self.a > 0:
            raise ValueError("Gaussian height must be positive")
        if len(self.r0) != len(self.sigma) or min(self.sigma) <= 0:
            raise ValueError("sigma must be positive, one per axis of r0")

    def moved(self, r0) -> "GaussianParams":
        return replace(self, r0=tuple(r0))

    def to_dict(self, rms_residual: float | None = None) -> dict:
        d = {
            "a": self.a,
            "r0_mm": [v * 1e3 for v in self.r0],
            "sigma_mm": [v * 1e3 for v in self.sigma],
        }
        if rms_residual is not None:
            d["rms_residual"] = rms_residual
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianParams":
        return cls(d["a"], [v * 1e-3 for v in d["r0_mm"]], [v * 1e-3 for v in d["sigma_mm"]])


def _gauss(x: np.ndarray, a: float, r0, sigma) -> np.ndarray:
    z = (x - np.asarray(r0)) / np.asarray(sigma)
    return a * np.exp(-0.5 * np.einsum("ij,ij->i", z, z))


def eval_gaussian(p: GaussianParams, grid: Grid) -> np.ndarray:
    """g(r) = a exp(-1/2 sum_i ((r_i - r0_i) / sigma_i)^2) at every cell centre."""
    if len(p.r0) != grid.ndim:
        raise ValueError(f"{len(p.r0)}D Gaussian on a {grid.ndim}D grid")
    return _gauss(grid.centers(), p.a, p.r0, p.sigma).reshape(grid.dims)


def gaussian_sar(p: GaussianParams, phantom: PhantomGrid) -> SarMap:
    """sigma g / (2 rho) on tissue cells, zero elsewhere."""
    g = eval_gaussian(p, phantom.grid)
    sigma = phantom.property_map("sigma")
    rho = phantom.property_map("rho")
    sar = np.zeros(phantom.dims)
    m = phantom.tissue_mask
    sar[m] = sigma[m] * g[m] / (2 * rho[m])
    return SarMap(sar, phantom.grid)


def fit_gaussian(
    e2: np.ndarray, grid: Grid, roi_mask: np.ndarray | None = None, threshold: float = 0.05
) -> tuple[GaussianParams, float]:
    """Fit an axis-aligned Gaussian to the |E|^2 peak inside ``roi_mask``.

    The support is the connected region around the ROI peak where
    ``e2 >= threshold * peak``. A linear least-squares fit of ``log e2``
    gives the starting parameters; one Gauss-Newton step on the linear
    residual polishes them. Returns the parameters and the RMS residual
    over the support, relative to the peak value.
    """
    e2 = np.asarray(e2, dtype=float)
    if e2.shape != grid.dims:
        raise ValueError(f"map {e2.shape} does not match grid {grid.dims}")
    roi = np.ones(grid.dims, bool) if roi_mask is None else np.asarray(roi_mask, bool)
    if not roi.any():
        raise GaussianFitError("empty region of interest")
    masked = np.where(roi, e2, -np.inf)
    peak_idx = np.unravel_index(int(np.argmax(masked)), grid.dims)
    peak = e2[peak_idx]
    if not peak > 0:
        raise GaussianFitError("no positive values in the region of interest")
    above = roi & (e2 >= threshold * peak)
    labels, _ = ndimage.label(above)
    support = labels == labels[peak_idx]
    if support.sum() < 10:
        raise GaussianFitError(f"only {int(support.sum())} cells in the fit support (need >= 10)")

    x = grid.centers()[support.ravel()]
    y = e2[support]
    ref = grid.coords_of(peak_idx)
    xs = x - ref  # centred for conditioning
    ndim = grid.ndim
    design = np.hstack([np.ones((len(x), 1)), xs, xs**2])
    if np.ptp(np.log(y)) < 1e-9 or np.linalg.matrix_rank(design) < design.shape[1]:
        raise GaussianFitError("degenerate fit support (cells are collinear or map is flat)")
    coef, *_ = np.linalg.lstsq(design, np.log(y), rcond=None)
    b, q = coef[1 : 1 + ndim], coef[1 + ndim :]
    if np.any(q >= 0):
        raise GaussianFitError("fitted variance is not positive; profile is not Gaussian-like")
    sig = np.sqrt(-1.0 / (2 * q))
    c = -b / (2 * q)
    a = float(np.exp(coef[0] - np.sum(q * c**2)))

    # one Gauss-Newton step on the linear-domain residual
    theta = np.concatenate([[a], c, sig])
    g = _gauss(xs, a, c, sig)
    z = (xs - c) / sig
    J = np.hstack([(g / a)[:, None], g[:, None] * z / sig, g[:, None] * z**2 / sig])
    step, *_ = np.linalg.lstsq(J, y - g, rcond=None)
    polished = theta + step
    if polished[0] > 0 and np.all(polished[1 + ndim :] > 0):
        new_res = y - _gauss(xs, polished[0], polished[1 : 1 + ndim], polished[1 + ndim :])
        if np.sum(new_res**2) <= np.sum((y - g) ** 2):
            theta = polished
    a, c, sig = float(theta[0]), theta[1 : 1 + ndim], theta[1 + ndim :]
    rms = float(np.sqrt(np.mean((y - _gauss(xs, a, c, sig)) ** 2)) / peak)
    return GaussianParams(a, tuple(c + ref), tuple(sig)), rms
