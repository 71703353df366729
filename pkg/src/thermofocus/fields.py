"""Per-antenna field maps, their superposition and the resulting SAR.

The single-antenna fields are an analytic surrogate: an outgoing
cylindrical (2D) or spherical (3D) wave in a homogeneous lossy medium with
muscle properties. Externally solved fields can be imported instead.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .phantom import DEFAULT_TISSUES, Grid, PhantomGrid, TissueProperties

EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6
BINARY_MAGIC = b"AFS1"


class FieldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AntennaFieldSet:
    """Complex peak-value E phasors, one scalar map per antenna.

    ``fields`` has shape ``(n_antennas, *grid.dims)``. In 3D the scalar is
    the z component (patches polarized along the neck axis).
    """

    grid: Grid
    fields: np.ndarray
    frequency: float
    source_positions: np.ndarray | None = None

    def __post_init__(self):
        if self.fields.shape[1:] != self.grid.dims:
            raise ValueError(f"field maps {self.fields.shape[1:]} do not match grid {self.grid.dims}")
        if not np.all(np.isfinite(self.fields)):
            raise ValueError("field maps contain non-finite values")

    @property
    def n_antennas(self) -> int:
        return self.fields.shape[0]

    def flat(self, mask: np.ndarray | None = None) -> np.ndarray:
        """(n_antennas, n_cells) view, optionally restricted to a cell mask."""
        f = self.fields.reshape(self.n_antennas, -1)
        return f if mask is None else f[:, mask.ravel()]


@dataclass(frozen=True)
class ExcitationVector:
    weights: np.ndarray  # complex

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=complex)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-D array")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def from_polar(cls, amplitude, phase) -> "ExcitationVector":
        return cls(np.asarray(amplitude, float) * np.exp(1j * np.asarray(phase, float)))

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.weights)

    @property
    def phase(self) -> np.ndarray:
        return np.mod(np.angle(self.weights), 2 * np.pi)

    def scaled(self, c: complex) -> "ExcitationVector":
        return ExcitationVector(self.weights * c)

    def to_json(self) -> list[dict]:
        # re/im keep the exact complex value; polar form is for people
        return [
            {"amplitude": float(a), "phase_rad": float(p), "re": float(w.real), "im": float(w.imag)}
            for a, p, w in zip(self.amplitude, self.phase, self.weights)
        ]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "ExcitationVector":
        if all("re" in d and "im" in d for d in items):
            return cls(np.array([complex(d["re"], d["im"]) for d in items]))
        return cls.from_polar([d["amplitude"] for d in items], [d["phase_rad"] for d in items])


@dataclass(frozen=True)
class SarMap:
    values: np.ndarray  # W/kg, shape grid.dims
    grid: Grid


def wavenumber(medium: TissueProperties, frequency: float) -> complex:
    """Complex wavenumber with exp(-jkr) propagation (Im k <= 0)."""
    if frequency <= 0:
        raise ValueError("frequency must be positive")
    w = 2 * math.pi * frequency
    eps_c = medium.eps_r - 1j * medium.sigma / (w * EPS0)
    k = w * np.sqrt(MU0 * EPS0 * eps_c)
    # principal root of eps_c (Im <= 0) gives Re k > 0, Im k <= 0
    return complex(k)


def analytic_source_field(
    source_pos: Sequence[float],
    medium: TissueProperties,
    grid: Grid,
    frequency: float = 434e6,
    amplitude: float = 1.0,
    r_min: float | None = None,
) -> np.ndarray:
    """Outgoing wave A exp(-jkr)/sqrt(r) (2D) or A exp(-jkr)/r (3D).

    ``r`` is clamped below at ``r_min`` (default: one grid spacing).
    """
    k = wavenumber(medium, frequency)
    r_min = grid.spacing if r_min is None else r_min
    src = np.asarray(source_pos, dtype=float)[: grid.ndim]
    d = grid.centers() - src
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    rc = np.maximum(r, r_min)
    spread = np.sqrt(rc) if grid.ndim == 2 else rc
    e = amplitude * np.exp(-1j * k * r) / spread
    return e.reshape(grid.dims)


def ring_positions(n: int, radius: float, rotation: float = 0.0, ndim: int = 2) -> np.ndarray:
    ang = rotation + 2 * np.pi * np.arange(n) / n
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    if ndim == 3:
        pos = np.hstack([pos, np.zeros((n, 1))])
    return pos


@dataclass(frozen=True)
class ArrayConfig:
    n_antennas: int = 8
    standoff: float = 0.05  # m from the tissue outer radius
    ring_radius: float | None = None  # overrides standoff when set
    frequency: float = 434e6
    rotation: float = 0.0  # rad, angle of antenna 0
    peak_field: float = 100.0  # V/m, per-antenna peak in tissue
    medium: str = "muscle"


def tissue_outer_radius(phantom: PhantomGrid) -> float:
    """Largest xy distance from the z axis over non-background cells."""
    c = phantom.grid.centers()[phantom.material.ravel() >= 0]
    return float(np.sqrt(c[:, 0] ** 2 + c[:, 1] ** 2).max())


def build_array(cfg: ArrayConfig, phantom: PhantomGrid) -> AntennaFieldSet:
    """Uniform circular array of analytic sources around the phantom."""
    if cfg.n_antennas < 2:
        raise ValueError("an array needs at least 2 antennas")
    grid = phantom.grid
    body = phantom.material.ravel() >= 0
    r_body = tissue_outer_radius(phantom)
    radius = cfg.ring_radius if cfg.ring_radius is not None else r_body + cfg.standoff
    pos = ring_positions(cfg.n_antennas, radius, cfg.rotation, grid.ndim)
    centers = grid.centers()
    for i, p in enumerate(pos):
        dist = np.sqrt(((centers[body] - p[: grid.ndim]) ** 2).sum(axis=1)).min()
        if dist < grid.spacing:
            raise ValueError(f"antenna {i} at {p} lies inside or adjacent to tissue")
    medium = DEFAULT_TISSUES[cfg.medium]
    maps = np.stack([analytic_source_field(p, medium, grid, cfg.frequency) for p in pos])
    # common scale so the strongest antenna peaks at cfg.peak_field inside the body
    peak = np.abs(maps.reshape(len(pos), -1)[:, body]).max()
    maps *= cfg.peak_field / peak
    return AntennaFieldSet(grid, maps, cfg.frequency, pos)


def superpose_field(fields: AntennaFieldSet, w: ExcitationVector) -> np.ndarray:
    """Complex total field sum_n w_n E_n."""
    if len(w) != fields.n_antennas:
        raise ValueError(f"{len(w)} weights for {fields.n_antennas} antennas")
    return np.tensordot(w.weights, fields.fields, axes=1)


def superpose(fields: AntennaFieldSet, w: ExcitationVector) -> np.ndarray:
    """Per-cell |sum_n w_n E_n|^2 in V^2/m^2."""
    e = superpose_field(fields, w)
    return e.real**2 + e.imag**2


def sar_from_field(e2: np.ndarray, phantom: PhantomGrid) -> SarMap:
    """SAR = sigma |E|^2 / (2 rho); zero where sigma is zero or outside tissue."""
    if e2.shape != phantom.dims:
        raise ValueError(f"|E|^2 map {e2.shape} does not match phantom {phantom.dims}")
    sigma = phantom.property_map("sigma")
    rho = phantom.property_map("rho")
    sar = np.zeros(phantom.dims)
    m = phantom.tissue_mask & (sigma > 0)
    sar[m] = sigma[m] * e2[m] / (2 * rho[m])
    return SarMap(sar, phantom.grid)


# ---------------------------------------------------------------------------
# Field files


def _header(fields: AntennaFieldSet) -> str:
    dims = " ".join(str(n) for n in fields.grid.dims)
    return f"{dims} {float(fields.grid.spacing * 1e3)!r} {fields.n_antennas} {float(fields.frequency)!r}"


def export_fields(fields: AntennaFieldSet, path: str | Path, binary: bool = False) -> None:
    if binary:
        g = fields.grid
        with open(path, "wb") as f:
            f.write(BINARY_MAGIC)
            f.write(struct.pack("<B", g.ndim))
            f.write(struct.pack(f"<{g.ndim}I", *g.dims))
            f.write(struct.pack("<dId", g.spacing * 1e3, fields.n_antennas, fields.frequency))
            f.write(fields.fields.astype("<c16").tobytes(order="C"))
        return
    idx = np.indices(fields.grid.dims).reshape(fields.grid.ndim, -1).T
    with open(path, "w") as f:
        f.write(_header(fields) + "\n")
        for a in range(fields.n_antennas):
            vals = fields.fields[a].ravel().tolist()  # Python complex: repr round-trips
            for ijk, v in zip(idx.tolist(), vals):
                f.write(f"{a}," + ",".join(map(str, ijk)) + f",{v.real!r},{v.imag!r}\n")


def _check_header(dims, spacing_mm, grid: Grid, path) -> None:
    if tuple(dims) != grid.dims:
        raise FieldFormatError(f"{path}: grid dims {tuple(dims)} do not match {grid.dims}")
    if not math.isclose(spacing_mm * 1e-3, grid.spacing, rel_tol=1e-9):
        raise FieldFormatError(f"{path}: spacing {spacing_mm} mm does not match {grid.spacing * 1e3} mm")


def import_fields(path: str | Path, grid: Grid) -> AntennaFieldSet:
    """Load a field file (text or ``AFS1`` binary) onto ``grid``."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == BINARY_MAGIC:
        return _import_binary(path, grid)

    with open(path) as f:
        head = f.readline().split()
        if len(head) != grid.ndim + 3:
            raise FieldFormatError(f"{path}: header needs {grid.ndim + 3} fields, got {len(head)}")
        try:
            dims = [int(v) for v in head[: grid.ndim]]
            spacing_mm = float(head[grid.ndim])
            n_ant = int(head[grid.ndim + 1])
            freq = float(head[grid.ndim + 2])
        except ValueError as exc:
            raise FieldFormatError(f"{path}: malformed header: {exc}") from None
        _check_header(dims, spacing_mm, grid, path)
        maps = np.zeros((n_ant, *grid.dims), dtype=complex)
        seen = np.zeros((n_ant, *grid.dims), dtype=bool)
        ncol = grid.ndim + 3
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != ncol:
                raise FieldFormatError(f"{path}:{lineno}: expected {ncol} columns, got {len(parts)}")
            try:
                a = int(parts[0])
                ijk = tuple(int(v) for v in parts[1 : grid.ndim + 1])
                re, im = float(parts[-2]), float(parts[-1])
            except ValueError:
                raise FieldFormatError(f"{path}:{lineno}: malformed record {line.strip()!r}") from None
            if not (math.isfinite(re) and math.isfinite(im)):
                raise FieldFormatError(f"{path}:{lineno}: non-finite value in record {line.strip()!r}")
            if not (0 <= a < n_ant) or any(not 0 <= i < n for i, n in zip(ijk, grid.dims)):
                raise FieldFormatError(f"{path}:{lineno}: index out of range in {line.strip()!r}")
            maps[(a, *ijk)] = complex(re, im)
            seen[(a, *ijk)] = True
    if not seen.all():
        raise FieldFormatError(f"{path}: {int((~seen).sum())} cells missing")
    return AntennaFieldSet(grid, maps, freq)


def _import_binary(path: Path, grid: Grid) -> AntennaFieldSet:
    with open(path, "rb") as f:
        f.read(4)
        (ndim,) = struct.unpack("<B", f.read(1))
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        spacing_mm, n_ant, freq = struct.unpack("<dId", f.read(20))
        if ndim != grid.ndim:
            raise FieldFormatError(f"{path}: {ndim}D file for a {grid.ndim}D grid")
        _check_header(dims, spacing_mm, grid, path)
        raw = np.frombuffer(f.read(), dtype="<c16")
    expected = n_ant * int(np.prod(dims))
    if raw.size != expected:
        raise FieldFormatError(f"{path}: {raw.size} values, expected {expected}")
    maps = raw.reshape(n_ant, *dims).astype(complex)
    bad = ~np.isfinite(maps)
    if bad.any():
        rec = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FieldFormatError(f"{path}: non-finite value at record {rec}")
    return AntennaFieldSet(grid, maps, freq)
