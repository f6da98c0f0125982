"""Input-gradient saliency and its 2D projections.

Per-point saliency is the mean of |d logit / d feature| over all input
features (gradient of the pre-sigmoid logit, so sigmoid saturation
cannot flatten the maps).  Maps live on a 40 x 40 grid spanning
2 mm x 2 mm centered on the BMO (50 um cells); cell index is
floor((coord_um + 1000) / 50), half-open, with the upper edge folded
into the last cell.  Points outside the extent are dropped and counted.

Grid orientation: row 0 is the superior edge (+y), column 0 the -x
edge.  Cross-sections share the lateral binning of the matching en-face
axis, with axial (z) bins as rows, anterior first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import OnhPointCloud
from .net import ModelParams, input_gradient

GRID_CELLS = 40
EXTENT_UM = 2000.0
CELL_UM = EXTENT_UM / GRID_CELLS


@dataclass
class SaliencyCloud:
    points: np.ndarray       # (N, 3) in BMO-radius units
    values: np.ndarray       # (N,) >= 0
    bmo_radius_um: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.points.shape[0],):
            raise ValueError("one saliency value per point required")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("saliency values must be finite and >= 0")


@dataclass
class EnFaceMap:
    grid: np.ndarray          # (rows, cols) nonnegative
    bmo_radius_um: float
    normalized: bool
    dropped: int = 0          # points outside the extent
    axes: tuple[str, str] = ("superior->inferior", "x")

    def __post_init__(self):
        if self.normalized and self.grid.size and self.grid.max() > 0:
            if self.grid.max() != 1.0:
                raise ValueError("normalized map must have max exactly 1")


def point_saliency(params: ModelParams, cloud: OnhPointCloud) -> SaliencyCloud:
    """Mean |logit gradient| over all input features, per point."""
    grads = input_gradient(params, cloud)
    return SaliencyCloud(cloud.points, np.abs(grads).mean(axis=1), cloud.bmo_radius_um)


def _cell_index(coord_um: np.ndarray) -> np.ndarray:
    idx = np.floor((coord_um + EXTENT_UM / 2.0) / CELL_UM).astype(np.int64)
    # Upper edge belongs to the last cell.
    idx[coord_um == EXTENT_UM / 2.0] = GRID_CELLS - 1
    return idx


def _normalize(grid: np.ndarray) -> tuple[np.ndarray, bool]:
    peak = grid.max()
    if peak > 0:
        return grid / peak, True
    return grid, True  # all-zero map: normalization skipped, flag still set


def enface_project(sal: SaliencyCloud, bmo_radius_um: float | None = None,
                   normalize: bool = True) -> EnFaceMap:
    """Sum saliency over z into the 40 x 40 BMO-centered en-face grid."""
    radius = bmo_radius_um if bmo_radius_um is not None else sal.bmo_radius_um
    x_um = sal.points[:, 0] * radius
    y_um = sal.points[:, 1] * radius
    ix = _cell_index(x_um)
    iy = _cell_index(y_um)
    inside = (ix >= 0) & (ix < GRID_CELLS) & (iy >= 0) & (iy < GRID_CELLS)

    grid = np.zeros((GRID_CELLS, GRID_CELLS))
    rows = GRID_CELLS - 1 - iy[inside]
    np.add.at(grid, (rows, ix[inside]), sal.values[inside])
    dropped = int((~inside).sum())
    if normalize:
        grid, flag = _normalize(grid)
        return EnFaceMap(grid, radius, flag, dropped)
    return EnFaceMap(grid, radius, False, dropped)


def cross_section(
    sal: SaliencyCloud,
    axis: str,
    slab_center_um: float = 0.0,
    slab_width_um: float = 100.0,
    bmo_radius_um: float | None = None,
    normalize: bool = True,
) -> EnFaceMap:
    """Sum-project the saliency inside a slab onto an in-plane 2D grid.

    ``inferior-superior`` selects a slab in x and bins y (columns ordered
    superior first, matching the en-face rows); ``nasal-temporal``
    selects a slab in y and bins x.  Rows are axial bins, anterior
    first.  An empty slab yields an all-zero map.
    """
    if slab_width_um <= 0:
        raise ValueError("slab_width_um must be > 0")
    if axis not in ("inferior-superior", "nasal-temporal"):
        raise ValueError("axis must be 'inferior-superior' or 'nasal-temporal'")
    radius = bmo_radius_um if bmo_radius_um is not None else sal.bmo_radius_um
    pts_um = sal.points * radius

    slab_axis = 0 if axis == "inferior-superior" else 1
    lateral_axis = 1 - slab_axis
    in_slab = np.abs(pts_um[:, slab_axis] - slab_center_um) <= slab_width_um / 2.0

    lat = _cell_index(pts_um[:, lateral_axis])
    azi = _cell_index(pts_um[:, 2])
    inside = in_slab & (lat >= 0) & (lat < GRID_CELLS) & (azi >= 0) & (azi < GRID_CELLS)

    grid = np.zeros((GRID_CELLS, GRID_CELLS))
    if axis == "inferior-superior":
        cols = GRID_CELLS - 1 - lat[inside]  # superior first, like en-face rows
        names = ("anterior->posterior", "superior->inferior")
    else:
        cols = lat[inside]
        names = ("anterior->posterior", "x")
    np.add.at(grid, (azi[inside], cols), sal.values[inside])
    dropped = int((~inside).sum())
    if normalize:
        grid, flag = _normalize(grid)
        return EnFaceMap(grid, radius, flag, dropped, axes=names)
    return EnFaceMap(grid, radius, False, dropped, axes=names)


def group_average(maps: list[EnFaceMap]) -> EnFaceMap:
    """Cell-wise mean of normalized per-patient maps, renormalized to max 1."""
    if not maps:
        raise ValueError("need at least one map")
    shape = maps[0].grid.shape
    for m in maps:
        if m.grid.shape != shape or m.axes != maps[0].axes:
            raise ValueError("maps must share grid shape and orientation")
        if not m.normalized:
            raise ValueError("group_average expects normalized maps")
    mean = np.mean([m.grid for m in maps], axis=0)
    grid, flag = _normalize(mean)
    radius = float(np.mean([m.bmo_radius_um for m in maps]))
    return EnFaceMap(grid, radius, flag, sum(m.dropped for m in maps), axes=maps[0].axes)


@dataclass(frozen=True)
class Sector:
    """Angular interval (degrees, counterclockwise from start to end) plus a
    radial interval in BMO-radius units."""

    start_deg: float
    end_deg: float
    r_min: float = 0.0
    r_max: float = np.inf


def _cell_centers_um() -> tuple[np.ndarray, np.ndarray]:
    cols = np.arange(GRID_CELLS)
    rows = np.arange(GRID_CELLS)
    x = -EXTENT_UM / 2.0 + CELL_UM * (cols + 0.5)
    y = EXTENT_UM / 2.0 - CELL_UM * (rows + 0.5)
    return np.meshgrid(y, x, indexing="ij")  # (rows, cols) grids of y, x


def sector_cell_mask(sector: Sector, bmo_radius_um: float) -> np.ndarray:
    yy, xx = _cell_centers_um()
    r = np.hypot(xx, yy) / bmo_radius_um
    ang = np.degrees(np.arctan2(yy, xx))
    span = (sector.end_deg - sector.start_deg) % 360.0
    if span == 0.0:
        span = 360.0  # full turn
    rel = (ang - sector.start_deg) % 360.0
    return (rel <= span) & (r >= sector.r_min) & (r <= sector.r_max)


def sector_mass(emap: EnFaceMap, sector: Sector) -> float:
    """Fraction of the map's total mass in cells whose centers fall in the sector."""
    total = emap.grid.sum()
    if total <= 0:
        raise ValueError("map has zero total mass")
    mask = sector_cell_mask(sector, emap.bmo_radius_um)
    return float(emap.grid[mask].sum() / total)


# ---------------------------------------------------------------------------
# CSV (40 rows x 40 cols, row 0 = superior edge) and 8-bit PGM export
# ---------------------------------------------------------------------------

def save_map_csv(path, emap: EnFaceMap) -> None:
    lines = [",".join(repr(v) for v in row) for row in emap.grid]
    Path(path).write_text("\n".join(lines) + "\n")


def load_map_csv(path, bmo_radius_um: float, normalized: bool = True) -> EnFaceMap:
    rows = Path(path).read_text().strip().split("\n")
    grid = np.array([[float(v) for v in r.split(",")] for r in rows])
    return EnFaceMap(grid, bmo_radius_um, normalized)


def save_map_pgm(path, emap: EnFaceMap) -> None:
    vals = np.rint(255.0 * np.clip(emap.grid, 0.0, 1.0)).astype(np.uint8)
    header = f"P5\n{vals.shape[1]} {vals.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + vals.tobytes())
