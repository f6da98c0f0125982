"""Displacement and strain fields on a regular node grid.

Displacements are stored per node in voxel units; strain differentiation
converts to physical micrometers first so anisotropic spacings stay
correct.  The scalar effective strain is the von Mises equivalent of the
Green-Lagrange tensor:

    eff = sqrt( (2/3) * dev(E) : dev(E) ),   dev(E) = E - (tr E / 3) I

which is zero for pure volume change and grows for both tension and
compression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Node status codes.
NODE_OK = 1        # matched directly
NODE_FILLED = 2    # failed match, filled from valid 6-neighbors
NODE_SKIPPED = 3   # block covered < 50% labeled voxels, never matched
NODE_FAILED = 4    # match attempted, failed, no valid neighbors to fill from


@dataclass(frozen=True)
class NodeGrid:
    """Regular grid of correlation nodes in full-resolution voxel coordinates."""

    origin: tuple[int, int, int]
    stride: int
    shape: tuple[int, int, int]

    def positions_vox(self) -> np.ndarray:
        """(gx, gy, gz, 3) integer node positions in voxels."""
        ax = [self.origin[k] + self.stride * np.arange(self.shape[k]) for k in range(3)]
        grids = np.meshgrid(*ax, indexing="ij")
        return np.stack(grids, axis=-1)

    def positions_um(self, spacing_um) -> np.ndarray:
        pos = self.positions_vox().astype(np.float64)
        return (pos + 0.5) * np.asarray(spacing_um, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class DisplacementField:
    grid: NodeGrid
    spacing_um: tuple[float, float, float]
    u: np.ndarray        # (gx, gy, gz, 3) float64, voxels
    score: np.ndarray    # (gx, gy, gz) float64, peak NCC (filled nodes: neighbor mean)
    status: np.ndarray   # (gx, gy, gz) uint8, NODE_* codes

    @property
    def valid(self) -> np.ndarray:
        return (self.status == NODE_OK) | (self.status == NODE_FILLED)


@dataclass
class LocalStrain:
    """Deformation gradient, Green-Lagrange tensor, and scalar effective strain."""

    F: np.ndarray    # (3, 3)
    E: np.ndarray    # (3, 3), symmetric
    eff: float


@dataclass
class StrainField:
    grid: NodeGrid
    spacing_um: tuple[float, float, float]
    eff: np.ndarray               # (gx, gy, gz) float64
    valid: np.ndarray             # (gx, gy, gz) bool
    interior: np.ndarray          # (gx, gy, gz) bool, central-difference stencil fits
    F: np.ndarray | None = None   # (gx, gy, gz, 3, 3)
    E: np.ndarray | None = None   # (gx, gy, gz, 3, 3)

    def node_positions_um(self) -> np.ndarray:
        return self.grid.positions_um(self.spacing_um)


def effective_strain(E: np.ndarray) -> float:
    """Scalar effective strain of a symmetric 3x3 Green-Lagrange tensor."""
    E = np.asarray(E, dtype=np.float64)
    if E.shape != (3, 3):
        raise ValueError("E must be 3x3")
    if not np.allclose(E, E.T, atol=1e-12, rtol=0.0):
        raise ValueError("E must be symmetric")
    dev = E - (np.trace(E) / 3.0) * np.eye(3)
    return float(np.sqrt((2.0 / 3.0) * np.sum(dev * dev)))


def green_lagrange(F: np.ndarray) -> np.ndarray:
    """E = (F^T F - I) / 2, batched over leading axes."""
    F = np.asarray(F, dtype=np.float64)
    return 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(3))


def _effective_strain_batch(E: np.ndarray) -> np.ndarray:
    tr = np.trace(E, axis1=-2, axis2=-1)
    dev = E - tr[..., None, None] / 3.0 * np.eye(3)
    return np.sqrt((2.0 / 3.0) * np.sum(dev * dev, axis=(-2, -1)))


def strain_field(dfield: DisplacementField) -> StrainField:
    """Differentiate a displacement field into per-node strain.

    Central differences on the node grid (first-order one-sided at the
    borders, flagged via ``interior``), performed in physical um.  Nodes
    whose difference stencil touches an invalid displacement node come
    out invalid.
    """
    gx, gy, gz = dfield.grid.shape
    if min(gx, gy, gz) < 3:
        raise ValueError("strain field needs at least 3 nodes per axis")
    spacing = np.asarray(dfield.spacing_um, dtype=np.float64)
    step = dfield.grid.stride * spacing  # physical node spacing per axis

    u_um = dfield.u * spacing  # voxels -> um, per component
    u_um = np.where(dfield.valid[..., None], u_um, np.nan)

    grad = np.empty((gx, gy, gz, 3, 3), dtype=np.float64)
    for comp in range(3):
        gxs = np.gradient(u_um[..., comp], step[0], step[1], step[2], edge_order=1)
        for ax in range(3):
            grad[..., comp, ax] = gxs[ax]

    F = grad + np.eye(3)
    E = green_lagrange(F)
    eff = _effective_strain_batch(E)
    valid = np.all(np.isfinite(E), axis=(-2, -1))
    eff = np.where(valid, eff, np.nan)

    interior = np.zeros((gx, gy, gz), dtype=bool)
    interior[1:-1, 1:-1, 1:-1] = True
    return StrainField(dfield.grid, dfield.spacing_um, eff, valid, interior, F=F, E=E)


# ---------------------------------------------------------------------------
# CSV export: node_x,node_y,node_z,ux,uy,uz,ncc,valid,eff (voxel units except eff)
# ---------------------------------------------------------------------------

def save_field_csv(path, dfield: DisplacementField, sfield: StrainField | None = None) -> None:
    path = Path(path)
    pos = dfield.grid.positions_vox().reshape(-1, 3)
    u = dfield.u.reshape(-1, 3)
    score = dfield.score.ravel()
    valid = dfield.valid.ravel()
    eff = np.full(pos.shape[0], np.nan)
    if sfield is not None:
        eff = np.where(sfield.valid, sfield.eff, np.nan).ravel()
    lines = ["node_x,node_y,node_z,ux,uy,uz,ncc,valid,eff"]
    for i in range(pos.shape[0]):
        lines.append(
            f"{pos[i, 0]},{pos[i, 1]},{pos[i, 2]},"
            f"{u[i, 0]!r},{u[i, 1]!r},{u[i, 2]!r},"
            f"{score[i]!r},{int(valid[i])},{eff[i]!r}"
        )
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "origin": list(dfield.grid.origin),
        "stride": dfield.grid.stride,
        "shape": list(dfield.grid.shape),
        "spacing_um": [float(s) for s in dfield.spacing_um],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_strain_csv(path) -> StrainField:
    """Rebuild the strain part of an exported field (enough for attachment)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = NodeGrid(tuple(meta["origin"]), int(meta["stride"]), tuple(meta["shape"]))
    rows = path.read_text().strip().split("\n")[1:]
    eff = np.empty(len(rows))
    for i, row in enumerate(rows):
        eff[i] = float(row.split(",")[8])
    eff = eff.reshape(grid.shape)
    valid = np.isfinite(eff)
    interior = np.zeros(grid.shape, dtype=bool)
    interior[1:-1, 1:-1, 1:-1] = True
    return StrainField(grid, tuple(meta["spacing_um"]), eff, valid, interior)
