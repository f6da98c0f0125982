"""Synthetic ONH phantoms with a known deformation program.

A phantom is a layered retina (axial slabs of tissue codes 1-4) pierced
by a cup-shaped depression, with lamina cribrosa (code 5) below the
canal and a ring of BMO landmarks in the Bruch's membrane plane.  The
intensity volume is per-tissue base level plus band-limited speckle so
block correlation has texture to lock onto.

The imposed deformation is a sum of (1) an optional rigid translation,
(2) a global axial compression anchored at the BM plane, and (3)
Gaussian displacement bumps spaced ~30 degrees apart along the causal
sector arc at the BMO rim.  Every term has a closed-form Jacobian, so
ground-truth strain is available analytically.

En-face angle convention: angle = atan2(y, x) with +y superior and +x
temporal, so the inferior direction is -90 deg and infero-temporal is
-45 deg.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import PhantomSpecError
from .fields import NODE_OK, DisplacementField, NodeGrid
from .volumes import LabelVolume, ScalarVolume, trilinear

SPECKLE_SIGMA_VOX = 1.5
# PSF-like blur of the per-tissue base intensity; without it the sharp layer
# steps give the correlation peak a cusp and the subvoxel fit locks to
# integer offsets.
EDGE_SIGMA_VOX = 1.5
N_BMO_POINTS = 24

# Mean intensity per tissue code; tissue sits well above background so
# labeled voxels clear the background by >= one speckle std.
TISSUE_BASE = np.array([0.06, 0.85, 0.55, 0.70, 0.95, 0.65])


class DefectClass(str, enum.Enum):
    NONE = "none"
    NASAL_STEP = "nasal_step"
    ARCUATE = "arcuate"
    HEMIFIELD = "hemifield"


# (center_deg, width_deg) of the causal arc per defect class.
SECTORS = {
    DefectClass.NASAL_STEP: (-90.0, 60.0),
    DefectClass.ARCUATE: (-45.0, 120.0),
    DefectClass.HEMIFIELD: (-90.0, 180.0),
}


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing_um: tuple[float, float, float] = (10.0, 10.0, 10.0)
    bmo_radius_um: float = 250.0
    cup_depth_um: float = 150.0
    defect_class: DefectClass = DefectClass.NONE
    sector_strain_peak: float = 0.05
    baseline_strain: float = 0.004
    speckle_amplitude: float = 0.08
    translation_um: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_um = tuple(float(s) for s in self.spacing_um)
        self.defect_class = DefectClass(self.defect_class)
        self.translation_um = tuple(float(t) for t in self.translation_um)
        if any(d < 16 for d in self.dims):
            raise PhantomSpecError("all dims must be >= 16")
        if any(s <= 0 for s in self.spacing_um):
            raise PhantomSpecError("all spacings must be > 0")
        if self.bmo_radius_um <= 0:
            raise PhantomSpecError("bmo_radius_um must be > 0")
        if not (self.sector_strain_peak >= self.baseline_strain >= 0.0):
            raise PhantomSpecError("need sector_strain_peak >= baseline_strain >= 0")
        if self.speckle_amplitude < 0:
            raise PhantomSpecError("speckle_amplitude must be >= 0")


# Paper-geometry preset, kept as a documented alternative to the desk
# default: 97 B-scans of 384 A-scans, 11.5/35.1 um lateral and 3.87 um
# axial sampling.
PAPER_PRESET = dict(dims=(384, 97, 496), spacing_um=(11.5, 35.1, 3.87))


@dataclass(frozen=True)
class PhantomGeometry:
    """Layer depths derived from the spec, all in micrometers."""

    extent_um: tuple[float, float, float]
    center_xy: tuple[float, float]
    z_bm: float          # Bruch's membrane plane (bottom of RPE slab)
    z_ilm: float         # inner limiting membrane (top of retina)
    layer_tops: tuple[float, float, float, float]  # top z of codes 1..4
    z_lc_top: float
    z_lc_bot: float

    @property
    def z_mid_rim(self) -> float:
        return 0.5 * (self.z_ilm + self.z_bm)


def geometry_for(spec: PhantomSpec) -> PhantomGeometry:
    ext = tuple(d * s for d, s in zip(spec.dims, spec.spacing_um))
    lx, ly, lz = ext
    z_bm = 0.58 * lz
    thickness = 0.30 * lz
    z_ilm = z_bm - thickness
    t = np.array([0.30, 0.20, 0.30, 0.20]) * thickness
    tops = (z_ilm, z_ilm + t[0], z_ilm + t[0] + t[1], z_ilm + t[0] + t[1] + t[2])
    geo = PhantomGeometry(
        extent_um=ext,
        center_xy=(0.5 * lx, 0.5 * ly),
        z_bm=z_bm,
        z_ilm=z_ilm,
        layer_tops=tops,
        z_lc_top=z_bm + 0.04 * lz,
        z_lc_bot=z_bm + 0.16 * lz,
    )
    margin = 2.0 * max(spec.spacing_um)
    if z_ilm + spec.cup_depth_um + margin > geo.z_lc_top:
        raise PhantomSpecError("dims too small: cup does not fit above the lamina")
    if geo.z_lc_bot + margin > lz:
        raise PhantomSpecError("dims too small: lamina does not fit above the floor")
    if spec.bmo_radius_um + margin > min(geo.center_xy):
        raise PhantomSpecError("dims too small: BMO ring does not fit laterally")
    return geo


def generate_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Build the baseline intensity volume and its tissue labels."""
    geo = geometry_for(spec)
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_um
    cx, cy = geo.center_xy
    R = spec.bmo_radius_um

    x = (np.arange(nx) + 0.5) * sx
    y = (np.arange(ny) + 0.5) * sy
    z = (np.arange(nz) + 0.5) * sz
    r = np.hypot(x[:, None] - cx, y[None, :] - cy)  # (nx, ny)
    zc = z[None, None, :]

    labels = np.zeros(spec.dims, dtype=np.uint8)
    inside = (r < R)[:, :, None]

    tops = geo.layer_tops
    bounds = (*tops, geo.z_bm)
    for code in (1, 2, 3, 4):
        slab = (zc >= bounds[code - 1]) & (zc < bounds[code])
        labels[np.broadcast_to(~inside & slab, spec.dims)] = code

    # Canal interior: prelamina (1) below the cup surface, LC (5) below that.
    taper = np.cos(0.5 * np.pi * np.clip(r / R, 0.0, 1.0)) ** 2
    z_cup = (geo.z_ilm + spec.cup_depth_um * taper)[:, :, None]
    prelamina = inside & (zc >= z_cup) & (zc < geo.z_lc_top)
    lamina = inside & (zc >= geo.z_lc_top) & (zc < geo.z_lc_bot)
    labels[np.broadcast_to(prelamina, spec.dims)] = 1
    labels[np.broadcast_to(lamina, spec.dims)] = 5

    rng = np.random.default_rng(spec.seed)
    intensity = gaussian_filter(TISSUE_BASE[labels], EDGE_SIGMA_VOX)
    if spec.speckle_amplitude > 0:
        speckle = gaussian_filter(rng.standard_normal(spec.dims), SPECKLE_SIGMA_VOX)
        speckle /= speckle.std()
        intensity = intensity + spec.speckle_amplitude * speckle

    angles = 2.0 * np.pi * np.arange(N_BMO_POINTS) / N_BMO_POINTS
    bmo = np.stack(
        [cx + R * np.cos(angles), cy + R * np.sin(angles), np.full(N_BMO_POINTS, geo.z_bm)],
        axis=1,
    )

    scalar = ScalarVolume(spec.dims, spec.spacing_um, intensity.astype(np.float32))
    return scalar, LabelVolume(spec.dims, spec.spacing_um, labels, bmo)


# ---------------------------------------------------------------------------
# Displacement program
# ---------------------------------------------------------------------------

BUMP_SPACING_DEG = 30.0
# Single-bump peak effective strain is ~(2/3) * A * exp(-1/2) / sigma, so this
# amplitude factor makes the peak track sector_strain_peak to first order.
_AMP_FACTOR = 1.5 * math.sqrt(math.e)


@dataclass
class DisplacementProgram:
    """Analytic displacement field u(p) in um with closed-form Jacobian."""

    translation_um: np.ndarray          # (3,)
    axial_rate: float                   # d u_z / d z, anchored at z_anchor
    z_anchor: float
    bump_centers: np.ndarray            # (m, 3) um
    bump_dirs: np.ndarray               # (m, 3) unit vectors
    bump_amp_um: float
    bump_sigma_um: float

    def u_um(self, points_um: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points_um, dtype=np.float64))
        u = np.tile(self.translation_um, (p.shape[0], 1))
        u[:, 2] += self.axial_rate * (p[:, 2] - self.z_anchor)
        if self.bump_centers.size:
            s2 = 2.0 * self.bump_sigma_um**2
            for c, d in zip(self.bump_centers, self.bump_dirs):
                g = np.exp(-np.sum((p - c) ** 2, axis=1) / s2)
                u += self.bump_amp_um * g[:, None] * d
        return u

    def grad_u(self, points_um: np.ndarray) -> np.ndarray:
        """(N, 3, 3) Jacobian d u_i / d x_j, exact."""
        p = np.atleast_2d(np.asarray(points_um, dtype=np.float64))
        grad = np.zeros((p.shape[0], 3, 3))
        grad[:, 2, 2] = self.axial_rate
        if self.bump_centers.size:
            sig2 = self.bump_sigma_um**2
            for c, d in zip(self.bump_centers, self.bump_dirs):
                dp = p - c
                g = np.exp(-np.sum(dp**2, axis=1) / (2.0 * sig2))
                grad += (-self.bump_amp_um / sig2) * g[:, None, None] * (
                    d[None, :, None] * dp[:, None, :]
                )
        return grad

    def effective_strain(self, points_um: np.ndarray) -> np.ndarray:
        """Ground-truth scalar effective strain from the exact Jacobian."""
        grad = self.grad_u(points_um)
        F = grad + np.eye(3)
        E = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(3))
        tr = np.trace(E, axis1=-2, axis2=-1)
        dev = E - tr[..., None, None] / 3.0 * np.eye(3)
        return np.sqrt((2.0 / 3.0) * np.sum(dev * dev, axis=(-2, -1)))

    def max_displacement_um(self) -> float:
        """Upper bound on |u| anywhere (bump overlap included conservatively)."""
        n_bumps = len(self.bump_centers)
        reach = abs(self.axial_rate) * self.z_anchor + float(
            np.max(np.abs(self.translation_um), initial=0.0)
        )
        return reach + n_bumps * self.bump_amp_um


def displacement_program(spec: PhantomSpec) -> DisplacementProgram:
    geo = geometry_for(spec)
    cx, cy = geo.center_xy
    # Uniaxial strain e gives eff = (2/3)|e|; scale so diffuse eff matches.
    axial_rate = -1.5 * spec.baseline_strain

    centers = np.zeros((0, 3))
    dirs = np.zeros((0, 3))
    amp = 0.0
    sigma = 0.5 * spec.bmo_radius_um
    if spec.defect_class is not DefectClass.NONE and spec.sector_strain_peak > 0:
        center_deg, width_deg = SECTORS[spec.defect_class]
        n = max(1, int(round(width_deg / BUMP_SPACING_DEG)))
        offsets = (np.arange(n) - (n - 1) / 2.0) * BUMP_SPACING_DEG
        phi = np.radians(center_deg + offsets)
        dirs = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
        centers = np.stack(
            [
                cx + spec.bmo_radius_um * np.cos(phi),
                cy + spec.bmo_radius_um * np.sin(phi),
                np.full(n, geo.z_mid_rim),
            ],
            axis=1,
        )
        amp = _AMP_FACTOR * spec.sector_strain_peak * sigma

    return DisplacementProgram(
        translation_um=np.asarray(spec.translation_um, dtype=np.float64),
        axial_rate=axial_rate,
        z_anchor=geo.z_bm,
        bump_centers=centers,
        bump_dirs=dirs,
        bump_amp_um=amp,
        bump_sigma_um=sigma,
    )


def in_sector(points_um: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Boolean mask: which points fall inside the causal angular sector."""
    if spec.defect_class is DefectClass.NONE:
        return np.zeros(len(np.atleast_2d(points_um)), dtype=bool)
    geo = geometry_for(spec)
    center_deg, width_deg = SECTORS[spec.defect_class]
    p = np.atleast_2d(points_um)
    ang = np.degrees(np.arctan2(p[:, 1] - geo.center_xy[1], p[:, 0] - geo.center_xy[0]))
    delta = (ang - center_deg + 180.0) % 360.0 - 180.0
    return np.abs(delta) <= width_deg / 2.0


def _default_grid(dims) -> NodeGrid:
    # Matches the dvc defaults (block 15, search 6, stride 8).
    from .dvc import DvcParams, node_grid_for

    return node_grid_for(dims, DvcParams())


def deform_phantom(
    baseline: ScalarVolume, spec: PhantomSpec, grid: NodeGrid | None = None
) -> tuple[ScalarVolume, DisplacementField]:
    """Resample the baseline through the displacement program.

    The deformed volume is the backward warp D(p) = B(p - u(p)).  The
    returned field holds, at each node x, the exact correspondence
    displacement (the p solving p - u(p) = x, minus x) in voxels: that
    is what volume correlation between the pair must recover.  For a
    pure translation it equals the program displacement itself.
    """
    if grid is None:
        grid = _default_grid(spec.dims)
    program = displacement_program(spec)
    spacing = np.asarray(spec.spacing_um, dtype=np.float64)

    if (
        program.bump_amp_um == 0.0
        and program.axial_rate == 0.0
        and not np.any(program.translation_um)
    ):
        deformed_data = baseline.data.copy()
    else:
        idx = np.stack(
            np.meshgrid(*(np.arange(d, dtype=np.float64) for d in spec.dims), indexing="ij"),
            axis=-1,
        )
        pos_um = (idx + 0.5) * spacing
        u_vox = program.u_um(pos_um.reshape(-1, 3)) / spacing
        sample_idx = idx.reshape(-1, 3) - u_vox
        deformed_data = trilinear(baseline.data, sample_idx).reshape(spec.dims)
        deformed_data = deformed_data.astype(np.float32)

    nodes_um = grid.positions_um(spec.spacing_um).reshape(-1, 3)
    p = nodes_um.copy()
    for _ in range(60):  # fixed-point inversion of p - u(p) = x
        p_next = nodes_um + program.u_um(p)
        if np.max(np.abs(p_next - p)) < 1e-12:
            p = p_next
            break
        p = p_next
    truth_vox = ((p - nodes_um) / spacing).reshape(*grid.shape, 3)

    dfield = DisplacementField(
        grid=grid,
        spacing_um=spec.spacing_um,
        u=truth_vox,
        score=np.ones(grid.shape),
        status=np.full(grid.shape, NODE_OK, dtype=np.uint8),
    )
    deformed = ScalarVolume(spec.dims, spec.spacing_um, deformed_data)
    return deformed, dfield
