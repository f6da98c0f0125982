"""Strain-annotated ONH point clouds.

A cloud is built from labeled voxels (position = voxel center, one-hot
tissue, axial run-length thickness), gets effective strain attached by
K = 5 nearest-neighbor interpolation in the physical frame, and is then
rigidly aligned to the BMO plane and scaled by the BMO radius.  The
training-time augmentation (random crop, axial rotation, resampling to
a fixed point count) also lives here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .fields import StrainField
from .volumes import LabelVolume

KNN_K = 5


@dataclass
class OnhPointCloud:
    points: np.ndarray          # (N, 3); um before align_and_scale, BMO-radius units after
    tissue: np.ndarray          # (N, 5) one-hot for codes 1..5
    thickness_um: np.ndarray    # (N,)
    bmo_radius_um: float
    strain: np.ndarray | None = None
    label: int | None = None
    bmo_points: np.ndarray | None = None  # landmark ring, transformed alongside

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.tissue = np.asarray(self.tissue, dtype=np.float64)
        self.thickness_um = np.asarray(self.thickness_um, dtype=np.float64)
        n = self.points.shape[0]
        if n < 1 or self.points.shape != (n, 3):
            raise ValueError("points must be a nonempty (N, 3) array")
        if self.tissue.shape != (n, 5) or self.thickness_um.shape != (n,):
            raise ValueError("tissue/thickness shapes do not match the point count")
        for name, arr in (("points", self.points), ("tissue", self.tissue),
                          ("thickness", self.thickness_um)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if self.strain is not None:
            self.strain = np.asarray(self.strain, dtype=np.float64)
            if self.strain.shape != (n,) or not np.all(np.isfinite(self.strain)):
                raise ValueError("strain must be finite with one value per point")
            if np.any(self.strain < 0):
                raise ValueError("strain values must be >= 0")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def tissue_codes(self) -> np.ndarray:
        return np.argmax(self.tissue, axis=1) + 1


def _axial_run_lengths(labels: np.ndarray) -> np.ndarray:
    """Per voxel: length of the contiguous same-label run along z in its column."""
    change = np.ones(labels.shape, dtype=bool)
    change[:, :, 1:] = labels[:, :, 1:] != labels[:, :, :-1]
    # z is the fastest C-order axis, so runs never straddle columns.
    run_id = np.cumsum(change.ravel()) - 1
    run_len = np.bincount(run_id)
    return run_len[run_id].reshape(labels.shape)


def build_point_cloud(labels: LabelVolume, target_n: int, seed: int) -> OnhPointCloud:
    """Uniformly subsample ``target_n`` labeled voxels (without replacement)."""
    occupied = np.argwhere(labels.labels > 0)
    if occupied.shape[0] < target_n:
        raise ValueError(f"only {occupied.shape[0]} labeled voxels, need {target_n}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(occupied.shape[0], size=target_n, replace=False)
    ijk = occupied[pick]

    spacing = np.asarray(labels.spacing_um)
    points = (ijk + 0.5) * spacing
    codes = labels.labels[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(int)
    tissue = np.eye(5)[codes - 1]
    runs = _axial_run_lengths(labels.labels)
    thickness = runs[ijk[:, 0], ijk[:, 1], ijk[:, 2]] * spacing[2]

    # BMO radius from the landmark ring (mean distance to its centroid).
    bmo = labels.bmo_points
    radius = float(np.mean(np.linalg.norm(bmo - bmo.mean(axis=0), axis=1)))
    return OnhPointCloud(points, tissue, thickness, radius, bmo_points=bmo.copy())


def fit_bmo_plane(bmo_points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane through the landmarks: (centroid, unit normal).

    The normal is the smallest-eigenvalue direction of the point
    covariance, sign-fixed to nonnegative axial component (then y, then
    x on exact ties).
    """
    pts = np.atleast_2d(np.asarray(bmo_points, dtype=np.float64))
    if pts.shape[0] < 3:
        raise ValueError("need at least 3 BMO points to fit a plane")
    center = pts.mean(axis=0)
    x = pts - center
    w, v = np.linalg.eigh(x.T @ x)
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise ValueError("BMO points are collinear or degenerate")
    normal = v[:, 0]
    if normal[2] < 0 or (normal[2] == 0 and (normal[1] < 0 or (normal[1] == 0 and normal[0] < 0))):
        normal = -normal
    return center, normal


def _rotation_to_z(normal: np.ndarray) -> np.ndarray:
    """Minimal rotation taking ``normal`` to +z (identity if aligned)."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(normal, z)
    s2 = float(np.dot(axis, axis))
    c = float(np.dot(normal, z))
    if s2 < 1e-30:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])  # pi about x
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + k + k @ k * ((1.0 - c) / s2)


def align_and_scale(cloud: OnhPointCloud, center, normal, bmo_radius_um: float) -> OnhPointCloud:
    """Translate BMO center to the origin, rotate the BMO normal to +z,
    and divide coordinates by the BMO radius.  Features are untouched."""
    if bmo_radius_um <= 0:
        raise ValueError("bmo_radius_um must be > 0")
    normal = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
        raise ValueError("normal must be unit length")
    rot = _rotation_to_z(normal)
    pts = (cloud.points - np.asarray(center)) @ rot.T / bmo_radius_um
    bmo = None
    if cloud.bmo_points is not None:
        bmo = (cloud.bmo_points - np.asarray(center)) @ rot.T / bmo_radius_um
    return replace(cloud, points=pts, bmo_points=bmo, bmo_radius_um=float(bmo_radius_um))


def attach_strain(cloud: OnhPointCloud, strain: StrainField, k: int = KNN_K) -> OnhPointCloud:
    """Per point: unweighted mean of effective strain at its k nearest
    valid nodes (Euclidean in physical um; ties go to the lower node
    linear index).  Must run in the physical frame, before alignment."""
    valid = strain.valid.ravel()
    if valid.sum() < k:
        raise ValueError(f"need at least {k} valid strain nodes, have {int(valid.sum())}")
    nodes = strain.node_positions_um().reshape(-1, 3)[valid]
    eff = strain.eff.ravel()[valid]  # kept in grid C-order: lower row = lower linear index

    n = cloud.n_points
    out = np.empty(n)
    chunk = 2048
    for start in range(0, n, chunk):
        p = cloud.points[start : start + chunk]
        d2 = ((p[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=-1)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[start : start + chunk] = eff[order].mean(axis=1)
    return replace(cloud, strain=out)


def augment(
    cloud: OnhPointCloud,
    rng: np.random.Generator,
    crop_prob: float = 0.5,
    crop_radius: tuple[float, float] = (0.1, 0.3),
    crop_cap: float = 0.2,
    rot_deg: float = 15.0,
    n_out: int = 3000,
) -> OnhPointCloud:
    """Training-time augmentation on an aligned, scaled cloud.

    (1) With probability ``crop_prob``, delete the points inside a sphere
    of radius ~U(crop_radius) around a random point, at most
    ``crop_cap`` of the cloud; (2) rotate about the axial (z) axis by
    ~U(-rot_deg, +rot_deg); (3) resample to exactly ``n_out`` points,
    without replacement when possible.
    """
    pts = cloud.points
    tissue = cloud.tissue
    thick = cloud.thickness_um
    strain = cloud.strain
    n = pts.shape[0]

    if rng.random() < crop_prob and n > 1:
        ci = int(rng.integers(n))
        radius = float(rng.uniform(*crop_radius))
        d = np.linalg.norm(pts - pts[ci], axis=1)
        candidates = np.flatnonzero(d < radius)
        cap = min(int(crop_cap * n), n - 1)
        if candidates.size > cap:
            order = np.argsort(d[candidates], kind="stable")
            candidates = candidates[order[:cap]]
        if candidates.size:
            keep = np.ones(n, dtype=bool)
            keep[candidates] = False
            pts, tissue, thick = pts[keep], tissue[keep], thick[keep]
            strain = strain[keep] if strain is not None else None
            n = pts.shape[0]

    theta = np.radians(rng.uniform(-rot_deg, rot_deg))
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T

    idx = rng.choice(n, size=n_out, replace=n < n_out)
    return replace(
        cloud,
        points=pts[idx],
        tissue=tissue[idx],
        thickness_um=thick[idx],
        strain=strain[idx] if strain is not None else None,
        bmo_points=cloud.bmo_points,
    )


# ---------------------------------------------------------------------------
# On-disk form: x,y,z,tissue,thickness_um,strain + JSON sidecar
# ---------------------------------------------------------------------------

def save_cloud_csv(path, cloud: OnhPointCloud, source: dict | None = None) -> None:
    path = Path(path)
    codes = cloud.tissue_codes()
    strain = cloud.strain if cloud.strain is not None else np.full(cloud.n_points, np.nan)
    lines = ["x,y,z,tissue,thickness_um,strain"]
    for i in range(cloud.n_points):
        p = cloud.points[i]
        lines.append(
            f"{p[0]!r},{p[1]!r},{p[2]!r},{codes[i]},{cloud.thickness_um[i]!r},{strain[i]!r}"
        )
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "label": cloud.label,
        "bmo_radius_um": cloud.bmo_radius_um,
        "n_points": cloud.n_points,
        "source": source or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_cloud_csv(path) -> OnhPointCloud:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    rows = path.read_text().strip().split("\n")[1:]
    data = np.array([[float(v) for v in r.split(",")] for r in rows])
    codes = data[:, 3].astype(int)
    strain = data[:, 5]
    return OnhPointCloud(
        points=data[:, :3],
        tissue=np.eye(5)[codes - 1],
        thickness_um=data[:, 4],
        bmo_radius_um=float(sidecar["bmo_radius_um"]),
        strain=None if np.all(np.isnan(strain)) else strain,
        label=sidecar["label"],
    )
