"""Voxel volumes and their on-disk form.

Axis convention used everywhere in this package:
    x = lateral (temporal positive), y = vertical (superior positive),
    z = axial depth (posterior positive).
Arrays are indexed [ix, iy, iz].  Voxel i spans [i*s, (i+1)*s) micrometers
along its axis, so its center sits at (i + 0.5) * s.

File format: a JSON header ``<name>.json`` with
``{dims, spacing_um, dtype, order}`` next to a raw blob ``<name>.raw``
holding the samples in x-fastest / z-slowest order.  Intensities are
little-endian float32 (``f32le``), labels are unsigned bytes (``u8``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class ScalarVolume:
    dims: tuple[int, int, int]
    spacing_um: tuple[float, float, float]
    data: np.ndarray  # float32, shape == dims

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_um = tuple(float(s) for s in self.spacing_um)
        if self.data.shape != self.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.dims}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")

    @property
    def extent_um(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing_um))


@dataclass
class LabelVolume:
    """Tissue codes 0..5 plus the BMO landmark ring (positions in um)."""

    dims: tuple[int, int, int]
    spacing_um: tuple[float, float, float]
    labels: np.ndarray  # uint8, shape == dims
    bmo_points: np.ndarray  # (M, 3) float64 um

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_um = tuple(float(s) for s in self.spacing_um)
        if self.labels.shape != self.dims:
            raise ValueError(f"labels shape {self.labels.shape} != dims {self.dims}")
        if self.labels.max(initial=0) > 5:
            raise ValueError("label codes must lie in 0..5")
        self.bmo_points = np.atleast_2d(np.asarray(self.bmo_points, dtype=np.float64))
        if self.bmo_points.shape[0] < 1 or self.bmo_points.shape[1] != 3:
            raise ValueError("bmo_points must be a nonempty (M, 3) array")
        extent = np.array([d * s for d, s in zip(self.dims, self.spacing_um)])
        if np.any(self.bmo_points < 0) or np.any(self.bmo_points > extent):
            raise ValueError("bmo_points must lie inside the volume bounds")


def voxel_centers_um(dims, spacing_um):
    """1D center coordinate arrays (x, y, z) in um."""
    return tuple(
        (np.arange(d, dtype=np.float64) + 0.5) * s for d, s in zip(dims, spacing_um)
    )


def trilinear(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sample ``data`` at fractional voxel indices ``idx`` (..., 3).

    Out-of-range indices are clamped to the edge voxels.  Exact integer
    indices reproduce the stored value bit-for-bit (weights collapse to
    1 and 0), which the identity-deformation contract relies on.
    """
    idx = np.asarray(idx, dtype=np.float64)
    out_shape = idx.shape[:-1]
    flat = idx.reshape(-1, 3)
    shape = np.array(data.shape)
    lo = np.floor(flat).astype(np.int64)
    frac = flat - lo
    lo = np.clip(lo, 0, shape - 1)
    hi = np.clip(lo + 1, 0, shape - 1)
    # Clamp the fraction too so samples outside the grid stick to the edge.
    frac = np.clip(frac, 0.0, 1.0)

    d = data.astype(np.float64, copy=False)
    c = np.zeros(flat.shape[0], dtype=np.float64)
    for bx, wx in ((lo[:, 0], 1.0 - frac[:, 0]), (hi[:, 0], frac[:, 0])):
        for by, wy in ((lo[:, 1], 1.0 - frac[:, 1]), (hi[:, 1], frac[:, 1])):
            for bz, wz in ((lo[:, 2], 1.0 - frac[:, 2]), (hi[:, 2], frac[:, 2])):
                w = wx * wy * wz
                c += w * d[bx, by, bz]
    return c.reshape(out_shape)


def _write_raw(stem: Path, arr: np.ndarray, dtype_tag: str, spacing_um) -> None:
    header = {
        "dims": list(arr.shape),
        "spacing_um": [float(s) for s in spacing_um],
        "dtype": dtype_tag,
        "order": "x-fastest",
    }
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    blob = np.ascontiguousarray(arr.astype(_DTYPES[dtype_tag]).ravel(order="F"))
    stem.with_suffix(".raw").write_bytes(blob.tobytes())


def _read_raw(stem: Path):
    header = json.loads(stem.with_suffix(".json").read_text())
    dims = tuple(header["dims"])
    dt = _DTYPES[header["dtype"]]
    flat = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype=dt)
    if flat.size != int(np.prod(dims)):
        raise ValueError(f"{stem}.raw holds {flat.size} samples, expected {np.prod(dims)}")
    arr = flat.reshape(dims, order="F")
    return arr, tuple(header["spacing_um"]), header["dtype"]


def save_scalar_volume(stem, vol: ScalarVolume) -> None:
    _write_raw(Path(stem), vol.data, "f32le", vol.spacing_um)


def load_scalar_volume(stem) -> ScalarVolume:
    arr, spacing, tag = _read_raw(Path(stem))
    if tag != "f32le":
        raise ValueError(f"{stem}: expected f32le volume, found {tag}")
    return ScalarVolume(arr.shape, spacing, np.array(arr, dtype=np.float32))


def save_label_volume(stem, vol: LabelVolume) -> None:
    stem = Path(stem)
    _write_raw(stem, vol.labels, "u8", vol.spacing_um)
    save_points_csv(stem.parent / (stem.name + "_bmo.csv"), vol.bmo_points)


def load_label_volume(stem) -> LabelVolume:
    stem = Path(stem)
    arr, spacing, tag = _read_raw(stem)
    if tag != "u8":
        raise ValueError(f"{stem}: expected u8 labels, found {tag}")
    bmo = load_points_csv(stem.parent / (stem.name + "_bmo.csv"))
    return LabelVolume(arr.shape, spacing, np.array(arr, dtype=np.uint8), bmo)


def save_points_csv(path, points: np.ndarray, displacements: np.ndarray | None = None) -> None:
    """``x_um,y_um,z_um[,ux,uy,uz]`` rows; displacements are in um as well."""
    points = np.atleast_2d(points)
    lines = []
    if displacements is None:
        lines.append("x_um,y_um,z_um")
        for p in points:
            lines.append(f"{p[0]!r},{p[1]!r},{p[2]!r}")
    else:
        lines.append("x_um,y_um,z_um,ux,uy,uz")
        for p, u in zip(points, np.atleast_2d(displacements)):
            lines.append(f"{p[0]!r},{p[1]!r},{p[2]!r},{u[0]!r},{u[1]!r},{u[2]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_points_csv(path):
    """Returns (M, 3) points, or (points, displacements) if u columns exist."""
    rows = Path(path).read_text().strip().split("\n")
    header = rows[0].split(",")
    body = np.array([[float(v) for v in r.split(",")] for r in rows[1:]], dtype=np.float64)
    if len(header) == 3:
        return body
    return body[:, :3], body[:, 3:6]
