"""Coarse-to-fine block-matching digital volume correlation.

``match_block`` is the per-node reference: exhaustive integer NCC search
in a cube around the init, then an independent per-axis 3-point
quadratic fit for the subvoxel part.  ``displacement_field`` runs the
same search over all nodes at once using integral-volume box sums (one
pass per absolute shift), level by level on a factor-2 mean pyramid.
Both paths agree node-for-node; tests pin that down.

No FFTs and no global regularization: every node is an independent
correlation problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorrelationError
from .fields import NODE_FAILED, NODE_FILLED, NODE_OK, NODE_SKIPPED, DisplacementField, NodeGrid
from .volumes import LabelVolume, ScalarVolume

_VAR_REL_TOL = 1e-24     # relative threshold declaring a block constant
_PERFECT_PEAK = 1.0 - 1e-9  # peak this close to 1 is an exact match; skip refinement
_MIN_COVERAGE = 0.5      # labeled fraction a block needs to be matched


@dataclass
class DvcParams:
    block_size: int = 15
    node_stride: int = 8
    search_radius: int = 6
    pyramid_levels: int = 2
    min_ncc: float = 0.3

    def __post_init__(self):
        if self.block_size < 5 or self.block_size % 2 == 0:
            raise ValueError("block_size must be odd and >= 5")
        if self.node_stride < 1:
            raise ValueError("node_stride must be >= 1")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not -1.0 <= self.min_ncc <= 1.0:
            raise ValueError("min_ncc must lie in [-1, 1]")


def node_grid_for(dims, params: DvcParams) -> NodeGrid:
    """Nodes at multiples of the stride whose block + search cube fit."""
    margin = params.block_size // 2 + params.search_radius
    origin = []
    shape = []
    for d in dims:
        k0 = -(-margin // params.node_stride)  # ceil
        k1 = (d - 1 - margin) // params.node_stride
        if k1 < k0:
            raise ValueError(f"volume of size {d} leaves no room for any node")
        origin.append(k0 * params.node_stride)
        shape.append(k1 - k0 + 1)
    return NodeGrid(tuple(origin), params.node_stride, tuple(shape))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equal-shape blocks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"block shapes differ: {a.shape} vs {b.shape}")
    a0 = (a - a.mean()).ravel()
    b0 = (b - b.mean()).ravel()
    na2 = float(np.dot(a0, a0))
    nb2 = float(np.dot(b0, b0))
    if na2 <= _VAR_REL_TOL * max(1.0, float(np.dot(a.ravel(), a.ravel()))):
        raise CorrelationError("first block has zero intensity variance")
    if nb2 <= _VAR_REL_TOL * max(1.0, float(np.dot(b.ravel(), b.ravel()))):
        raise CorrelationError("second block has zero intensity variance")
    score = float(np.dot(a0, b0)) / (np.sqrt(na2) * np.sqrt(nb2))
    return min(1.0, max(-1.0, score))


def _subvoxel(scores: np.ndarray, peak_idx: tuple[int, ...]) -> np.ndarray:
    """Per-axis parabola vertex through the samples straddling the peak.

    Returns offsets in [-0.5, 0.5]; an axis contributes 0 when the peak
    sits on the search boundary, a neighbor is missing, or the fit is
    not concave.  A peak at (numerically) perfect correlation is already
    exact, so refinement is skipped entirely.
    """
    frac = np.zeros(3)
    s0 = scores[peak_idx]
    if s0 >= _PERFECT_PEAK:
        return frac
    for ax in range(3):
        if peak_idx[ax] == 0 or peak_idx[ax] == scores.shape[ax] - 1:
            continue
        idx_m = list(peak_idx)
        idx_p = list(peak_idx)
        idx_m[ax] -= 1
        idx_p[ax] += 1
        sm = scores[tuple(idx_m)]
        sp = scores[tuple(idx_p)]
        if not (np.isfinite(sm) and np.isfinite(sp)):
            continue
        denom = sm + sp - 2.0 * s0
        if denom >= 0.0:  # not a concave fit
            continue
        frac[ax] = min(0.5, max(-0.5, (sm - sp) / (2.0 * denom)))
    return frac


def match_block(
    fixed: ScalarVolume | np.ndarray,
    moving: ScalarVolume | np.ndarray,
    node,
    params: DvcParams,
    init=(0, 0, 0),
) -> tuple[np.ndarray | None, float]:
    """Match one block; returns (displacement in voxels, peak NCC).

    Exhaustive integer search over init + [-R, R]^3 (offsets whose
    window leaves the volume are excluded), then subvoxel refinement.
    Returns (None, score) when the block is constant, every offset is
    infeasible, or the peak falls below ``min_ncc``.
    """
    fdat = (fixed.data if isinstance(fixed, ScalarVolume) else fixed).astype(np.float64)
    mdat = (moving.data if isinstance(moving, ScalarVolume) else moving).astype(np.float64)
    node = np.asarray(node, dtype=np.int64)
    init = np.asarray(init, dtype=np.int64)
    b = params.block_size
    h = b // 2
    shape = np.array(fdat.shape)
    if np.any(node - h < 0) or np.any(node + h >= shape):
        raise ValueError(f"block at node {tuple(node)} does not fit in the fixed volume")
    if np.any(node + init - h < 0) or np.any(node + init + h >= np.array(mdat.shape)):
        raise ValueError(f"block at node+init {tuple(node + init)} does not fit in the moving volume")

    f = fdat[
        node[0] - h : node[0] + h + 1,
        node[1] - h : node[1] + h + 1,
        node[2] - h : node[2] + h + 1,
    ]
    f0 = (f - f.mean()).ravel()
    ssf = float(np.dot(f0, f0))
    if ssf <= _VAR_REL_TOL * max(1.0, float(np.sum(f * f))):
        return None, float("nan")

    R = params.search_radius
    k = 2 * R + 1
    rng = np.arange(-R, R + 1)
    offsets = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = node + init + offsets
    feasible = np.all(centers - h >= 0, axis=1) & np.all(centers + h < np.array(mdat.shape), axis=1)

    scores = np.full(offsets.shape[0], -np.inf)
    n = float(b**3)
    for i in np.nonzero(feasible)[0]:
        c = centers[i]
        w = mdat[c[0] - h : c[0] + h + 1, c[1] - h : c[1] + h + 1, c[2] - h : c[2] + h + 1].ravel()
        s1 = w.sum()
        var = float(np.dot(w, w)) - s1 * s1 / n
        if var <= _VAR_REL_TOL * max(1.0, float(np.dot(w, w))):
            continue
        scores[i] = np.dot(f0, w) / np.sqrt(ssf * var)

    best = int(np.argmax(scores))
    peak = scores[best]
    if not np.isfinite(peak):
        return None, float("nan")
    cube = scores.reshape(k, k, k)
    peak_idx = np.unravel_index(best, (k, k, k))
    if peak < params.min_ncc:
        return None, float(peak)
    frac = _subvoxel(cube, peak_idx)
    u = init + offsets[best] + frac
    return u.astype(np.float64), float(min(1.0, peak))


# ---------------------------------------------------------------------------
# Full-field matcher
# ---------------------------------------------------------------------------

def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(s + 1 for s in a.shape), dtype=np.float64)
    out[1:, 1:, 1:] = a
    np.cumsum(out, axis=0, out=out)
    np.cumsum(out, axis=1, out=out)
    np.cumsum(out, axis=2, out=out)
    return out


def _box_sum(itg: np.ndarray, corner: np.ndarray, b: int) -> np.ndarray:
    x0, y0, z0 = corner[:, 0], corner[:, 1], corner[:, 2]
    x1, y1, z1 = x0 + b, y0 + b, z0 + b
    return (
        itg[x1, y1, z1]
        - itg[x0, y1, z1]
        - itg[x1, y0, z1]
        - itg[x1, y1, z0]
        + itg[x0, y0, z1]
        + itg[x0, y1, z0]
        + itg[x1, y0, z0]
        - itg[x0, y0, z0]
    )


def _mean_pool(a: np.ndarray) -> np.ndarray:
    s = tuple((d // 2) * 2 for d in a.shape)
    return (
        a[: s[0], : s[1], : s[2]]
        .reshape(s[0] // 2, 2, s[1] // 2, 2, s[2] // 2, 2)
        .mean(axis=(1, 3, 5))
    )


def _match_level(fixed, moving, positions, inits, attempt, params):
    """Match every attempted node at one pyramid level.

    Returns (u (n,3) float, peak (n,), ok (n,) bool).  Scores for all
    relative offsets are assembled shift-by-shift: for one absolute
    shift D the correlation numerator at every node is the box sum of
    fixed * shifted(moving), read off an integral volume.
    """
    b = params.block_size
    h = b // 2
    R = params.search_radius
    k = 2 * R + 1
    nb = float(b**3)
    shape = np.array(fixed.shape)
    n_nodes = positions.shape[0]

    fits = np.all(positions - h >= 0, axis=1) & np.all(positions + h < shape, axis=1)
    attempt = attempt & fits
    u = np.zeros((n_nodes, 3))
    peak = np.full(n_nodes, np.nan)
    ok = np.zeros(n_nodes, dtype=bool)
    if not np.any(attempt):
        return u, peak, ok

    im1 = _integral(moving)
    im2 = _integral(moving * moving)

    # Fixed-block stats, computed directly (no cancellation) via gathered blocks.
    sel = np.nonzero(attempt)[0]
    offs = np.arange(b) - h
    blocks = fixed[
        positions[sel, 0][:, None, None, None] + offs[:, None, None],
        positions[sel, 1][:, None, None, None] + offs[None, :, None],
        positions[sel, 2][:, None, None, None] + offs[None, None, :],
    ].reshape(len(sel), -1)
    fsum = blocks.sum(axis=1)
    f0 = blocks - (fsum / nb)[:, None]
    ssf = np.einsum("ij,ij->i", f0, f0)
    const = ssf <= _VAR_REL_TOL * np.maximum(1.0, np.einsum("ij,ij->i", blocks, blocks))
    attempt[sel[const]] = False
    fsum_all = np.zeros(n_nodes)
    ssf_all = np.zeros(n_nodes)
    fsum_all[sel] = fsum
    ssf_all[sel] = ssf

    scores = np.full((n_nodes, k, k, k), -np.inf)
    rng = np.arange(-R, R + 1)
    rel = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    shifts = np.unique((inits[attempt][:, None, :] + rel[None, :, :]).reshape(-1, 3), axis=0)

    # Fixed-side voxels ever touched by an attempted block; the per-shift
    # product volume only needs this bounding box.
    bb_lo = positions[attempt].min(axis=0) - h
    bb_hi = positions[attempt].max(axis=0) + h + 1

    for D in shifts:
        rel_idx = D - inits + R  # (n, 3) index into each node's score cube
        needs = attempt & np.all((rel_idx >= 0) & (rel_idx < k), axis=1)
        wstart = positions + D - h
        needs &= np.all(wstart >= 0, axis=1) & np.all(wstart + b <= shape, axis=1)
        if not np.any(needs):
            continue
        idx = np.nonzero(needs)[0]

        lo = np.maximum(np.maximum(0, -D), bb_lo)
        hi = np.minimum(shape - np.maximum(0, D), bb_hi)
        prod = (
            fixed[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
            * moving[lo[0] + D[0] : hi[0] + D[0], lo[1] + D[1] : hi[1] + D[1], lo[2] + D[2] : hi[2] + D[2]]
        )
        ip = _integral(prod)

        raw = _box_sum(ip, positions[idx] - h - lo, b)
        msum = _box_sum(im1, wstart[idx], b)
        ms2 = _box_sum(im2, wstart[idx], b)
        mvar = ms2 - msum * msum / nb
        num = raw - fsum_all[idx] * msum / nb
        with np.errstate(invalid="ignore", divide="ignore"):
            sc = num / np.sqrt(ssf_all[idx] * mvar)
        sc[mvar <= _VAR_REL_TOL * np.maximum(1.0, ms2)] = -np.inf
        scores[idx, rel_idx[idx, 0], rel_idx[idx, 1], rel_idx[idx, 2]] = sc

    flat = scores.reshape(n_nodes, -1)
    best = np.argmax(flat, axis=1)
    for i in np.nonzero(attempt)[0]:
        p = flat[i, best[i]]
        if not np.isfinite(p) or p < params.min_ncc:
            peak[i] = p if np.isfinite(p) else np.nan
            continue
        cube = scores[i]
        pidx = np.unravel_index(best[i], (k, k, k))
        frac = _subvoxel(cube, pidx)
        u[i] = inits[i] + (np.array(pidx) - R) + frac
        peak[i] = min(1.0, p)
        ok[i] = True
    return u, peak, ok


def displacement_field(
    fixed: ScalarVolume, moving: ScalarVolume, params: DvcParams, mask: LabelVolume
) -> DisplacementField:
    """Recover the node displacement field between two volumes.

    Coarse-to-fine over a factor-2 mean pyramid; integer displacements
    found at a coarse level are doubled and used as the search center on
    the next.  Nodes whose full-resolution block holds < 50% labeled
    voxels are skipped.  Nodes that fail matching are filled once from
    the average of their valid 6-neighbors, otherwise flagged.
    """
    if fixed.dims != moving.dims or fixed.dims != mask.dims:
        raise ValueError("fixed, moving and mask volumes must share dims")
    if fixed.spacing_um != moving.spacing_um:
        raise ValueError("fixed and moving volumes must share spacing")

    grid = node_grid_for(fixed.dims, params)
    positions = grid.positions_vox().reshape(-1, 3)
    n_nodes = positions.shape[0]

    labeled = (mask.labels > 0).astype(np.float64)
    il = _integral(labeled)
    h = params.block_size // 2
    coverage = _box_sum(il, positions - h, params.block_size) / float(params.block_size**3)
    eligible = coverage >= _MIN_COVERAGE
    if not np.any(eligible):
        raise ValueError("no node has enough labeled coverage to match")

    pyr_f = [fixed.data.astype(np.float64)]
    pyr_m = [moving.data.astype(np.float64)]
    for _ in range(params.pyramid_levels - 1):
        pyr_f.append(_mean_pool(pyr_f[-1]))
        pyr_m.append(_mean_pool(pyr_m[-1]))

    inits = np.zeros((n_nodes, 3), dtype=np.int64)
    u = np.zeros((n_nodes, 3))
    peak = np.full(n_nodes, np.nan)
    ok = np.zeros(n_nodes, dtype=bool)
    for level in range(params.pyramid_levels - 1, -1, -1):
        pos_l = positions // (2**level)
        u, peak, ok = _match_level(pyr_f[level], pyr_m[level], pos_l, inits, eligible.copy(), params)
        if level > 0:
            doubled = 2 * inits
            doubled[ok] = np.rint(2.0 * u[ok]).astype(np.int64)
            inits = doubled

    status = np.full(n_nodes, NODE_FAILED, dtype=np.uint8)
    status[~eligible] = NODE_SKIPPED
    status[ok] = NODE_OK
    u[~ok] = 0.0

    # One fill pass: failed nodes take the mean of OK 6-neighbors.
    gs = grid.shape
    status3 = status.reshape(gs)
    u3 = u.reshape(*gs, 3)
    peak3 = peak.reshape(gs)
    failed = np.argwhere(status3 == NODE_FAILED)
    fill_u = {}
    for ijk in failed:
        acc_u = np.zeros(3)
        acc_s = 0.0
        cnt = 0
        for ax in range(3):
            for step in (-1, 1):
                nb_idx = ijk.copy()
                nb_idx[ax] += step
                if nb_idx[ax] < 0 or nb_idx[ax] >= gs[ax]:
                    continue
                t = tuple(nb_idx)
                if status3[t] == NODE_OK:
                    acc_u += u3[t]
                    acc_s += peak3[t]
                    cnt += 1
        if cnt:
            fill_u[tuple(ijk)] = (acc_u / cnt, acc_s / cnt)
    for t, (uu, ss) in fill_u.items():
        u3[t] = uu
        peak3[t] = ss
        status3[t] = NODE_FILLED

    return DisplacementField(grid, fixed.spacing_um, u3, peak3, status3)
