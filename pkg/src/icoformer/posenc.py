"""Vertical sinusoidal encoding and neighbor-relative angle tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sphere import NeighborTable, NodeType, SphereGraph, neighbor_table, node_coords

GRID_SIZE = 7
_POLE_EPS = 1e-12


@dataclass(frozen=True)
class SinusoidSpec:
    num_freqs: int = 16
    max_freq: float = 10.0

    def __post_init__(self):
        if self.num_freqs < 2:
            raise ValueError("num_freqs must be >= 2 (frequency ladder divides by D-1)")

    @property
    def dim(self) -> int:
        return 2 * self.num_freqs

    @property
    def frequencies(self) -> np.ndarray:
        i = np.arange(self.num_freqs)
        return self.max_freq ** (i / (self.num_freqs - 1))


def sinusoid_phi(phi, spec: SinusoidSpec = SinusoidSpec()) -> np.ndarray:
    """[sin(f_i * phi_hat), cos(f_i * phi_hat)] with phi_hat = 2 phi - pi.

    Accepts a scalar or an array of polar angles; output has a trailing axis
    of length ``2 * num_freqs``.
    """
    phi_hat = 2.0 * np.asarray(phi, dtype=np.float64) - np.pi
    arg = phi_hat[..., None] * spec.frequencies
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _to_cartesian(theta, phi):
    # frame in which theta = pi looks along +x; the shifts cancel inside R_i
    s = np.sin(phi)
    return np.stack([s * np.cos(theta - np.pi), s * np.sin(theta - np.pi), np.cos(phi)], axis=-1)


def rotation_matrices(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Per-node R = R_phi @ R_theta taking the node to (theta, phi) = (pi, pi/2)."""
    t = -(np.asarray(theta) - np.pi)
    p = -(np.asarray(phi) - np.pi / 2)
    n = t.shape[0]
    r_theta = np.zeros((n, 3, 3))
    r_theta[:, 0, 0] = np.cos(t)
    r_theta[:, 0, 1] = -np.sin(t)
    r_theta[:, 1, 0] = np.sin(t)
    r_theta[:, 1, 1] = np.cos(t)
    r_theta[:, 2, 2] = 1.0
    r_phi = np.zeros((n, 3, 3))
    r_phi[:, 0, 0] = np.cos(p)
    r_phi[:, 0, 2] = np.sin(p)
    r_phi[:, 1, 1] = 1.0
    r_phi[:, 2, 0] = -np.sin(p)
    r_phi[:, 2, 2] = np.cos(p)
    return r_phi @ r_theta


@dataclass(frozen=True, eq=False)
class RelPosTable:
    """Angular offsets for every (node, neighbor) slot of a padded table.

    ``raw``/``normalized`` have shape (N, W, 2) holding (dtheta, dphi); pad
    slots are zero. ``scale`` holds the per-coordinate max |offset| used for
    normalization.
    """

    neighbors: NeighborTable
    raw: np.ndarray
    normalized: np.ndarray
    scale: tuple[float, float]


def relative_angles(g: SphereGraph, node_type, k: int,
                    table: NeighborTable | None = None) -> RelPosTable:
    """Rotate each neighborhood so its center sits on the equator facing
    theta = pi, then read the neighbors' spherical offsets.

    Right/left neighbors get positive/negative dtheta, below/above get
    positive/negative dphi. At the two poles the azimuth is undefined, so
    pole neighborhoods use dtheta = 0 and dphi = +/- geodesic distance
    (all neighbors of the north pole lie below it). This keeps the table
    invariant under rotations about z.
    """
    node_type = NodeType.parse(node_type)
    if table is None:
        table = neighbor_table(g, node_type, k)
    coords = node_coords(g, node_type)
    theta, phi = coords[:, 0], coords[:, 1]
    idx = np.where(table.mask, table.indices, np.arange(len(coords))[:, None])

    rot = rotation_matrices(theta, phi)
    cart = _to_cartesian(theta[idx], phi[idx])  # (N, W, 3)
    rotated = np.einsum("nij,nwj->nwi", rot, cart)
    x, y, z = rotated[..., 0], rotated[..., 1], rotated[..., 2]
    # to spherical in the same frame, relative to the center at (pi, pi/2)
    dtheta = np.arctan2(y, x)
    dphi = np.arctan2(np.hypot(x, y), z) - np.pi / 2

    pos = g.positions(node_type)
    pole = np.sin(phi) < _POLE_EPS
    if pole.any():
        p_c = pos[pole][:, None, :]
        p_n = pos[idx[pole]]
        dist = np.arctan2(np.linalg.norm(np.cross(p_c, p_n), axis=-1), np.sum(p_c * p_n, axis=-1))
        sign = np.where(pos[pole, 2] > 0, 1.0, -1.0)[:, None]
        dtheta[pole] = 0.0
        dphi[pole] = sign * dist

    raw = np.stack([dtheta, dphi], axis=-1)
    raw[~table.mask] = 0.0
    raw[idx == np.arange(len(coords))[:, None]] = 0.0  # self pairs, exactly
    scale = np.abs(raw).reshape(-1, 2).max(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    normalized = raw / scale
    raw.setflags(write=False)
    normalized.setflags(write=False)
    return RelPosTable(table, raw, normalized, (float(scale[0]), float(scale[1])))


def bilinear_weights(points: np.ndarray, size: int = GRID_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Corner flat indices (P, 4) and weights (P, 4) on a size x size lattice
    spanning [-1, 1]^2. Columns follow dtheta, rows follow dphi.
    """
    points = np.asarray(points, dtype=np.float64)
    if np.any(np.abs(points) > 1.0 + 1e-9):
        raise ValueError("relative offsets must lie in [-1, 1]; normalization is broken")
    u = (np.clip(points[:, 0], -1.0, 1.0) + 1.0) * (size - 1) / 2.0
    v = (np.clip(points[:, 1], -1.0, 1.0) + 1.0) * (size - 1) / 2.0
    c0 = np.minimum(np.floor(u).astype(np.int64), size - 2)
    r0 = np.minimum(np.floor(v).astype(np.int64), size - 2)
    fu = u - c0
    fv = v - r0
    idx = np.stack([r0 * size + c0, r0 * size + c0 + 1, (r0 + 1) * size + c0, (r0 + 1) * size + c0 + 1], axis=1)
    w = np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu], axis=1)
    return idx, w


def bias_sampling_matrix(rel: RelPosTable, symmetric: bool = False) -> sp.csr_matrix:
    """Sparse (N*W, 49) operator mapping a flattened grid to per-slot biases.

    ``symmetric`` averages the samples at (dtheta, dphi) and (-dtheta, dphi),
    which makes the bias invariant under horizontal flips. Pad slots map to
    empty rows.
    """
    pts = rel.normalized.reshape(-1, 2)
    valid = rel.neighbors.mask.reshape(-1)
    idx, w = bilinear_weights(pts)
    if symmetric:
        idx_m, w_m = bilinear_weights(pts * np.array([-1.0, 1.0]))
        idx = np.concatenate([idx, idx_m], axis=1)
        w = np.concatenate([w, w_m], axis=1) * 0.5
    w = w * valid[:, None]
    rows = np.repeat(np.arange(len(pts)), idx.shape[1])
    mat = sp.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(len(pts), GRID_SIZE**2))
    mat.sum_duplicates()
    return mat


def sample_bias(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear lookup of one (7, 7) grid at normalized (dtheta, dphi) points."""
    idx, w = bilinear_weights(np.atleast_2d(points), grid.shape[-1])
    return np.sum(grid.reshape(-1)[idx] * w, axis=1)
