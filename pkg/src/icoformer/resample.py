"""Equirectangular rasters <-> sphere node signals, plus PNG/PFM file IO."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .sphere import NodeType, SphereGraph, angles_to_cartesian, icosphere, node_coords

TWO_PI = 2.0 * np.pi


class ImageKind(str, enum.Enum):
    RGB = "rgb"
    DEPTH = "depth"
    LABEL = "label"


class RenderMode(str, enum.Enum):
    NEAREST = "nearest"
    BARYCENTRIC = "barycentric"


@dataclass(eq=False)
class ErpImage:
    """(H, W, C) float32 raster. Pixel (i, j) is centered at
    theta = 2 pi (j + 0.5) / W, phi = pi (i + 0.5) / H.
    """

    values: np.ndarray
    kind: ImageKind = ImageKind.RGB

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[0] == 0 or v.shape[1] == 0 or v.shape[2] == 0:
            raise ValueError(f"ERP image must be non-empty (H, W, C), got shape {v.shape}")
        self.kind = ImageKind(self.kind)
        if self.kind is ImageKind.RGB and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("RGB values must lie in [0, 1]")
        if self.kind is ImageKind.DEPTH and v.min() < 0.0:
            raise ValueError("depth values must be >= 0")
        if self.kind is ImageKind.LABEL and (v.min() < 0 or np.any(v != np.round(v))):
            raise ValueError("labels must be non-negative integers")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(eq=False)
class SphereSignal:
    rank: int
    node_type: NodeType
    values: np.ndarray  # (N, C)

    def __post_init__(self):
        self.node_type = NodeType.parse(self.node_type)
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        n = icosphere(self.rank).node_count(self.node_type)
        if v.ndim != 2 or v.shape[0] != n:
            raise ValueError(f"signal has shape {v.shape}; rank {self.rank} {self.node_type.value} has {n} nodes")
        self.values = v

    @property
    def graph(self) -> SphereGraph:
        return icosphere(self.rank)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def save(self, path) -> None:
        from .checkpoint import save_arrays
        save_arrays(path, {"values": self.values},
                    {"kind": "signal", "rank": self.rank, "node_type": self.node_type.value})

    @classmethod
    def load(cls, path) -> "SphereSignal":
        from .checkpoint import CheckpointError, load_arrays
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "signal" or "values" not in arrays:
            raise CheckpointError(f"{path}: not a sphere signal file")
        return cls(int(meta["rank"]), meta["node_type"], arrays["values"])


def bilinear_erp_weights(theta, phi, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices (P, 4) and weights (P, 4) for bilinear sampling.

    Columns wrap around horizontally, rows clamp at the top and bottom edge.
    """
    u = np.asarray(theta, dtype=np.float64) * width / TWO_PI - 0.5
    v = np.asarray(phi, dtype=np.float64) * height / np.pi - 0.5
    j0 = np.floor(u)
    i0 = np.floor(v)
    fu = u - j0
    fv = v - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)
    c0, c1 = np.mod(j0, width), np.mod(j0 + 1, width)
    r0, r1 = np.clip(i0, 0, height - 1), np.clip(i0 + 1, 0, height - 1)
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], axis=1)
    w = np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu], axis=1)
    return idx, w


def nearest_erp_pixel(theta, phi, width: int, height: int) -> np.ndarray:
    """Flat index of the pixel whose cell contains (theta, phi)."""
    j = np.mod(np.floor(np.asarray(theta) * width / TWO_PI).astype(np.int64), width)
    i = np.clip(np.floor(np.asarray(phi) * height / np.pi).astype(np.int64), 0, height - 1)
    return i * width + j


def erp_to_sphere(img: ErpImage, g: SphereGraph, node_type="hex") -> SphereSignal:
    node_type = NodeType.parse(node_type)
    coords = node_coords(g, node_type)
    flat = img.values.reshape(-1, img.channels)
    if img.kind is ImageKind.LABEL:
        vals = flat[nearest_erp_pixel(coords[:, 0], coords[:, 1], img.width, img.height)]
    else:
        idx, w = bilinear_erp_weights(coords[:, 0], coords[:, 1], img.width, img.height)
        vals = np.einsum("pk,pkc->pc", w, flat[idx].astype(np.float64)).astype(np.float32)
    return SphereSignal(g.rank, node_type, vals)


def pixel_directions(width: int, height: int) -> np.ndarray:
    """(H*W, 3) unit vectors through pixel centers, row-major."""
    theta = TWO_PI * (np.arange(width) + 0.5) / width
    phi = np.pi * (np.arange(height) + 0.5) / height
    tt, pp = np.meshgrid(theta, phi)
    return angles_to_cartesian(tt.reshape(-1), pp.reshape(-1))


def _barycentric(g: SphereGraph, dirs: np.ndarray, candidates: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Containing face and gnomonic barycentric weights for each direction."""
    tri = g.vertices[g.faces]  # (F, 3 corners, 3 xyz)
    centroids = tri.mean(axis=1)
    inv = np.linalg.inv(np.transpose(tri, (0, 2, 1)))  # solves [a b c] lam = p
    k = min(candidates, len(g.faces))
    _, cand = cKDTree(centroids / np.linalg.norm(centroids, axis=1, keepdims=True)).query(dirs, k=k)
    cand = cand.reshape(len(dirs), k)
    lam = np.einsum("pkij,pj->pki", inv[cand], dirs)
    lam = lam / lam.sum(axis=-1, keepdims=True)
    best = np.argmax(lam.min(axis=-1), axis=1)
    rows = np.arange(len(dirs))
    face = cand[rows, best]
    w = np.clip(lam[rows, best], 0.0, None)
    return face, w / w.sum(axis=1, keepdims=True)


def sphere_to_erp(sig: SphereSignal, width: int, height: int, mode="nearest",
                  kind: ImageKind | str | None = None) -> ErpImage:
    if width <= 0 or height <= 0:
        raise ValueError("output size must be positive")
    mode = RenderMode(mode)
    g = sig.graph
    dirs = pixel_directions(width, height)
    vals = np.asarray(sig.values, dtype=np.float64)
    if mode is RenderMode.NEAREST:
        _, nearest = cKDTree(g.positions(sig.node_type)).query(dirs)
        out = vals[nearest]
    else:
        if sig.node_type is not NodeType.VERTEX:
            raise ValueError("barycentric rendering needs vertex (hex) node type")
        face, w = _barycentric(g, dirs)
        out = np.einsum("pk,pkc->pc", w, vals[g.faces[face]])
    if kind is None:
        kind = ImageKind.DEPTH if sig.channels == 1 else ImageKind.RGB
    kind = ImageKind(kind)
    out = out.reshape(height, width, sig.channels).astype(np.float32)
    if kind is ImageKind.RGB:
        out = np.clip(out, 0.0, 1.0)
    return ErpImage(out, kind)


# -- file IO -----------------------------------------------------------

def save_png(img: ErpImage, path) -> None:
    v = img.values
    if img.kind is ImageKind.DEPTH:
        raise ValueError("depth images are stored as PFM")
    if img.kind is ImageKind.LABEL:
        if img.channels != 1 or v.max() > 255:
            raise ValueError("label PNG needs one channel with values <= 255")
        arr = v[:, :, 0].astype(np.uint8)
    else:
        if img.channels not in (1, 3):
            raise ValueError(f"RGB PNG needs 1 or 3 channels, got {img.channels}")
        arr = np.round(v * 255.0).astype(np.uint8)
        if img.channels == 1:
            arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path, kind=ImageKind.RGB) -> ErpImage:
    kind = ImageKind(kind)
    if kind is ImageKind.DEPTH:
        raise ValueError(f"{path}: depth must be loaded from PFM, not PNG")
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if kind is ImageKind.LABEL:
        if mode not in ("L", "P"):
            raise ValueError(f"{path}: label PNG must be single channel, got mode {mode}")
        return ErpImage(arr.astype(np.float32), kind)
    if mode not in ("RGB", "L"):
        raise ValueError(f"{path}: unsupported PNG mode {mode} for RGB")
    return ErpImage(arr.astype(np.float32) / 255.0, kind)


def save_pfm(img: ErpImage, path) -> None:
    if img.channels not in (1, 3):
        raise ValueError("PFM holds 1 or 3 channels")
    tag = b"Pf" if img.channels == 1 else b"PF"
    data = np.flipud(img.values).astype("<f4")  # PFM rows run bottom to top
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{img.width} {img.height}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(data).tobytes())


_PFM_HEADER = re.compile(rb"^(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def load_pfm(path, kind=ImageKind.DEPTH) -> ErpImage:
    raw = Path(path).read_bytes()
    m = _PFM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    channels = 1 if m.group(1) == b"Pf" else 3
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    if kind == ImageKind.DEPTH and channels != 1:
        raise ValueError(f"{path}: depth PFM must have one channel")
    dt = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dt).reshape(h, w, channels)
    return ErpImage(np.flipud(data).astype(np.float32), kind)


def load_image(path, kind) -> ErpImage:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return load_png(path, kind)
    if suffix == ".pfm":
        return load_pfm(path, kind)
    raise ValueError(f"unsupported image format {suffix!r} (use .png or .pfm)")


def save_image(img: ErpImage, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        save_png(img, path)
    elif suffix == ".pfm":
        save_pfm(img, path)
    else:
        raise ValueError(f"unsupported image format {suffix!r} (use .png or .pfm)")
