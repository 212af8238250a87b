"""Surface sampling, farthest point sampling, normalization and augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateError, FormatError, SizeError
from .mesh_io import TriangleMesh, face_areas
from .render import Image

UP_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class PointCloud:
    points: np.ndarray  # [n, 3]
    face_index: np.ndarray | None = None  # source face of each point, when sampled from a mesh

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    @property
    def n(self) -> int:
        return len(self.points)

    def subset(self, idx: np.ndarray) -> PointCloud:
        fi = None if self.face_index is None else self.face_index[idx]
        return PointCloud(self.points[idx], fi)


def surface_oversample(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> PointCloud:
    """Uniform surface samples: face drawn with probability proportional to area,
    then a uniform barycentric point on it."""
    if count < 1:
        raise SizeError("count must be positive")
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise DegenerateError("mesh has zero surface area")
    faces = rng.choice(len(areas), size=count, p=areas / total)
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.vertices[mesh.faces[faces]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return PointCloud(pts, faces)


def fps_indices(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point order: each pick maximizes the distance to the nearest
    already-picked point; ties go to the lowest index."""
    m = len(points)
    if n > m:
        raise SizeError(f"cannot pick {n} points out of {m}")
    if not 0 <= start_index < m:
        raise SizeError(f"start index {start_index} out of range")
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    out[0] = start_index
    d = np.sum((points - points[start_index]) ** 2, axis=1)
    for i in range(1, n):
        j = int(np.argmax(d))
        out[i] = j
        d = np.minimum(d, np.sum((points - points[j]) ** 2, axis=1))
    return out


def farthest_point_sample(candidates: PointCloud, n: int, start_index: int = 0) -> PointCloud:
    return candidates.subset(fps_indices(candidates.points, n, start_index))


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    if cloud.n < 1:
        raise SizeError("empty point cloud")
    p = cloud.points - cloud.points.mean(axis=0)
    r = np.linalg.norm(p, axis=1).max()
    if not r > 0:
        raise DegenerateError("all points coincide")
    return PointCloud(p / r, cloud.face_index)


def sample_cloud(mesh: TriangleMesh, n: int, rng: np.random.Generator, oversample: int = 8,
                 start_index: int | None = None) -> PointCloud:
    """Oversample the surface, thin with FPS to ``n`` points, normalize to the unit sphere."""
    cand = surface_oversample(mesh, oversample * n, rng)
    if start_index is None:
        start_index = int(rng.integers(cand.n))
    return normalize_unit_sphere(farthest_point_sample(cand, n, start_index))


def rotation_about(axis: str, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    i = UP_AXES[axis]
    j, k = [a for a in range(3) if a != i]
    R = np.eye(3)
    # right-handed rotation about axis i maps j -> k
    if i == 1:
        j, k = k, j
    R[j, j], R[j, k], R[k, j], R[k, k] = c, -s, s, c
    return R


def augment_cloud(points: np.ndarray, rng: np.random.Generator, up_axis: str = "y",
                  sigma: float = 0.02, clip: float = 0.05, rotate: bool = True) -> np.ndarray:
    """Random rotation about the up axis followed by clipped Gaussian jitter."""
    theta = rng.uniform(0, 2 * np.pi) if rotate else 0.0
    out = points @ rotation_about(up_axis, theta).T
    if sigma > 0:
        out = out + np.clip(rng.normal(0.0, sigma, out.shape), -clip, clip)
    return out.astype(points.dtype, copy=False)


def augment_image(pixels: np.ndarray, rng: np.random.Generator, pad_fraction: float = 0.125,
                  flip_prob: float = 0.5) -> np.ndarray:
    """Edge-replicate pad, random crop back to the original size, random horizontal mirror.

    Works on a single [H, W] image or a stack [..., H, W].
    """
    H, W = pixels.shape[-2:]
    ph, pw = int(round(H * pad_fraction)), int(round(W * pad_fraction))
    dy, dx = int(rng.integers(0, 2 * ph + 1)), int(rng.integers(0, 2 * pw + 1))
    flip = rng.random() < flip_prob
    return crop_and_flip(pixels, dy - ph, dx - pw, flip, ph, pw)


def crop_and_flip(pixels: np.ndarray, off_y: int, off_x: int, flip: bool, ph: int, pw: int) -> np.ndarray:
    """Deterministic part of :func:`augment_image`: offsets are relative to the unpadded image."""
    H, W = pixels.shape[-2:]
    pad = [(0, 0)] * (pixels.ndim - 2) + [(ph, ph), (pw, pw)]
    padded = np.pad(pixels, pad, mode="edge")
    out = padded[..., ph + off_y:ph + off_y + H, pw + off_x:pw + off_x + W]
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_image_obj(image: Image, rng: np.random.Generator) -> Image:
    return Image(image.width, image.height, augment_image(image.pixels, rng))


_PCF_MAGIC = b"PCF1"


def write_pcf(cloud: PointCloud | np.ndarray, path: str | Path) -> None:
    """Little-endian: magic ``PCF1``, uint32 n, n x 3 float32."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    Path(path).write_bytes(_PCF_MAGIC + struct.pack("<I", len(pts)) + pts.astype("<f4").tobytes())


def read_pcf(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _PCF_MAGIC:
        raise FormatError(f"{path}: not a PCF1 file")
    (n,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != 12 * n:
        raise FormatError(f"{path}: expected {n} points, payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(n, 3).astype(np.float32)


def write_csv(cloud: PointCloud | np.ndarray, path: str | Path) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    np.savetxt(path, pts, delimiter=",", header="x,y,z", comments="", fmt="%.6f")
