"""Randomized multi-view cameras and a Gouraud-shaded Phong rasterizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import CameraError, ConfigError
from .mesh_io import TriangleMesh

AZIMUTH_RANGE = (10.0, 340.0)
POLAR_RANGE = (10.0, 165.0)


@dataclass(frozen=True)
class Light:
    """Point light; ``offset`` is expressed in the camera-aligned frame centered on the look-at point
    (x = camera right, y = camera up, z = toward the camera)."""

    offset: tuple[float, float, float]
    diffuse: float = 1.0
    specular: float = 1.0


def _default_lights() -> tuple[Light, ...]:
    return (Light((0.0, 0.0, 3.0)), Light((0.0, 0.0, -3.0)))


@dataclass(frozen=True)
class RenderConfig:
    width: int = 224
    height: int = 224
    view_count: int = 180
    radius: float = 3.5
    fov_y: float = 35.0
    lights: tuple[Light, ...] = field(default_factory=_default_lights)
    ambient_intensity: float = 1.0
    k_ambient: float = 0.1
    k_diffuse: float = 0.6
    k_specular: float = 0.3
    shininess: float = 32.0
    background: float = 0.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError("image side must be at least 8 pixels")
        if min(self.k_ambient, self.k_diffuse, self.k_specular, self.shininess, self.ambient_intensity) < 0:
            raise ConfigError("shading coefficients must be non-negative")
        if self.view_count < 2:
            raise ConfigError("view_count must be at least 2")
        if not 0.0 <= self.background <= 1.0:
            raise ConfigError("background intensity must lie in [0, 1]")

    @classmethod
    def toy(cls, **overrides) -> RenderConfig:
        base = dict(width=32, height=32, view_count=8)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class Camera:
    azimuth: float  # degrees, measured in the x-z plane from +x toward +z
    polar: float  # degrees from the +y (up) axis
    radius: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_y: float = 35.0
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)

    @property
    def eye(self) -> np.ndarray:
        a, p = math.radians(self.azimuth), math.radians(self.polar)
        d = np.array([math.sin(p) * math.cos(a), math.cos(p), math.sin(p) * math.sin(a)])
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * d

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, back) orthonormal frame; ``back`` points from the look-at point to the eye."""
        back = self.eye - np.asarray(self.look_at, dtype=np.float64)
        norm = np.linalg.norm(back)
        if norm == 0:
            raise CameraError("camera coincides with its look-at point")
        back /= norm
        right = np.cross(np.asarray(self.up, dtype=np.float64), back)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise CameraError("view direction is parallel to the up vector")
        right /= rn
        return right, np.cross(back, right), back


@dataclass
class Image:
    width: int
    height: int
    pixels: np.ndarray  # [height, width] float32 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(self.height, self.width)


def sample_viewpoints(count: int, config: RenderConfig, rng: np.random.Generator) -> list[Camera]:
    if count < 1:
        raise ConfigError("need at least one viewpoint")
    az = rng.uniform(*AZIMUTH_RANGE, size=count)
    po = rng.uniform(*POLAR_RANGE, size=count)
    return [Camera(float(a), float(p), config.radius, fov_y=config.fov_y) for a, p in zip(az, po)]


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of adjacent face normals, normalized."""
    v = vertices[faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(n, faces[:, c], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def shade_vertices(mesh: TriangleMesh, camera: Camera, config: RenderConfig) -> np.ndarray:
    """Phong intensity at every vertex (ambient + both lights). Normals are flipped toward
    the viewer, so inconsistently oriented meshes still shade from the front."""
    right, up, back = camera.basis()
    center = np.asarray(camera.look_at, dtype=np.float64)
    verts = mesh.vertices
    normals = vertex_normals(verts, mesh.faces)
    to_eye = camera.eye - verts
    to_eye /= np.maximum(np.linalg.norm(to_eye, axis=1, keepdims=True), 1e-12)
    flip = np.sum(normals * to_eye, axis=1) < 0
    normals[flip] *= -1

    intensity = np.full(len(verts), config.k_ambient * config.ambient_intensity)
    for light in config.lights:
        ox, oy, oz = light.offset
        pos = center + ox * right + oy * up + oz * back
        L = pos - verts
        L /= np.maximum(np.linalg.norm(L, axis=1, keepdims=True), 1e-12)
        ndotl = np.sum(normals * L, axis=1)
        diffuse = np.maximum(ndotl, 0.0)
        R = 2 * ndotl[:, None] * normals - L
        spec = np.maximum(np.sum(R * to_eye, axis=1), 0.0) ** config.shininess
        spec = np.where(ndotl > 0, spec, 0.0)
        intensity += config.k_diffuse * diffuse * light.diffuse + config.k_specular * spec * light.specular
    return intensity


def project(vertices: np.ndarray, camera: Camera, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates [V, 2] (x right, y down; pixel centers at integer + 0.5) and view depth [V]."""
    right, up, back = camera.basis()
    rel = vertices - camera.eye
    xc, yc, depth = rel @ right, rel @ up, -(rel @ back)
    f = 1.0 / math.tan(math.radians(camera.fov_y) / 2)
    aspect = width / height
    safe = np.where(depth > 1e-9, depth, 1e-9)
    ndc_x = f * xc / (safe * aspect)
    ndc_y = f * yc / safe
    px = (ndc_x + 1) * 0.5 * width
    py = (1 - ndc_y) * 0.5 * height
    return np.stack([px, py], axis=1), depth


def render_view(mesh: TriangleMesh, camera: Camera, config: RenderConfig) -> Image:
    """Depth-buffered rasterization with barycentric interpolation of per-vertex Phong intensity."""
    pixels, _ = rasterize(mesh, camera, config)
    return Image(config.width, config.height, pixels)


def rasterize(mesh: TriangleMesh, camera: Camera, config: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Clamped intensity [H, W] and view depth [H, W] (``inf`` where nothing is drawn)."""
    W, H = config.width, config.height
    img = np.full(H * W, config.background, dtype=np.float64)
    zbuf = np.full(H * W, np.inf)

    def result():
        return np.clip(img, 0.0, 1.0).reshape(H, W), zbuf.reshape(H, W)

    if mesh.n_faces == 0:
        return result()
    shade = shade_vertices(mesh, camera, config)
    xy, depth = project(mesh.vertices, camera, W, H)

    tri = mesh.faces
    keep = np.all(depth[tri] > 1e-6, axis=1)
    tri = tri[keep]
    p = xy[tri]  # [F, 3, 2]
    area = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    ok = np.abs(area) > 1e-12
    tri, p, area = tri[ok], p[ok], area[ok]
    if len(tri) == 0:
        return result()
    inv_z = 1.0 / depth[tri]  # [F, 3]
    val = shade[tri]

    x0 = np.clip(np.floor(p[:, :, 0].min(1) - 0.5).astype(int), 0, W - 1)
    x1 = np.clip(np.ceil(p[:, :, 0].max(1) - 0.5).astype(int), 0, W - 1)
    y0 = np.clip(np.floor(p[:, :, 1].min(1) - 0.5).astype(int), 0, H - 1)
    y1 = np.clip(np.ceil(p[:, :, 1].max(1) - 0.5).astype(int), 0, H - 1)
    visible = (p[:, :, 0].max(1) >= 0) & (p[:, :, 0].min(1) <= W) & (p[:, :, 1].max(1) >= 0) & (p[:, :, 1].min(1) <= H)

    # group triangles by bounding-box size so each group is one vectorized pass
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    side = np.maximum(bw, bh)
    buckets = np.minimum(np.ceil(np.log2(np.maximum(side, 1))).astype(int), 20)
    for b in np.unique(buckets[visible]):
        sel = np.nonzero(visible & (buckets == b))[0]
        s = int(side[sel].max())
        grid = np.arange(s)
        # cap the working set around 4M candidate pixels
        step = max(1, 4_000_000 // (s * s))
        for start in range(0, len(sel), step):
            idx = sel[start:start + step]
            gx = x0[idx, None, None] + grid[None, None, :]
            gy = y0[idx, None, None] + grid[None, :, None]
            cx, cy = gx + 0.5, gy + 0.5
            pp = p[idx]
            a = area[idx][:, None, None]
            w0 = ((pp[:, 1, 0, None, None] - cx) * (pp[:, 2, 1, None, None] - cy)
                  - (pp[:, 2, 0, None, None] - cx) * (pp[:, 1, 1, None, None] - cy)) / a
            w1 = ((pp[:, 2, 0, None, None] - cx) * (pp[:, 0, 1, None, None] - cy)
                  - (pp[:, 0, 0, None, None] - cx) * (pp[:, 2, 1, None, None] - cy)) / a
            w2 = 1.0 - w0 - w1
            inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)
                      & (gx <= x1[idx, None, None]) & (gy <= y1[idx, None, None]))
            if not inside.any():
                continue
            f_i, r_i, c_i = np.nonzero(inside)
            b0, b1, b2 = w0[f_i, r_i, c_i], w1[f_i, r_i, c_i], w2[f_i, r_i, c_i]
            iz = inv_z[idx][f_i]
            inv_depth = b0 * iz[:, 0] + b1 * iz[:, 1] + b2 * iz[:, 2]
            z = 1.0 / inv_depth
            vv = val[idx][f_i]
            intensity = b0 * vv[:, 0] + b1 * vv[:, 1] + b2 * vv[:, 2]
            pix = gy[f_i, r_i, 0] * W + gx[f_i, 0, c_i]
            # nearest fragment per pixel wins; ties resolved by first in sorted order
            order = np.lexsort((z, pix))
            pix, z, intensity = pix[order], z[order], intensity[order]
            first = np.ones(len(pix), dtype=bool)
            first[1:] = pix[1:] != pix[:-1]
            pix, z, intensity = pix[first], z[first], intensity[first]
            closer = z < zbuf[pix]
            zbuf[pix[closer]] = z[closer]
            img[pix[closer]] = intensity[closer]
    return result()


def render_views(mesh: TriangleMesh, cameras: list[Camera], config: RenderConfig) -> np.ndarray:
    """Stack of rendered views, [len(cameras), H, W] float32."""
    return np.stack([render_view(mesh, c, config).pixels for c in cameras])


def write_png(image: Image, path: str | Path) -> None:
    data = np.round(np.clip(image.pixels, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)


def read_png(path: str | Path) -> Image:
    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.float32) / 255.0
    return Image(arr.shape[1], arr.shape[0], arr)


def write_float32(image: Image, path: str | Path) -> None:
    """Flat row-major little-endian float32 dump, no header."""
    Path(path).write_bytes(image.pixels.astype("<f4").tobytes())


def read_float32(path: str | Path, width: int, height: int) -> Image:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != width * height:
        raise ConfigError(f"{path}: {data.size} values, expected {width}x{height}")
    return Image(width, height, data.copy())


def write_view_manifest(rows, path: str | Path) -> None:
    """One line per image: object_id, view_id, azimuth, polar, path."""
    with open(path, "w") as fh:
        fh.write("object_id,view_id,azimuth,polar,path\n")
        for object_id, view_id, az, po, img_path in rows:
            fh.write(f"{object_id},{view_id},{az:.6f},{po:.6f},{img_path}\n")


def read_view_manifest(path: str | Path) -> list[tuple[str, int, float, float, str]]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            oid, vid, az, po, p = line.rstrip("\n").split(",")
            rows.append((oid, int(vid), float(az), float(po), p))
    return rows
