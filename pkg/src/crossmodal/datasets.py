"""Procedural toy shapes, the generated-data store, training samples and evaluation pairs."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, SizeError
from .mesh_io import MeshDataset, TriangleMesh, fit_to_view
from .pointcloud import augment_cloud, augment_image, read_pcf, sample_cloud, write_pcf
from .render import (Camera, Image, RenderConfig, read_float32, render_views, sample_viewpoints,
                     write_float32, write_png, write_view_manifest)

log = logging.getLogger(__name__)

# global part ids; each class owns a contiguous block
PART_SETS: dict[str, tuple[int, ...]] = {
    "sphere": (0, 1),  # upper, lower hemisphere
    "box": (2, 3, 4),  # top, sides, bottom
    "cylinder": (5, 6),  # caps, body
    "cone": (7, 8),  # base, lateral surface
}
TOY_CLASSES = tuple(PART_SETS)
NUM_TOY_PARTS = 9


# ------------------------------------------------------------------ toy shapes

def _grid_faces(rows: int, cols: int, offset: int = 0, wrap: bool = True) -> list[tuple[int, int, int]]:
    """Quads between consecutive rings of ``cols`` vertices, split into triangles."""
    faces = []
    span = cols if wrap else cols - 1
    for r in range(rows - 1):
        for c in range(span):
            a = offset + r * cols + c
            b = offset + r * cols + (c + 1) % cols
            faces += [(a, b, b + cols), (a, b + cols, a + cols)]
    return faces


def _sphere(rng):
    rings = 2 * int(rng.integers(4, 9))  # even, so the equator is an edge loop
    seg = int(rng.integers(10, 21))
    theta = np.pi * np.arange(1, rings) / rings
    phi = 2 * np.pi * np.arange(seg) / seg
    ring = np.stack([np.outer(np.sin(theta), np.cos(phi)), np.repeat(np.cos(theta)[:, None], seg, 1),
                     np.outer(np.sin(theta), np.sin(phi))], axis=-1).reshape(-1, 3)
    verts = np.vstack([[0, 1, 0], ring, [0, -1, 0]])
    last = len(verts) - 1
    faces = [(0, 1 + j, 1 + (j + 1) % seg) for j in range(seg)]
    faces += _grid_faces(rings - 1, seg, offset=1)
    base = 1 + (rings - 2) * seg
    faces += [(last, base + j, base + (j + 1) % seg) for j in range(seg)]
    faces = np.array(faces)
    cy = verts[faces].mean(1)[:, 1]
    return verts, faces, np.where(cy > 0, 0, 1)


def _box(rng):
    m = int(rng.integers(2, 6))
    t = np.linspace(-1, 1, m + 1)
    verts, faces, labels = [], [], []
    # (normal axis, sign, part)
    for axis, sign, part in ((1, 1, 2), (1, -1, 4), (0, 1, 3), (0, -1, 3), (2, 1, 3), (2, -1, 3)):
        u, v = [a for a in range(3) if a != axis]
        base = len(verts)
        for i in t:
            for j in t:
                p = [0.0, 0.0, 0.0]
                p[axis], p[u], p[v] = sign, i, j
                verts.append(p)
        for i in range(m):
            for j in range(m):
                a = base + i * (m + 1) + j
                faces += [(a, a + m + 1, a + m + 2), (a, a + m + 2, a + 1)]
                labels += [part, part]
    return np.array(verts), np.array(faces), np.array(labels)


def _disk(center_y: float, radius: np.ndarray, seg: int, offset: int):
    """Fan around a center vertex; returns (verts, faces) with the center first."""
    phi = 2 * np.pi * np.arange(seg) / seg
    rim = np.stack([radius * np.cos(phi), np.full(seg, center_y), radius * np.sin(phi)], axis=1)
    verts = np.vstack([[0, center_y, 0], rim])
    faces = [(offset, offset + 1 + j, offset + 1 + (j + 1) % seg) for j in range(seg)]
    return verts, faces


def _cylinder(rng):
    seg = int(rng.integers(10, 25))
    rows = int(rng.integers(2, 6))
    phi = 2 * np.pi * np.arange(seg) / seg
    ys = np.linspace(1, -1, rows + 1)
    body = np.stack([np.tile(np.cos(phi), rows + 1), np.repeat(ys, seg), np.tile(np.sin(phi), rows + 1)], 1)
    faces = _grid_faces(rows + 1, seg)
    labels = [6] * len(faces)
    verts = [body]
    n = len(body)
    for y in (1.0, -1.0):
        v, f = _disk(y, 1.0, seg, n)
        verts.append(v)
        faces += f
        labels += [5] * len(f)
        n += len(v)
    return np.vstack(verts), np.array(faces), np.array(labels)


def _cone(rng):
    seg = int(rng.integers(10, 25))
    rows = int(rng.integers(2, 6))
    phi = 2 * np.pi * np.arange(seg) / seg
    frac = np.linspace(0, 1, rows + 1)[1:]  # fraction of the way from apex to base
    ys = 1 - 2 * frac
    lateral = np.stack([np.outer(frac, np.cos(phi)), np.repeat(ys[:, None], seg, 1),
                        np.outer(frac, np.sin(phi))], -1).reshape(-1, 3)
    verts = np.vstack([[0, 1, 0], lateral])
    faces = [(0, 1 + j, 1 + (j + 1) % seg) for j in range(seg)]
    faces += _grid_faces(rows, seg, offset=1)
    labels = [8] * len(faces)
    v, f = _disk(-1.0, 1.0, seg, len(verts))
    verts = np.vstack([verts, v])
    faces += f
    labels += [7] * len(f)
    return verts, np.array(faces), np.array(labels)


_BUILDERS = {"sphere": _sphere, "box": _box, "cylinder": _cylinder, "cone": _cone}


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip faces whose normal points toward the interior (all toy shapes are convex)."""
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inward = np.sum(n * (tri.mean(1) - verts.mean(0)), axis=1) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, ::-1]
    return faces


def make_toy_shape(kind: str, rng: np.random.Generator) -> TriangleMesh:
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown toy class {kind!r}; choose from {', '.join(TOY_CLASSES)}")
    verts, faces, labels = _BUILDERS[kind](rng)
    verts = verts * rng.uniform(0.6, 1.4, size=3)
    faces = _orient_outward(verts, faces)
    return TriangleMesh(verts, faces, label=kind, face_labels=labels).validate()


def generate_toy_dataset(classes, per_class: int, rng: np.random.Generator) -> MeshDataset:
    """``per_class`` random meshes of each class, in class-major order."""
    if per_class < 1:
        raise ConfigError("per_class must be at least 1")
    classes = list(classes)
    for c in classes:
        if c not in _BUILDERS:
            raise ConfigError(f"unknown toy class {c!r}; choose from {', '.join(TOY_CLASSES)}")
    meshes, names = [], []
    for c in classes:
        for i in range(per_class):
            meshes.append(make_toy_shape(c, rng))
            names.append(f"{c}_{i:04d}")
    return MeshDataset(meshes, "all", names)


# ------------------------------------------------------------------ generated store

@dataclass
class GeneratedStore:
    """Rendered views, sampled clouds and optional per-point part labels for a set of objects.

    Immutable after construction; every array is indexed by object.
    """

    object_ids: list[str]
    classes: list[str]
    splits: list[str]
    views: np.ndarray  # [N, V, H, W] float32
    clouds: np.ndarray  # [N, n, 3] float32
    parts: np.ndarray | None = None  # [N, n] uint8 global part ids
    cameras: list[list[Camera]] = field(default_factory=list)

    def __post_init__(self):
        N = len(self.object_ids)
        if not (len(self.classes) == len(self.splits) == len(self.views) == len(self.clouds) == N):
            raise ConfigError("store arrays disagree on the object count")

    @property
    def size(self) -> int:
        return len(self.object_ids)

    @property
    def view_count(self) -> int:
        return self.views.shape[1]

    @property
    def class_names(self) -> list[str]:
        return sorted(set(self.classes), key=self.classes.index)

    @property
    def labels(self) -> np.ndarray:
        names = self.class_names
        return np.array([names.index(c) for c in self.classes])

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)


def process_object(mesh: TriangleMesh, render_cfg: RenderConfig, n_points: int,
                   rng: np.random.Generator):
    """Views [V, H, W], cameras, cloud [n, 3] and per-point part ids (or None) for one mesh."""
    mesh = fit_to_view(mesh)
    cams = sample_viewpoints(render_cfg.view_count, render_cfg, rng)
    views = render_views(mesh, cams, render_cfg).astype(np.float32)
    cloud = sample_cloud(mesh, n_points, rng)
    parts = None
    if mesh.face_labels is not None:
        parts = mesh.face_labels[cloud.face_index].astype(np.uint8)
    return views, cams, cloud.points.astype(np.float32), parts


def split_per_class(classes: list[str], test_fraction: float, rng: np.random.Generator) -> list[str]:
    """Per-class random train/test assignment with round(test_fraction * count) test items."""
    splits = ["train"] * len(classes)
    for c in sorted(set(classes)):
        idx = [i for i, k in enumerate(classes) if k == c]
        n_test = int(round(test_fraction * len(idx)))
        for i in rng.permutation(idx)[:n_test]:
            splits[i] = "test"
    return splits


def build_store(dataset: MeshDataset, render_cfg: RenderConfig, n_points: int, rng: np.random.Generator,
                test_fraction: float = 0.2, splits: list[str] | None = None) -> GeneratedStore:
    classes = [m.label or "unlabeled" for m in dataset.meshes]
    if splits is None:
        splits = split_per_class(classes, test_fraction, rng)
    seeds = rng.integers(0, 2**63 - 1, size=len(dataset.meshes))
    views, clouds, parts, cams = [], [], [], []
    for mesh, s in zip(dataset.meshes, seeds):
        v, c, p, pa = process_object(mesh, render_cfg, n_points, np.random.default_rng(int(s)))
        views.append(v)
        cams.append(c)
        clouds.append(p)
        parts.append(pa)
    has_parts = all(p is not None for p in parts)
    names = dataset.names or [f"obj{i:05d}" for i in range(len(dataset.meshes))]
    return GeneratedStore(list(names), classes, list(splits), np.stack(views), np.stack(clouds),
                          np.stack(parts) if has_parts else None, cams)


# ------------------------------------------------------------------ disk layout

_SEG_MAGIC = b"SEG1"


def write_seg(labels: np.ndarray, path: str | Path) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("part labels must fit in uint8")
    Path(path).write_bytes(_SEG_MAGIC + struct.pack("<I", labels.size) + labels.astype(np.uint8).tobytes())


def read_seg(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _SEG_MAGIC:
        raise FormatError(f"{path}: not a SEG1 file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) - 8 != n:
        raise FormatError(f"{path}: expected {n} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).copy()


MANIFEST_FIELDS = ("object_id", "class", "split", "cloud", "views", "parts")


def object_paths(root: Path, oid: str, view_count: int) -> dict:
    return {
        "cloud": root / "clouds" / f"{oid}.pcf",
        "parts": root / "parts" / f"{oid}.seg",
        "views": [root / "views" / f"{oid}_{v:03d}.f32" for v in range(view_count)],
        "pngs": [root / "views" / f"{oid}_{v:03d}.png" for v in range(view_count)],
        "cams": root / "views" / f"{oid}.csv",
    }


def object_complete(root: Path, oid: str, view_count: int, with_parts: bool) -> bool:
    p = object_paths(root, oid, view_count)
    needed = [p["cloud"], p["cams"], *p["views"], *p["pngs"]] + ([p["parts"]] if with_parts else [])
    return all(f.exists() for f in needed)


def write_object(root: Path, oid: str, views: np.ndarray, cams: list[Camera], cloud: np.ndarray,
                 parts: np.ndarray | None) -> None:
    """Write one object's files; the camera table goes last and marks completion."""
    root = Path(root)
    for sub in ("views", "clouds", "parts"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    p = object_paths(root, oid, len(views))
    H, W = views.shape[1:]
    for v, (f32, png) in enumerate(zip(p["views"], p["pngs"])):
        img = Image(W, H, views[v])
        write_float32(img, f32)
        write_png(img, png)
    write_pcf(cloud, p["cloud"])
    if parts is not None:
        write_seg(parts, p["parts"])
    tmp = p["cams"].with_suffix(".tmp")
    write_view_manifest([(oid, v, c.azimuth, c.polar, p["pngs"][v].name) for v, c in enumerate(cams)], tmp)
    tmp.replace(p["cams"])


def write_manifest(root: Path, object_ids, classes, splits, view_count: int, with_parts: bool) -> None:
    root = Path(root)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for oid, c, s in zip(object_ids, classes, splits):
            p = object_paths(root, oid, view_count)
            w.writerow([oid, c, s, p["cloud"].relative_to(root).as_posix(),
                        ";".join(x.relative_to(root).as_posix() for x in p["views"]),
                        p["parts"].relative_to(root).as_posix() if with_parts else ""])


def save_store(store: GeneratedStore, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, oid in enumerate(store.object_ids):
        parts = None if store.parts is None else store.parts[i]
        write_object(root, oid, store.views[i], store.cameras[i] if store.cameras else [], store.clouds[i], parts)
    write_manifest(root, store.object_ids, store.classes, store.splits, store.view_count, store.parts is not None)


def load_store(root: str | Path, width: int, height: int) -> GeneratedStore:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise ConfigError(f"no manifest.csv under {root}; run gen-data first")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{manifest} lists no objects")
    views = np.stack([np.stack([read_float32(root / v, width, height).pixels for v in r["views"].split(";")])
                      for r in rows])
    clouds = np.stack([read_pcf(root / r["cloud"]) for r in rows])
    parts = None
    if all(r["parts"] for r in rows):
        parts = np.stack([read_seg(root / r["parts"]) for r in rows])
    return GeneratedStore([r["object_id"] for r in rows], [r["class"] for r in rows],
                          [r["split"] for r in rows], views, clouds, parts)


# ------------------------------------------------------------------ training samples

@dataclass
class TrainingSample:
    cloud: np.ndarray  # [n, 3]
    img1: np.ndarray  # [H, W]
    img2: np.ndarray
    img3: np.ndarray
    labels: tuple[int, int, int] = (1, 1, 0)
    object_index: int = -1
    negative_index: int = -1
    view_ids: tuple[int, int, int] = (-1, -1, -1)


def assemble_sample(store: GeneratedStore, object_index: int, rng: np.random.Generator,
                    augment: bool = True, pool: np.ndarray | None = None) -> TrainingSample:
    """Two distinct views and the cloud of one object plus one view of another object.

    ``pool`` restricts the negative object to the given indices (default: all objects).
    """
    V = store.view_count
    if V < 2:
        raise ConfigError("need at least two rendered views per object")
    pool = np.arange(store.size) if pool is None else np.asarray(pool)
    others = pool[pool != object_index]
    if len(others) == 0:
        raise SizeError("no other object available to draw a negative view from")
    v1, v2 = (int(v) for v in rng.choice(V, 2, replace=False))
    neg = int(others[rng.integers(len(others))])
    v3 = int(rng.integers(V))
    imgs = [store.views[object_index, v1], store.views[object_index, v2], store.views[neg, v3]]
    cloud = store.clouds[object_index]
    if augment:
        imgs = [augment_image(im, rng) for im in imgs]
        cloud = augment_cloud(cloud, rng)
    return TrainingSample(cloud, *imgs, object_index=object_index, negative_index=neg, view_ids=(v1, v2, v3))


@dataclass
class Batch:
    images: np.ndarray  # [3, B, 1, H, W]: anchor view, positive view, negative view
    clouds: np.ndarray  # [B, n, 3]
    labels: np.ndarray  # [B, 3]
    objects: np.ndarray  # [B]


def assemble_batch(store: GeneratedStore, objects, rng: np.random.Generator, augment: bool = True,
                   pool: np.ndarray | None = None) -> Batch:
    samples = [assemble_sample(store, int(i), rng, augment, pool) for i in objects]
    images = np.stack([np.stack([s.img1, s.img2, s.img3]) for s in samples], axis=1)[:, :, None]
    return Batch(images.astype(np.float32), np.stack([s.cloud for s in samples]).astype(np.float32),
                 np.array([s.labels for s in samples]), np.asarray(objects))


# ------------------------------------------------------------------ evaluation pairs

@dataclass
class EvalPairSet:
    """Members are (object, view) for images and (object, -1) for clouds."""

    pairs: list[tuple[tuple[int, int], tuple[int, int], int]]
    kind: str

    @property
    def labels(self) -> np.ndarray:
        return np.array([p[2] for p in self.pairs])


def build_eval_pairs(store: GeneratedStore, kind: str, rng: np.random.Generator,
                     objects: np.ndarray | None = None, multiplier: int = 10) -> EvalPairSet:
    """``multiplier`` x len(objects) distinct pairs, exactly half of them same-object."""
    if kind not in ("2D-2D", "2D-3D"):
        raise ConfigError(f"pair kind must be 2D-2D or 2D-3D, got {kind!r}")
    objects = store.indices("test") if objects is None else np.asarray(objects)
    if len(objects) < 2:
        raise SizeError("need at least two objects to form negative pairs")
    V = store.view_count
    total = multiplier * len(objects)
    n_pos = total // 2
    n_neg = total - n_pos
    m = len(objects)
    if kind == "2D-2D":
        cap_pos, cap_neg = m * V * (V - 1) // 2, m * (m - 1) // 2 * V * V
    else:
        cap_pos, cap_neg = m * V, m * (m - 1) * V
    if n_pos > cap_pos or n_neg > cap_neg:
        raise SizeError(f"cannot form {total} distinct pairs from {m} objects with {V} views")

    def key(a, b, y):
        return (min(a, b), max(a, b), y) if kind == "2D-2D" else (a, b, y)

    seen, pairs = set(), []
    while len(pairs) < n_pos:
        o = int(objects[rng.integers(m)])
        if kind == "2D-2D":
            v1, v2 = (int(v) for v in rng.choice(V, 2, replace=False))
            a, b = (o, v1), (o, v2)
        else:
            a, b = (o, int(rng.integers(V))), (o, -1)
        k = key(a, b, 1)
        if k not in seen:
            seen.add(k)
            pairs.append((a, b, 1))
    while len(pairs) < total:
        i, j = (int(objects[x]) for x in rng.choice(m, 2, replace=False))
        a = (i, int(rng.integers(V)))
        b = (j, int(rng.integers(V))) if kind == "2D-2D" else (j, -1)
        k = key(a, b, 0)
        if k not in seen:
            seen.add(k)
            pairs.append((a, b, 0))
    order = rng.permutation(total)
    return EvalPairSet([pairs[i] for i in order], kind)
