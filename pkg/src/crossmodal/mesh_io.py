"""OFF mesh reading/writing and basic mesh geometry."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateError, FormatError, MeshIndexError, TruncationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # [V, 3] float64
    faces: np.ndarray  # [F, 3] int64
    label: str | None = None
    face_labels: np.ndarray | None = None  # [F] per-face part ids, optional

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if self.face_labels is not None:
            object.__setattr__(self, "face_labels", np.asarray(self.face_labels, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> TriangleMesh:
        """Raise if any mesh invariant is violated; return self otherwise."""
        if self.n_faces == 0:
            raise DegenerateError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise MeshIndexError(f"face index out of range for {self.n_vertices} vertices")
        if not np.all(np.isfinite(self.vertices)):
            raise FormatError("non-finite vertex coordinate")
        if not np.any(face_areas(self) > 0):
            raise DegenerateError("all faces have zero area")
        if self.face_labels is not None and self.face_labels.shape != (self.n_faces,):
            raise FormatError("face_labels length does not match face count")
        return self

    def with_vertices(self, vertices: np.ndarray) -> TriangleMesh:
        return TriangleMesh(vertices, self.faces, self.label, self.face_labels)


@dataclass
class MeshDataset:
    meshes: list[TriangleMesh] = field(default_factory=list)
    split: str = "train"
    names: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.meshes)

    def __len__(self) -> int:
        return len(self.meshes)

    def __getitem__(self, i: int) -> TriangleMesh:
        return self.meshes[i]


def _tokens(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line


def parse_off(raw: bytes | str, label: str | None = None) -> TriangleMesh:
    """Parse ASCII OFF. Polygons with more than three vertices are fan-triangulated."""
    text = raw.decode("ascii", errors="strict") if isinstance(raw, bytes) else raw
    lines = list(_tokens(text))
    if not lines or not lines[0].startswith("OFF"):
        raise FormatError("missing OFF header")
    header = lines[0][3:].split()
    # some ModelNet files glue the counts onto the header line ("OFF490 518 0")
    if header:
        counts_line, body = header, lines[1:]
    else:
        if len(lines) < 2:
            raise TruncationError("missing counts line")
        counts_line, body = lines[1].split(), lines[2:]
    try:
        nv, nf = int(counts_line[0]), int(counts_line[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"bad counts line: {' '.join(counts_line)!r}") from exc
    if len(body) < nv + nf:
        raise TruncationError(f"declared {nv} vertices and {nf} faces, found {len(body)} records")

    try:
        verts = np.array([[float(t) for t in body[i].split()[:3]] for i in range(nv)], dtype=np.float64)
    except ValueError as exc:
        raise FormatError("unparsable vertex line") from exc
    if verts.shape != (nv, 3):
        raise FormatError("vertex line with fewer than 3 coordinates")

    tris = []
    for line in body[nv:nv + nf]:
        parts = line.split()
        try:
            k = int(parts[0])
            idx = [int(t) for t in parts[1:1 + k]]
        except (IndexError, ValueError) as exc:
            raise FormatError(f"bad face line {line!r}") from exc
        if k < 3 or len(idx) != k:
            raise TruncationError(f"face line declares {k} indices: {line!r}")
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= nv):
        raise MeshIndexError(f"face index out of range for {nv} vertices")
    return TriangleMesh(verts, faces, label).validate()


def serialize_off(mesh: TriangleMesh) -> bytes:
    out = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    out += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out += [f"3 {i} {j} {k}" for i, j, k in mesh.faces.tolist()]
    return ("\n".join(out) + "\n").encode("ascii")


def read_off(path: str | Path, label: str | None = None) -> TriangleMesh:
    return parse_off(Path(path).read_bytes(), label=label)


def write_off(mesh: TriangleMesh, path: str | Path) -> None:
    Path(path).write_bytes(serialize_off(mesh))


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def mesh_centroid(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted mean of face centers."""
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise DegenerateError("mesh has zero total area")
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    return (areas[:, None] * centers).sum(axis=0) / total


def fit_to_view(mesh: TriangleMesh) -> TriangleMesh:
    """Center on the area-weighted centroid and scale so the farthest vertex sits at radius 1."""
    v = mesh.vertices - mesh_centroid(mesh)
    r = np.linalg.norm(v, axis=1).max()
    if not r > 0:
        raise DegenerateError("all vertices coincide")
    return mesh.with_vertices(v / r)


def load_modelnet(root: str | Path, split: str, classes: list[str] | None = None) -> MeshDataset:
    """Load ``root/<class>/<split>/*.off`` in sorted order; unreadable files are skipped."""
    root = Path(root)
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if classes is not None:
        names = [c for c in names if c in classes]
    ds = MeshDataset(split=split)
    for cls in names:
        for path in sorted((root / cls / split).glob("*.off")):
            try:
                ds.meshes.append(read_off(path, label=cls))
                ds.names.append(path.stem)
            except (FormatError, MeshIndexError, DegenerateError, UnicodeDecodeError) as exc:
                log.warning("skipping %s: %s", path, exc)
    return ds
