import numpy as np
import pytest

from crossmodal.mesh_io import TriangleMesh


def cube_mesh(half=1.0):
    v = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)], float)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(v, f)


def uv_sphere(rings=12, segments=16):
    verts = [(0.0, 1.0, 0.0)]
    for i in range(1, rings):
        t = np.pi * i / rings
        for j in range(segments):
            p = 2 * np.pi * j / segments
            verts.append((np.sin(t) * np.cos(p), np.cos(t), np.sin(t) * np.sin(p)))
    verts.append((0.0, -1.0, 0.0))
    faces = [(0, 1 + (j + 1) % segments, 1 + j) for j in range(segments)]
    for i in range(rings - 2):
        for j in range(segments):
            a, b = 1 + i * segments + j, 1 + i * segments + (j + 1) % segments
            faces += [(a, b, b + segments), (a, b + segments, a + segments)]
    last, base = len(verts) - 1, 1 + (rings - 2) * segments
    faces += [(last, base + j, base + (j + 1) % segments) for j in range(segments)]
    return TriangleMesh(np.array(verts), np.array(faces))


@pytest.fixture
def cube():
    return cube_mesh()


@pytest.fixture
def sphere():
    return uv_sphere()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results, key=lambda c: (c[0], len(c), c)):
        ok, detail = results[cid]
        terminalreporter.write_line(f"criterion {cid:<3} {'PASS' if ok else 'FAIL'}  {detail}")
