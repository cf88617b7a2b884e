"""Triangle meshes and point files: OBJ/PLY/CSV I/O, per-vertex energy, fixtures."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray | None = None  # True marks background (zero-energy) vertices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, bool).reshape(-1)
            if len(self.labels) != len(self.vertices):
                raise MeshError("one label per vertex is required")

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


# -- I/O -----------------------------------------------------------------------

def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class PointFile:
    points: np.ndarray
    colors: np.ndarray | None = None
    energy: np.ndarray | None = None


def read_ply(path) -> PointFile:
    """ASCII PLY with a vertex element holding x y z and optional red green blue and energy."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    props, count, fmt, i = [], None, None, 1
    in_vertex = False
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    if fmt != "ascii":
        raise MeshError(f"{path}: only ascii PLY is supported")
    if count is None or not {"x", "y", "z"} <= set(props):
        raise MeshError(f"{path}: vertex element with x, y, z required")
    data = np.array([[float(x) for x in lines[i + k].split()[: len(props)]] for k in range(count)])
    data = data.reshape(count, len(props))
    col = {p: data[:, j] for j, p in enumerate(props)}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1) if {"red", "green", "blue"} <= set(props) else None
    return PointFile(pts, rgb, col.get("energy"))


def write_ply(path, pf: PointFile) -> None:
    props = ["x", "y", "z"]
    cols = [pf.points]
    if pf.colors is not None:
        props += ["red", "green", "blue"]
        cols.append(np.asarray(pf.colors))
    if pf.energy is not None:
        props.append("energy")
        cols.append(np.asarray(pf.energy).reshape(-1, 1))
    header = ["ply", "format ascii 1.0", f"element vertex {len(pf.points)}"]
    for p in props:
        kind = "uchar" if p in ("red", "green", "blue") else "float"
        header.append(f"property {kind} {p}")
    header.append("end_header")
    rows = []
    table = np.concatenate([np.asarray(c, np.float64) for c in cols], axis=1)
    for r in table:
        vals = [f"{v:.9g}" for v in r[:3]]
        k = 3
        if pf.colors is not None:
            vals += [str(int(round(v))) for v in r[3:6]]
            k = 6
        vals += [f"{v:.9g}" for v in r[k:]]
        rows.append(" ".join(vals))
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_csv_points(path) -> PointFile:
    """CSV with a header naming x, y, z and optionally r, g, b and energy."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"x", "y", "z"} <= set(rows[0]):
        raise MeshError(f"{path}: CSV needs x, y, z columns")

    def column(name):
        return np.array([float(r[name]) for r in rows])

    pts = np.stack([column("x"), column("y"), column("z")], axis=1)
    rgb = np.stack([column(c) for c in "rgb"], axis=1) if {"r", "g", "b"} <= set(rows[0]) else None
    energy = column("energy") if "energy" in rows[0] else None
    return PointFile(pts, rgb, energy)


def write_csv_points(path, pf: PointFile) -> None:
    names = ["x", "y", "z"] + (["r", "g", "b"] if pf.colors is not None else []) + \
        (["energy"] if pf.energy is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(len(pf.points)):
            row = [f"{v:.9g}" for v in pf.points[i]]
            if pf.colors is not None:
                row += [f"{v:.9g}" for v in pf.colors[i]]
            if pf.energy is not None:
                row.append(f"{pf.energy[i]:.9g}")
            w.writerow(row)


def read_points(path) -> PointFile:
    return read_csv_points(path) if Path(path).suffix.lower() == ".csv" else read_ply(path)


def write_points(path, pf: PointFile) -> None:
    if Path(path).suffix.lower() == ".csv":
        write_csv_points(path, pf)
    else:
        write_ply(path, pf)


# -- energy ----------------------------------------------------------------------

def _edges(faces):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0, return_counts=True)


def _edge_face_counts(faces):
    return _edges(faces)[1]


def mean_curvature(mesh: TriMesh) -> np.ndarray:
    """Per-vertex mean-curvature magnitude ``|L x| / (2 A)`` with cotangent weights and
    barycentric vertex areas (a third of each incident triangle).

    Vertices on open boundaries get 0: the cotangent formula does not apply there.
    """
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    lap = np.zeros((n, 3))
    area = np.zeros(n)
    for k in range(3):
        i, j, o = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        a, b = v[i] - v[o], v[j] - v[o]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cot = np.einsum("ij,ij->i", a, b) / np.maximum(cross, 1e-300)
        w = 0.5 * cot[:, None] * (v[j] - v[i])
        np.add.at(lap, i, w)
        np.add.at(lap, j, -w)
    np.add.at(area, f.ravel(), np.repeat(mesh.face_areas() / 3.0, 3))
    h = np.linalg.norm(lap, axis=1) / np.maximum(2.0 * area, 1e-300)
    edges, counts = _edges(f)
    h[np.unique(edges[counts == 1])] = 0.0
    return h


def mesh_energy(mesh: TriMesh, mode: str = "curvature") -> np.ndarray:
    """Per-vertex energy: normalised mean curvature, or 0/1 from background labels."""
    if mode == "label":
        if mesh.labels is None:
            raise MeshError("label mode needs per-vertex labels")
        return np.where(mesh.labels, 0.0, 1.0)
    if mode != "curvature":
        raise MeshError(f"unknown energy mode {mode!r}")
    if np.any(_edge_face_counts(mesh.faces) > 2):
        warnings.warn("non-manifold edges; falling back to uniform energy", RuntimeWarning, stacklevel=2)
        return np.ones(len(mesh.vertices))
    h = mean_curvature(mesh)
    # curvature below round-off (relative to the mesh size) is flat, not a feature to normalise up
    scale = np.ptp(mesh.vertices, axis=0).max()
    h = np.where(h * scale > 1e-9, h, 0.0)
    peak = h.max()
    return h / peak if peak > 0 else h


def surface_samples(mesh: TriMesh, energy: np.ndarray, n: int, seed: int = 0):
    """Area-uniform random surface points with barycentrically interpolated energy."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fi = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    tri = mesh.faces[fi]
    pts = np.einsum("ij,ijk->ik", bary, mesh.vertices[tri])
    e = np.einsum("ij,ij->i", bary, energy[tri])
    return pts, e


# -- fixtures --------------------------------------------------------------------

def grid_plane(n: int = 10, z: float = 0.0, extent=(0.0, 1.0)) -> TriMesh:
    lo, hi = extent
    xs = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(xs, xs)
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces += [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]]
    return TriMesh(verts, np.array(faces))


def sphere(n: int = 1000, radius: float = 1.0) -> TriMesh:
    """Near-uniform sphere triangulation: Fibonacci points joined by their convex hull."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    pts = radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    # orient outward
    centre = pts[faces].mean(axis=1)
    normal = np.cross(pts[faces[:, 1]] - pts[faces[:, 0]], pts[faces[:, 2]] - pts[faces[:, 0]])
    flip = np.einsum("ij,ij->i", normal, centre) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriMesh(pts, faces)


def _subdivided_box(lo, hi, n: int) -> TriMesh:
    """Closed axis-aligned box whose faces are ``n x n`` grids."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts, faces = [], []
    t = np.linspace(0, 1, n)
    for axis in range(3):
        for side in (0, 1):
            u, w = [a for a in range(3) if a != axis]
            base = len(verts)
            for a in t:
                for b in t:
                    p = np.empty(3)
                    p[axis] = lo[axis] if side == 0 else hi[axis]
                    p[u] = lo[u] + a * (hi[u] - lo[u])
                    p[w] = lo[w] + b * (hi[w] - lo[w])
                    verts.append(p)
            for r in range(n - 1):
                for c in range(n - 1):
                    a0 = base + r * n + c
                    faces += [[a0, a0 + 1, a0 + n + 1], [a0, a0 + n + 1, a0 + n]]
    return TriMesh(np.array(verts), np.array(faces))


def room(floor_n: int = 21, box=((0.4, 0.3, 0.0), (0.6, 0.7, 0.3)), box_n: int = 6) -> TriMesh:
    """Floor plane (labelled background) with one box standing on it (labelled object).

    The box faces are separate surface patches, which is all the label energy needs.
    """
    floor = grid_plane(floor_n)
    obj = _subdivided_box(box[0], box[1], box_n)
    verts = np.concatenate([floor.vertices, obj.vertices])
    faces = np.concatenate([floor.faces, obj.faces + len(floor.vertices)])
    labels = np.concatenate([np.ones(len(floor.vertices), bool), np.zeros(len(obj.vertices), bool)])
    return TriMesh(verts, faces, labels)
