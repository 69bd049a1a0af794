"""Closed manifold triangle meshes in template connectivity.

Edges are stored once, as sorted vertex pairs in lexicographic order.  For
every edge the two incident faces are ordered so that the *first* face
traverses the edge from its smaller to its larger endpoint.  Within each
face the counter-clockwise successor of the edge goes to ``n1`` and the
successor of that edge goes to ``n2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateFace,
    InconsistentWinding,
    InvalidRotation,
    NonManifold,
    ObjFormatError,
    ZeroAreaFace,
)

__all__ = [
    "EdgeAdjacency",
    "PartMesh",
    "RigidTransform",
    "build_mesh",
    "subdivided_cube",
    "template_counts",
    "edge_lengths",
    "dihedral_angles",
    "face_normals",
    "signed_volume",
    "apply_rigid",
    "scale_mesh",
    "random_rotation",
    "quaternion_to_matrix",
    "read_obj",
    "write_obj",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EdgeAdjacency:
    """Per-edge neighbourhood used by the edge convolution.

    ``n1[i]`` and ``n2[i]`` hold the first and second adjacent edges of edge
    ``i`` (one from each incident face).  ``faces[i]`` gives the two incident
    faces (first face traverses the edge low -> high) and ``opposite[i]`` the
    vertex opposite the edge in each of them.
    """

    n1: np.ndarray
    n2: np.ndarray
    faces: np.ndarray
    opposite: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.n1.shape[0]

    @cached_property
    def mean_operators(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (E, E) matrices averaging each edge's n1 / n2 neighbours."""
        ops = []
        for idx in (self.n1, self.n2):
            a = np.zeros((idx.shape[0], idx.shape[0]))
            rows = np.arange(idx.shape[0])
            for k in range(idx.shape[1]):
                np.add.at(a, (rows, idx[:, k]), 1.0 / idx.shape[1])
            a.setflags(write=False)
            ops.append(a)
        return ops[0], ops[1]

    def neighbors(self, i: int) -> tuple[int, int, int, int]:
        return (*map(int, self.n1[i]), *map(int, self.n2[i]))


@dataclass(frozen=True)
class PartMesh:
    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    adjacency: EdgeAdjacency = field(repr=False)
    part_label: int = 1

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "PartMesh":
        """Same connectivity, new positions."""
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise ValueError(f"expected vertices of shape {self.vertices.shape}, got {v.shape}")
        return replace(self, vertices=_frozen(v.copy()))


@lru_cache(maxsize=64)
def _topology(faces_bytes: bytes, n_faces: int, n_vertices: int):
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        raise IndexError("face references a vertex index out of range")

    # directed half-edge -> (face, local position)
    directed: dict[tuple[int, int], tuple[int, int]] = {}
    uses: dict[tuple[int, int], int] = {}
    for fi, (a, b, c) in enumerate(faces.tolist()):
        if a == b or b == c or a == c:
            raise DegenerateFace(f"face {fi} repeats a vertex index: {(a, b, c)}")
        for k, (u, v) in enumerate(((a, b), (b, c), (c, a))):
            key = (min(u, v), max(u, v))
            uses[key] = uses.get(key, 0) + 1
            if (u, v) in directed:
                # same directed edge twice: either >2 faces or flipped winding
                continue
            directed[(u, v)] = (fi, k)

    for key, count in uses.items():
        if count != 2:
            raise NonManifold(f"edge {key} is used by {count} faces (expected 2)")
    for u, v in uses:
        if (u, v) not in directed or (v, u) not in directed:
            raise InconsistentWinding(f"edge {(u, v)} is traversed twice in the same direction")

    edges = np.array(sorted(uses), dtype=np.int64).reshape(-1, 2)
    index = {(int(u), int(v)): i for i, (u, v) in enumerate(edges)}

    def eid(u: int, v: int) -> int:
        return index[(u, v) if u < v else (v, u)]

    n_e = len(edges)
    n1 = np.empty((n_e, 2), dtype=np.int64)
    n2 = np.empty((n_e, 2), dtype=np.int64)
    inc = np.empty((n_e, 2), dtype=np.int64)
    opp = np.empty((n_e, 2), dtype=np.int64)
    for i, (u, v) in enumerate(edges.tolist()):
        for side, half in enumerate(((u, v), (v, u))):
            fi, k = directed[half]
            f = faces[fi]
            nxt = int(f[(k + 1) % 3])
            nxt2 = int(f[(k + 2) % 3])
            # face (half[0], half[1], w): successor edge (half[1], w), then (w, half[0])
            n1[i, side] = eid(half[1], nxt2)
            n2[i, side] = eid(nxt2, half[0])
            inc[i, side] = fi
            opp[i, side] = nxt2
            assert nxt == half[1]
    return _frozen(edges), EdgeAdjacency(_frozen(n1), _frozen(n2), _frozen(inc), _frozen(opp))


def build_mesh(vertices, faces, part_label: int = 1) -> PartMesh:
    """Validate a closed, consistently wound triangle mesh and index its edges.

    Raises NonManifold, InconsistentWinding or DegenerateFace.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"vertices must be (V, 3), got {v.shape}")
    if f.ndim != 2 or f.shape[1] != 3:
        raise ValueError(f"faces must be (F, 3) triangles, got {f.shape}")
    f = np.ascontiguousarray(f)
    edges, adj = _topology(f.tobytes(), f.shape[0], v.shape[0])
    return PartMesh(_frozen(v.copy()), _frozen(f.copy()), edges, adj, int(part_label))


# fmt: off
_CUBE_VERTICES = np.array([
    [-0.5, -0.5, -0.5], [0.5, -0.5, -0.5], [0.5, 0.5, -0.5], [-0.5, 0.5, -0.5],
    [-0.5, -0.5, 0.5], [0.5, -0.5, 0.5], [0.5, 0.5, 0.5], [-0.5, 0.5, 0.5],
])
_CUBE_FACES = np.array([
    [0, 2, 1], [0, 3, 2],   # z = -0.5
    [4, 5, 6], [4, 6, 7],   # z = +0.5
    [0, 1, 5], [0, 5, 4],   # y = -0.5
    [2, 3, 7], [2, 7, 6],   # y = +0.5
    [0, 4, 7], [0, 7, 3],   # x = -0.5
    [1, 2, 6], [1, 6, 5],   # x = +0.5
])
# fmt: on


def template_counts(level: int) -> tuple[int, int, int]:
    """(V, E, F) of the subdivided cube at ``level`` without building it."""
    v, e, f = 8, 18, 12
    for _ in range(level):
        v, e, f = v + e, 2 * e + 3 * f, 4 * f
    return v, e, f


@lru_cache(maxsize=8)
def _cube_arrays(level: int) -> tuple[np.ndarray, np.ndarray]:
    verts = _CUBE_VERTICES.copy()
    faces = _CUBE_FACES.copy()
    for _ in range(level):
        mesh = build_mesh(verts, faces)
        mid = {(int(a), int(b)): len(verts) + i for i, (a, b) in enumerate(mesh.edges)}
        verts = np.vstack([verts, 0.5 * (verts[mesh.edges[:, 0]] + verts[mesh.edges[:, 1]])])

        def m(a, b):
            return mid[(a, b) if a < b else (b, a)]

        new_faces = []
        for a, b, c in faces.tolist():
            ab, bc, ca = m(a, b), m(b, c), m(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = np.array(new_faces, dtype=np.int64)
    return _frozen(verts), _frozen(faces)


def subdivided_cube(level: int = 0, part_label: int = 1) -> PartMesh:
    """Unit cube centred at the origin after ``level`` rounds of 1-to-4 midpoint subdivision.

    Midpoints stay on the cube surface.  New vertices are appended in
    canonical edge order, so the result is identical across runs.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    verts, faces = _cube_arrays(int(level))
    return build_mesh(verts, faces, part_label)


def face_normals(mesh: PartMesh, unit: bool = True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if not unit:
        return n
    norm = np.linalg.norm(n, axis=1)
    scale = np.abs(v).max() if v.size else 1.0
    bad = norm <= 1e-14 * max(scale, 1.0) ** 2
    if bad.any():
        raise ZeroAreaFace(f"face {int(np.flatnonzero(bad)[0])} has zero area")
    return n / norm[:, None]


def edge_lengths(mesh: PartMesh) -> np.ndarray:
    v = mesh.vertices
    return np.linalg.norm(v[mesh.edges[:, 1]] - v[mesh.edges[:, 0]], axis=1)


def dihedral_angles(mesh: PartMesh) -> np.ndarray:
    """Per-edge dihedral angle in [0, 2*pi): flat = pi, convex < pi, concave > pi."""
    normals = face_normals(mesh)
    adj = mesh.adjacency
    na = normals[adj.faces[:, 0]]
    nb = normals[adj.faces[:, 1]]
    # the first face runs along the edge from edges[:, 0] to edges[:, 1]
    d = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    e_hat = d / np.linalg.norm(d, axis=1)[:, None]
    sin_t = np.einsum("ij,ij->i", np.cross(na, nb), e_hat)
    cos_t = np.einsum("ij,ij->i", na, nb)
    theta = np.pi - np.arctan2(sin_t, cos_t)
    return np.where(theta >= 2 * np.pi, theta - 2 * np.pi, theta)


def signed_volume(mesh: PartMesh) -> float:
    """Enclosed volume via the divergence theorem (positive for outward winding)."""
    v = mesh.vertices
    f = mesh.faces
    return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidRotation("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), rtol=0, atol=1e-12) or abs(np.linalg.det(r) - 1) > 1e-12:
            raise InvalidRotation("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r.copy()))
        object.__setattr__(self, "translation", _frozen(t.copy()))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalised first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def random_rotation(seed=None, translation_scale: float = 0.0) -> RigidTransform:
    """Uniform SO(3) rotation from a normalised 4D Gaussian quaternion.

    ``seed`` may be an int or a ``numpy.random.Generator``.  A nonzero
    ``translation_scale`` adds a Gaussian translation with that std.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = random_quaternion(rng)
    t = rng.standard_normal(3) * translation_scale if translation_scale else np.zeros(3)
    return RigidTransform(quaternion_to_matrix(q), t)


def apply_rigid(mesh: PartMesh, transform: RigidTransform) -> PartMesh:
    return mesh.with_vertices(transform.apply(mesh.vertices))


def scale_mesh(mesh: PartMesh, s: float) -> PartMesh:
    return mesh.with_vertices(mesh.vertices * s)


def write_obj(path, mesh_or_vertices, faces=None) -> None:
    """Write ``v``/``f`` lines only, 1-based, with round-trip float precision."""
    if faces is None:
        vertices, faces = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        vertices = mesh_or_vertices
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path, part_label: int = 1) -> PartMesh:
    """Read the triangle-only OBJ subset written by :func:`write_obj`."""
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) != 3:
                raise ObjFormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append([float(x) for x in rest])
        elif tag == "f":
            if len(rest) != 3:
                raise ObjFormatError(f"{path}:{lineno}: only triangles are supported")
            if any("/" in tok for tok in rest):
                raise ObjFormatError(f"{path}:{lineno}: texture/normal indices are not supported")
            faces.append([int(tok) - 1 for tok in rest])
        else:
            raise ObjFormatError(f"{path}:{lineno}: unsupported record {tag!r}")
    return build_mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), part_label)
