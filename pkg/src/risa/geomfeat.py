"""Per-part edge features and the 11-number structural descriptor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConnectivityMismatch, DegenerateGeometry, NoCommonPart
from .mesh import PartMesh, dihedral_angles, edge_lengths, face_normals, signed_volume

STRUCT_DIM = 11
MOMENT_EPS = 1e-12
CENTER_EPS = 1e-9

FEATURE_CHANNELS = {"scale_sensitive": 2, "scale_invariant": 5}


def base_feature(part: PartMesh | None, n_edges: int | None = None) -> np.ndarray:
    """E x 2 matrix of (edge length, dihedral angle); zeros for a missing part."""
    if part is None:
        if n_edges is None:
            raise ValueError("n_edges is required for a missing part")
        return np.zeros((n_edges, 2))
    if n_edges is not None and part.n_edges != n_edges:
        raise ConnectivityMismatch(f"part has {part.n_edges} edges, template has {n_edges}")
    return np.column_stack([edge_lengths(part), dihedral_angles(part)])


def scale_invariant_feature(part: PartMesh | None, n_edges: int | None = None) -> np.ndarray:
    """E x 5 MeshCNN-style edge feature, invariant to uniform scaling.

    Columns: dihedral angle, the two angles opposite the edge, and the two
    edge-length / triangle-height ratios.  Each pair is sorted so the
    feature does not depend on which incident face comes first.
    """
    if part is None:
        if n_edges is None:
            raise ValueError("n_edges is required for a missing part")
        return np.zeros((n_edges, 5))
    if n_edges is not None and part.n_edges != n_edges:
        raise ConnectivityMismatch(f"part has {part.n_edges} edges, template has {n_edges}")
    v = part.vertices
    a = v[part.edges[:, 0]]
    b = v[part.edges[:, 1]]
    ab = b - a
    length = np.linalg.norm(ab, axis=1)
    angles, ratios = [], []
    for side in range(2):
        o = v[part.adjacency.opposite[:, side]]
        oa, ob = a - o, b - o
        cos = np.einsum("ij,ij->i", oa, ob) / (np.linalg.norm(oa, axis=1) * np.linalg.norm(ob, axis=1))
        angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
        height = np.linalg.norm(np.cross(ab, o - a), axis=1) / length
        ratios.append(length / height)
    angles = np.sort(np.column_stack(angles), axis=1)
    ratios = np.sort(np.column_stack(ratios), axis=1)
    return np.column_stack([dihedral_angles(part), angles, ratios])


def edge_feature(part: PartMesh | None, n_edges: int | None = None, kind: str = "scale_sensitive") -> np.ndarray:
    if kind == "scale_sensitive":
        return base_feature(part, n_edges)
    if kind == "scale_invariant":
        return scale_invariant_feature(part, n_edges)
    raise ValueError(f"unknown edge feature kind {kind!r}")


@dataclass(frozen=True)
class PrincipalFrame:
    axes: np.ndarray  # rows are unit axes, descending eigenvalue
    eigenvalues: np.ndarray
    centroid: np.ndarray


def _weighted_points(part: PartMesh, weighting: str) -> tuple[np.ndarray, np.ndarray]:
    if weighting == "vertex":
        pts = part.vertices
        return pts, np.full(len(pts), 1.0 / len(pts))
    if weighting == "area":
        v, f = part.vertices, part.faces
        pts = v[f].mean(axis=1)
        area = 0.5 * np.linalg.norm(face_normals(part, unit=False), axis=1)
        return pts, area / area.sum()
    raise ValueError(f"unknown weighting {weighting!r}")


def principal_frame(part: PartMesh, weighting: str = "vertex") -> PrincipalFrame:
    """PCA of the part's point distribution with deterministic axis signs.

    Each axis is oriented so the third central moment of the projections is
    non-negative; when that moment vanishes the largest-magnitude component
    of the axis is made positive instead.
    """
    pts, w = _weighted_points(part, weighting)
    centroid = w @ pts
    d = pts - centroid
    cov = (d * w[:, None]).T @ d
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    axes = evecs[:, order].T.copy()
    scale = max(float(evals[0]), 1e-300)
    if evals[1] <= 1e-12 * scale or evals[0] <= 0:
        raise DegenerateGeometry("point covariance has rank < 2")
    for k in range(3):
        proj = d @ axes[k]
        moment = float(w @ proj**3)
        if abs(moment) >= MOMENT_EPS:
            flip = moment < 0
        else:
            j = int(np.argmax(np.abs(axes[k])))
            flip = axes[k, j] < 0
        if flip:
            axes[k] = -axes[k]
    return PrincipalFrame(axes, evals, centroid)


def select_body_part(shapes: Sequence[Sequence[PartMesh | None]]) -> int:
    """1-based label of the part present in every shape with the largest mean volume."""
    if not shapes:
        raise NoCommonPart("no shapes given")
    n_parts = len(shapes[0])
    common = [p for p in range(n_parts) if all(s[p] is not None for s in shapes)]
    if not common:
        raise NoCommonPart("no part label is present in every shape")
    best, best_vol = None, -np.inf
    for p in common:
        vol = float(np.mean([signed_volume(s[p]) for s in shapes]))
        if vol > best_vol:
            best, best_vol = p, vol
    return best + 1


def structural_feature(
    part: PartMesh | None,
    body: PartMesh,
    present: bool = True,
    body_frame: PrincipalFrame | None = None,
    weighting: str = "vertex",
) -> np.ndarray:
    """Existence, offset and orientation of ``part`` relative to the body part.

    Layout: [exists, centre distance, |cos| of the part's 1st axis against the
    body's three axes, same for the 2nd axis, unit offset direction expressed
    in the body frame].
    """
    sv = np.zeros(STRUCT_DIM)
    if part is None or not present:
        return sv
    bf = body_frame if body_frame is not None else principal_frame(body, weighting)
    pf = bf if part is body else principal_frame(part, weighting)
    offset = pf.centroid - bf.centroid
    dist = float(np.linalg.norm(offset))
    sv[0] = 1.0
    sv[1] = dist
    sv[2:5] = np.abs(bf.axes @ pf.axes[0])
    sv[5:8] = np.abs(bf.axes @ pf.axes[1])
    if dist >= CENTER_EPS:
        sv[8:11] = bf.axes @ (offset / dist)
    return sv


def shape_structure(parts: Sequence[PartMesh | None], body_label: int, weighting: str = "vertex") -> np.ndarray:
    """P x 11 structural features of one shape."""
    body = parts[body_label - 1]
    if body is None:
        raise NoCommonPart(f"body part {body_label} is missing from this shape")
    bf = principal_frame(body, weighting)
    return np.stack([structural_feature(p, body, p is not None, bf, weighting) for p in parts])
