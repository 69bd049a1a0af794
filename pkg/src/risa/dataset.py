"""Synthetic fine-grained shape families, manifests and the external part loader.

Every part is a subdivided cube deformed in place, so all parts of a
dataset share one connectivity and edge features line up across shapes.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConnectivityMismatch,
    DegenerateDeformation,
    MissingLabels,
    TooFewShapes,
)
from .geomfeat import edge_feature, select_body_part, shape_structure
from .mesh import (
    PartMesh,
    edge_lengths,
    quaternion_to_matrix,
    random_quaternion,
    read_obj,
    subdivided_cube,
    template_counts,
    write_obj,
)
from .model import ShapeBatch

MISSING = "missing"
LABELS_FILE = "labels.csv"
MANIFEST_FILE = "manifest.json"


@dataclass
class ShapeRecord:
    id: str
    label: str
    parts: list  # relative path per part slot, or None when missing
    quaternion: list = field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0])
    split: str = "train"

    @property
    def mask(self) -> list[bool]:
        return [p is not None for p in self.parts]


@dataclass
class DatasetManifest:
    class_name: str
    n_parts: int
    level: int
    shapes: list[ShapeRecord]
    root: Path = field(default=Path("."), compare=False)
    split_ratio: tuple[int, int] = (4, 1)

    @property
    def n_edges(self) -> int:
        return template_counts(self.level)[1]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.shapes]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.shapes]

    def by_split(self, split: str | None) -> list[ShapeRecord]:
        return [s for s in self.shapes if split is None or s.split == split]

    def load_parts(self, shape: ShapeRecord) -> list[PartMesh | None]:
        return [
            None if rel is None else _checked_obj(self.root / rel, self.level, p + 1)
            for p, rel in enumerate(shape.parts)
        ]

    def to_dict(self) -> dict:
        return {
            "class_name": self.class_name,
            "n_parts": self.n_parts,
            "level": self.level,
            "split_ratio": list(self.split_ratio),
            "shapes": [
                {
                    "id": s.id,
                    "label": s.label,
                    "parts": [MISSING if p is None else p for p in s.parts],
                    "quaternion": list(s.quaternion),
                    "split": s.split,
                }
                for s in self.shapes
            ],
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_FILE
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        d = json.loads(path.read_text())
        shapes = [
            ShapeRecord(s["id"], s["label"], [None if p == MISSING else p for p in s["parts"]],
                        [float(q) for q in s["quaternion"]], s["split"])
            for s in d["shapes"]
        ]
        if len({s.id for s in shapes}) != len(shapes):
            raise ValueError(f"{path}: duplicate shape ids")
        return cls(d["class_name"], int(d["n_parts"]), int(d["level"]), shapes, path.parent,
                   tuple(d.get("split_ratio", (4, 1))))


def _checked_obj(path: Path, level: int, part_label: int) -> PartMesh:
    mesh = read_obj(path, part_label)
    template = subdivided_cube(level)
    if mesh.n_edges != template.n_edges or not np.array_equal(mesh.faces, template.faces):
        raise ConnectivityMismatch(
            f"{path}: connectivity differs from the level-{level} template "
            f"({mesh.n_edges} edges, expected {template.n_edges})"
        )
    return mesh


# ------------------------------------------------------------------ families


@dataclass
class PartSpec:
    name: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    center_jitter: float = 0.0
    size_jitter: float = 0.0
    profile: bool = False  # apply the shape-level taper/turn profile along local z
    # per-axis quadratic warp; gives near-symmetric parts well-defined principal axis signs
    skew: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SubclassSpec:
    name: str
    taper: tuple[float, float] = (0.0, 0.0)
    turn: tuple[float, float] = (0.0, 0.0)
    presence: dict = field(default_factory=dict)  # part name -> probability
    scale: dict = field(default_factory=dict)  # part name -> per-axis size multiplier


@dataclass
class FamilySpec:
    name: str
    parts: list[PartSpec]
    subclasses: list[SubclassSpec]
    level: int = 1
    noise: float = 0.002

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        parts = [PartSpec(**p) for p in d["parts"]]
        subs = [SubclassSpec(**s) for s in d["subclasses"]]
        return cls(d["name"], parts, subs, int(d.get("level", 1)), float(d.get("noise", 0.002)))

    @classmethod
    def load(cls, path) -> "FamilySpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def tables3(level: int = 1, noise: float = 0.001) -> FamilySpec:
    """Tables with a top and four legs; sub-classes differ in leg profile."""
    top = PartSpec("top", (0.0, 0.0, 0.75), (1.2, 0.8, 0.06), center_jitter=0.01, size_jitter=0.02,
                   skew=(0.3, 0.3, 0.6))
    legs = [
        PartSpec(f"leg_{tag}", (sx * 0.52, sy * 0.32, 0.36), (0.08, 0.06, 0.72),
                 center_jitter=0.01, size_jitter=0.02, profile=True)
        for tag, sx, sy in (("fl", 1, 1), ("fr", -1, 1), ("bl", 1, -1), ("br", -1, -1))
    ]
    subs = [
        SubclassSpec("straight_leg", taper=(0.0, 0.05), turn=(0.0, 0.05)),
        SubclassSpec("tapered_leg", taper=(0.45, 0.6), turn=(0.0, 0.05)),
        SubclassSpec("turned_leg", taper=(0.0, 0.05), turn=(0.6, 0.9)),
    ]
    return FamilySpec("tables3", [top] + legs, subs, level, noise)


BUILTIN_FAMILIES = {"tables3": tables3}


def _deform(template: PartMesh, part: PartSpec, sub: SubclassSpec, taper: float, turn: float,
            noise: float, rng: np.random.Generator) -> np.ndarray:
    u = template.vertices
    size = np.asarray(part.size, dtype=np.float64) * (1.0 + rng.uniform(-part.size_jitter, part.size_jitter, 3))
    size = size * np.asarray(sub.scale.get(part.name, (1.0, 1.0, 1.0)))
    center = np.asarray(part.center, dtype=np.float64) + rng.uniform(-part.center_jitter, part.center_jitter, 3)
    local = u + np.asarray(part.skew, dtype=np.float64) * (u**2 - 0.25)
    if part.profile:
        t = u[:, 2] + 0.5  # 0 at the bottom, 1 at the top
        radial = (1.0 - taper * (1.0 - t)) * (1.0 + turn * np.sin(np.pi * t))
        local[:, :2] *= radial[:, None]
    pts = center + local * size
    if noise:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts


def generate(spec: FamilySpec, counts, seed: int, out_dir) -> DatasetManifest:
    """Write part meshes, ``manifest.json`` and ``labels.csv`` under ``out_dir``.

    ``counts`` is one int for every sub-class or a per-sub-class sequence.
    """
    if isinstance(counts, int):
        counts = [counts] * len(spec.subclasses)
    if len(counts) != len(spec.subclasses):
        raise ValueError("need one count per sub-class")
    if min(counts) < 2:
        raise TooFewShapes("each sub-class needs at least 2 shapes")
    out = Path(out_dir)
    mesh_dir = out / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    template = subdivided_cube(spec.level)
    shapes = []
    for ci, (sub, n) in enumerate(zip(spec.subclasses, counts)):
        for i in range(n):
            rng = np.random.default_rng([seed, ci, i])
            sid = f"{sub.name}_{i:03d}"
            taper = rng.uniform(*sub.taper)
            turn = rng.uniform(*sub.turn)
            rels = []
            for p, part in enumerate(spec.parts):
                prob = sub.presence.get(part.name, 1.0)
                # draw even when presence is certain so streams stay aligned
                present = rng.random() < prob
                pts = _deform(template, part, sub, taper, turn, spec.noise, rng)
                if not present:
                    rels.append(None)
                    continue
                mesh = template.with_vertices(pts)
                if edge_lengths(mesh).min() <= 1e-6:
                    raise DegenerateDeformation(f"{sid} part {p + 1} has a collapsed edge")
                rel = f"meshes/{sid}_{p + 1}.obj"
                write_obj(out / rel, mesh)
                rels.append(rel)
            shapes.append(ShapeRecord(sid, sub.name, rels))
    manifest = DatasetManifest(spec.name, len(spec.parts), spec.level, shapes, out)
    manifest.save()
    write_labels(manifest)
    return manifest


def write_labels(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else manifest.root / LABELS_FILE
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "split", "qw", "qx", "qy", "qz"])
        for s in manifest.shapes:
            w.writerow([s.id, s.label, s.split, *[repr(float(q)) for q in s.quaternion]])
    return path


def _quat_mul(a, b) -> list[float]:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]


def perturb_rotations(manifest: DatasetManifest, seed: int, out_dir=None) -> DatasetManifest:
    """Rotate every shape (all parts jointly) by its own uniform random rotation.

    Meshes are rewritten under ``out_dir`` (default: in place) and the
    accumulated rotation is recorded as a unit quaternion per shape.
    """
    root = Path(out_dir) if out_dir is not None else manifest.root
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    shapes = []
    for i, s in enumerate(manifest.shapes):
        rng = np.random.default_rng([seed, i])
        q = random_quaternion(rng)
        R = quaternion_to_matrix(q)
        for rel, mesh in zip(s.parts, manifest.load_parts(s)):
            if mesh is not None:
                write_obj(root / rel, mesh.vertices @ R.T, mesh.faces)
        qn = np.asarray(_quat_mul(q, s.quaternion))
        qn /= np.linalg.norm(qn)
        shapes.append(replace(s, quaternion=[float(x) for x in qn], parts=list(s.parts)))
    out = replace(manifest, shapes=shapes, root=root)
    out.save()
    write_labels(out)
    return out


def split(manifest: DatasetManifest, ratio: tuple[int, int] = (4, 1), seed: int = 0) -> DatasetManifest:
    """Stratified train/test split per sub-class."""
    n_train, n_test = ratio
    by_label: dict[str, list[int]] = {}
    for i, s in enumerate(manifest.shapes):
        by_label.setdefault(s.label, []).append(i)
    splits = ["train"] * len(manifest.shapes)
    for ci, label in enumerate(sorted(by_label)):
        idx = by_label[label]
        if len(idx) < n_train + n_test:
            raise TooFewShapes(f"sub-class {label!r} has {len(idx)} shapes, need >= {n_train + n_test}")
        order = np.random.default_rng([seed, ci]).permutation(len(idx))
        k = max(1, int(round(len(idx) * n_test / (n_train + n_test))))
        for j in order[:k]:
            splits[idx[j]] = "test"
    shapes = [replace(s, split=sp) for s, sp in zip(manifest.shapes, splits)]
    return replace(manifest, shapes=shapes, split_ratio=(n_train, n_test))


def load_external(directory, class_name: str | None = None, n_parts: int | None = None,
                  level: int | None = None, mesh_dir: str = "meshes") -> DatasetManifest:
    """Build a manifest from ``<shape>_<part>.obj`` files plus ``labels.csv``.

    ``labels.csv`` needs ``id`` and ``label`` columns; ``split`` and
    ``qw,qx,qy,qz`` are optional.  Absent part files become missing parts.
    """
    root = Path(directory)
    labels_path = root / LABELS_FILE
    if not labels_path.exists():
        raise MissingLabels(f"{labels_path} not found")
    meshes = root / mesh_dir if (root / mesh_dir).is_dir() else root
    with open(labels_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    files: dict[str, dict[int, Path]] = {}
    for f in sorted(meshes.glob("*.obj")):
        sid, _, part = f.stem.rpartition("_")
        if sid and part.isdigit():
            files.setdefault(sid, {})[int(part)] = f
    if n_parts is None:
        n_parts = max((max(parts) for parts in files.values()), default=0)
    if level is None:
        first = next((f for parts in files.values() for f in parts.values()), None)
        if first is None:
            raise ConnectivityMismatch(f"no part meshes found in {meshes}")
        n_edges = read_obj(first).n_edges
        level = next((l for l in range(8) if template_counts(l)[1] == n_edges), None)
        if level is None:
            raise ConnectivityMismatch(f"{first}: {n_edges} edges matches no cube template level")
    shapes = []
    for row in rows:
        sid = row["id"]
        parts = []
        for p in range(1, n_parts + 1):
            f = files.get(sid, {}).get(p)
            if f is None:
                parts.append(None)
                continue
            _checked_obj(f, level, p)
            parts.append(f.relative_to(root).as_posix())
        q = [float(row[k]) for k in ("qw", "qx", "qy", "qz")] if "qw" in row and row["qw"] else [1.0, 0.0, 0.0, 0.0]
        shapes.append(ShapeRecord(sid, row["label"], parts, q, row.get("split") or "train"))
    return DatasetManifest(class_name or root.name, n_parts, level, shapes, root)


# ------------------------------------------------------------------ features


def shape_features(manifest: DatasetManifest, shapes: Sequence[ShapeRecord], body_label: int,
                   feature: str = "scale_sensitive", workers: int = 1) -> ShapeBatch:
    """Edge features, structural features and presence masks for ``shapes``."""
    n_e = manifest.n_edges

    def one(s: ShapeRecord):
        parts = manifest.load_parts(s)
        return (np.stack([edge_feature(m, n_e, feature) for m in parts]), shape_structure(parts, body_label),
                [m is not None for m in parts])

    if workers > 1 and len(shapes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, shapes))
    else:
        rows = [one(s) for s in shapes]
    feats, structs, masks = zip(*rows)
    return ShapeBatch(np.stack(feats), np.stack(structs), np.array(masks), [s.label for s in shapes],
                      [s.id for s in shapes])


def body_label_of(manifest: DatasetManifest) -> int:
    return select_body_part([manifest.load_parts(s) for s in manifest.shapes])


def separability(batch: ShapeBatch) -> tuple[float, float]:
    """Mean intra- and inter-sub-class Euclidean distance of flattened edge features."""
    x = batch.features.reshape(len(batch), -1)
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    lab = np.array(batch.labels)
    same = lab[:, None] == lab[None]
    off = ~np.eye(len(lab), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())
