"""Exhaustive Euclidean retrieval and the NN / FT / ST / NDCG / mAP benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyIndex, EmptyQuerySet

METRICS = ("NN", "FT", "ST", "NDCG", "mAP")
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
RED = (255, 0, 0)
BLUE = (0, 0, 255)
GRAY = (128, 128, 128)


@dataclass
class DescriptorIndex:
    ids: list
    labels: list
    descriptors: np.ndarray
    frozen: bool = field(default=False)

    def __post_init__(self):
        self.ids = list(self.ids)
        self.labels = list(self.labels)
        d = np.asarray(self.descriptors, dtype=np.float64)
        self.descriptors = d.reshape(len(self.ids), -1) if d.size else d.reshape(len(self.ids), d.shape[-1] if d.ndim > 1 else 0)
        if not (len(self.ids) == len(self.labels) == self.descriptors.shape[0]):
            raise ValueError("ids, labels and descriptors must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in index")

    def freeze(self) -> "DescriptorIndex":
        self.descriptors.setflags(write=False)
        self.frozen = True
        return self

    def __len__(self):
        return len(self.ids)

    def position(self, shape_id) -> int:
        return self.ids.index(shape_id)

    def subset(self, keep: Sequence[int]) -> "DescriptorIndex":
        keep = list(keep)
        return DescriptorIndex([self.ids[i] for i in keep], [self.labels[i] for i in keep],
                               self.descriptors[keep]).freeze()


@dataclass
class RankedList:
    ids: list
    labels: list
    distances: np.ndarray

    def __len__(self):
        return len(self.ids)


def query(index: DescriptorIndex, q: np.ndarray, q_id=None) -> RankedList:
    """All indexed shapes except ``q_id``, by ascending distance then ascending id."""
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    d = np.sqrt(((index.descriptors - np.asarray(q, dtype=np.float64)) ** 2).sum(axis=1))
    order = sorted((i for i in range(len(index)) if index.ids[i] != q_id), key=lambda i: (d[i], index.ids[i]))
    return RankedList([index.ids[i] for i in order], [index.labels[i] for i in order], d[order])


def query_metrics(relevant: np.ndarray) -> dict[str, float] | None:
    """Per-query scores from the relevance vector of a ranked list; None if nothing is relevant."""
    rel = np.asarray(relevant, dtype=bool)
    k = int(rel.sum())
    if k == 0:
        return None
    ranks = np.flatnonzero(rel) + 1
    hits = np.cumsum(rel)
    discounts = 1.0 / np.log2(np.arange(2, len(rel) + 2))
    return {
        "NN": float(rel[0]),
        "FT": float(hits[k - 1]) / k,
        "ST": float(hits[min(2 * k, len(rel)) - 1]) / k,
        "NDCG": float(discounts[rel].sum() / discounts[:k].sum()),
        "mAP": float(np.mean(np.arange(1, k + 1) / ranks)),
    }


@dataclass
class Evaluation:
    micro: dict
    macro: dict
    per_query: dict  # id -> metric dict
    skipped_queries: int

    def to_dict(self) -> dict:
        return {"micro": self.micro, "macro": self.macro, "skipped_queries": self.skipped_queries}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _query_set(index: DescriptorIndex, queries) -> list[int]:
    qs = list(range(len(index))) if queries is None else [index.position(q) for q in queries]
    if not qs:
        raise EmptyQuerySet("no queries")
    return qs


def evaluate(index: DescriptorIndex, queries: Sequence | None = None) -> Evaluation:
    """Micro (per-query mean) and macro (mean of per-sub-class means) retrieval scores.

    ``queries`` are ids of indexed shapes (default: every indexed shape).  A
    query whose sub-class has no other member in the index is skipped.
    """
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    per_query, by_label = {}, {}
    skipped = 0
    for qi in _query_set(index, queries):
        ranked = query(index, index.descriptors[qi], index.ids[qi])
        m = query_metrics(np.array(ranked.labels, dtype=object) == index.labels[qi])
        if m is None:
            skipped += 1
            continue
        per_query[index.ids[qi]] = m
        by_label.setdefault(index.labels[qi], []).append(m)
    if not per_query:
        raise EmptyQuerySet("every query was skipped (singleton sub-classes)")
    micro = {k: float(np.mean([m[k] for m in per_query.values()])) for k in METRICS}
    macro = {k: float(np.mean([np.mean([m[k] for m in ms]) for ms in by_label.values()])) for k in METRICS}
    return Evaluation(micro, macro, per_query, skipped)


def pr_curve_single(relevant: np.ndarray) -> np.ndarray:
    """Interpolated precision at the 101 recall levels for one ranked list."""
    rel = np.asarray(relevant, dtype=bool)
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, len(rel) + 1)
    recall = hits / rel.sum()
    # interpolated precision: best precision at any recall >= r
    best = np.maximum.accumulate(precision[::-1])[::-1]
    out = np.zeros_like(RECALL_LEVELS)
    for j, r in enumerate(RECALL_LEVELS):
        idx = np.searchsorted(recall, r - 1e-12)
        out[j] = best[idx] if idx < len(best) else 0.0
    return out


def pr_curve(index: DescriptorIndex, queries: Sequence | None = None) -> np.ndarray:
    """(101, 2) array of (recall, precision) averaged over non-skipped queries."""
    curves = []
    for qi in _query_set(index, queries):
        ranked = query(index, index.descriptors[qi], index.ids[qi])
        rel = np.array(ranked.labels, dtype=object) == index.labels[qi]
        if rel.any():
            curves.append(pr_curve_single(rel))
    if not curves:
        raise EmptyQuerySet("no query has a relevant item")
    return np.column_stack([RECALL_LEVELS, np.mean(curves, axis=0)])


def write_pr_csv(path, curve: np.ndarray) -> None:
    lines = ["recall,precision"] + [f"{r:.2f},{p!r}" for r, p in curve.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def tier_matrix(index: DescriptorIndex) -> tuple[np.ndarray, list[int]]:
    """Tier codes for every (query row, item column) pair of the grouped pool.

    Codes: 3 nearest neighbour, 2 first tier, 1 second tier, 0 otherwise.
    Returns the matrix and the pool order (grouped by sub-class, then id).
    """
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    order = sorted(range(len(index)), key=lambda i: (str(index.labels[i]), str(index.ids[i])))
    pos = {index.ids[i]: r for r, i in enumerate(order)}
    n = len(order)
    codes = np.zeros((n, n), dtype=np.int8)
    for r, qi in enumerate(order):
        ranked = query(index, index.descriptors[qi], index.ids[qi])
        if not len(ranked):
            continue
        k = sum(1 for lab in index.labels if lab == index.labels[qi]) - 1
        for rank, sid in enumerate(ranked.ids):
            c = pos[sid]
            if rank == 0:
                codes[r, c] = 3
            elif rank < k:
                codes[r, c] = 2
            elif rank < 2 * k:
                codes[r, c] = 1
            else:
                break
    return codes, order


def tier_image(index: DescriptorIndex) -> np.ndarray:
    """RGB tier image with 1-pixel gray lines between sub-class groups."""
    codes, order = tier_matrix(index)
    labels = [index.labels[i] for i in order]
    boundaries = [i for i in range(1, len(labels)) if labels[i] != labels[i - 1]]
    palette = np.array([WHITE, BLUE, RED, BLACK], dtype=np.uint8)
    img = palette[codes]
    for b in reversed(boundaries):
        img = np.insert(img, b, GRAY, axis=0)
        img = np.insert(img, b, GRAY, axis=1)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    magic, size, maxval, data = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = map(int, size.split())
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def random_ranking_map(labels: Sequence) -> float:
    """Expected micro mAP of a uniformly random ranking over a pool with these labels.

    For a relevant set of size R among N candidates, E[AP] has the closed form
    (1/R) * sum_{k=1..R} E[k / rank_k] computed here by exact summation over
    the position distribution of the k-th relevant item.
    """
    from math import comb

    labels = list(labels)
    vals = []
    for q, lab in enumerate(labels):
        n = len(labels) - 1
        r = sum(1 for i, l in enumerate(labels) if l == lab and i != q)
        if r == 0:
            continue
        total = 0.0
        for k in range(1, r + 1):
            # P(k-th relevant item sits at rank j) = C(j-1, k-1) C(n-j, r-k) / C(n, r)
            for j in range(k, n - r + k + 1):
                total += k / j * comb(j - 1, k - 1) * comb(n - j, r - k) / comb(n, r)
        vals.append(total / r)
    return float(np.mean(vals))
