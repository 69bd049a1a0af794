"""``risa`` command line: gen, train, embed, query, eval, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    BUILTIN_FAMILIES,
    DatasetManifest,
    FamilySpec,
    body_label_of,
    generate,
    perturb_rotations,
    shape_features,
    split,
    write_labels,
)
from .errors import ConfigError, RisaError
from .mesh import subdivided_cube
from .model import ModelConfig
from .retrieval import DescriptorIndex, evaluate, pr_curve, query, tier_image, write_ppm, write_pr_csv
from .train import LOG_COLUMNS, TrainConfig, load_run, train

log = logging.getLogger("risa")

DESCRIPTORS_FILE = "descriptors.csv"


@dataclass
class RunConfig:
    """Top-level JSON config.  ``model`` and ``train`` hold ModelConfig / TrainConfig fields."""

    dataset: str = ""
    checkpoint: str = ""
    out: str = "."
    split: str = "train"
    eval_split: str = "test"
    seed: int = 0
    top_k: int = 5
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        return cfg


def n_workers() -> int:
    env = os.environ.get("RISA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"RISA_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("RISA_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _features(manifest: DatasetManifest, split_name: str | None, feature: str):
    shapes = manifest.by_split(split_name)
    if not shapes:
        raise ConfigError(f"no shapes in split {split_name!r}")
    return shape_features(manifest, shapes, body_label_of(manifest), feature, workers=n_workers())


# ------------------------------------------------------------------ descriptor files


def write_descriptors(path, index: DescriptorIndex) -> None:
    d = index.descriptors.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"d_{j}" for j in range(d)])
        for sid, lab, row in zip(index.ids, index.labels, index.descriptors):
            w.writerow([sid, lab] + [repr(float(v)) for v in row])


def read_descriptors(path) -> DescriptorIndex:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "label"]:
        raise ConfigError(f"{path}: not a descriptor file (header must start with id,label)")
    body = rows[1:]
    desc = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    return DescriptorIndex([r[0] for r in body], [r[1] for r in body], desc).freeze()


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    if args.spec:
        spec = FamilySpec.load(args.spec)
    else:
        spec = BUILTIN_FAMILIES[args.family]()
    manifest = generate(spec, args.count, args.seed, args.out)
    manifest = split(manifest, tuple(args.split), args.seed)
    if args.rotate:
        manifest = perturb_rotations(manifest, args.seed)
    manifest.save()
    write_labels(manifest)
    print(Path(args.out) / "manifest.json")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.dataset:
        cfg.dataset = args.dataset
    if not cfg.dataset:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    tc = TrainConfig.from_dict({"seed": cfg.seed, **cfg.train, **({"seed": args.seed} if args.seed is not None else {})})
    manifest = DatasetManifest.load(cfg.dataset)
    mc = ModelConfig.from_dict({"n_parts": manifest.n_parts, "n_edges": manifest.n_edges, **cfg.model})
    data = _features(manifest, cfg.split, mc.feature)
    out = Path(args.out or cfg.out)
    meta = {"dataset": str(manifest.root.resolve()), "level": manifest.level, "body_label": body_label_of(manifest)}
    result = train(data, mc, tc, subdivided_cube(manifest.level).adjacency, out_dir=out, meta=meta)
    print(f"{out / 'model.ckpt'} epochs={result.epochs_run} total={result.log[-1][5]!r}")
    return 0


def cmd_embed(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    model, _ = load_run(args.checkpoint, subdivided_cube(manifest.level).adjacency)
    split_name = None if args.split == "all" else args.split
    data = _features(manifest, split_name, model.config.feature)
    index = DescriptorIndex(data.ids, data.labels, model.describe(data)).freeze()
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / DESCRIPTORS_FILE
    write_descriptors(out, index)
    print(out)
    return 0


def cmd_query(args) -> int:
    index = read_descriptors(args.descriptors)
    if args.id not in index.ids:
        raise ConfigError(f"query id {args.id!r} is not in {args.descriptors}")
    q = index.descriptors[index.position(args.id)]
    ranked = query(index, q, args.id)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "id", "label", "distance"])
    for r in range(min(args.k, len(ranked))):
        w.writerow([r + 1, ranked.ids[r], ranked.labels[r], repr(float(ranked.distances[r]))])
    return 0


def cmd_eval(args) -> int:
    index = read_descriptors(args.descriptors)
    if args.manifest:
        labels = {s.id: s.label for s in DatasetManifest.load(args.manifest).shapes}
        missing = [i for i in index.ids if i not in labels]
        if missing:
            raise ConfigError(f"{len(missing)} descriptor ids are not in the manifest, e.g. {missing[0]!r}")
        index = DescriptorIndex(index.ids, [labels[i] for i in index.ids], index.descriptors).freeze()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev = evaluate(index)
    ev.save(out / "metrics.json")
    write_pr_csv(out / "pr.csv", pr_curve(index))
    write_ppm(out / "tier.ppm", tier_image(index))
    print(json.dumps(ev.to_dict(), sort_keys=True))
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    lines = [f"# risa report: {run}", ""]
    metrics = run / "metrics.json"
    if metrics.exists():
        m = json.loads(metrics.read_text())
        names = sorted(m["micro"])
        lines += ["| averaging | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
        for avg in ("micro", "macro"):
            lines.append(f"| {avg} | " + " | ".join(f"{m[avg][k]:.4f}" for k in names) + " |")
        lines += ["", f"skipped queries: {m['skipped_queries']}", ""]
    loss_log = run / "loss_log.csv"
    if loss_log.exists():
        with open(loss_log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            first, last = rows[0], rows[-1]
            lines += [f"epochs: {last['epoch']}", "", "| term | first | last |", "|---|---|---|"]
            lines += [f"| {c} | {float(first[c]):.6g} | {float(last[c]):.6g} |" for c in LOG_COLUMNS[1:]]
    if len(lines) == 2:
        raise ConfigError(f"{run}: neither metrics.json nor loss_log.csv found")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="risa", description="Part-aware rigid-invariant 3D shape retrieval.")
    ap.add_argument("--version", action="version", version=f"risa {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic part dataset")
    g.add_argument("--family", choices=sorted(BUILTIN_FAMILIES), default="tables3")
    g.add_argument("--spec", help="family spec JSON (overrides --family)")
    g.add_argument("--count", type=int, default=20, help="shapes per sub-class")
    g.add_argument("--split", type=int, nargs=2, default=(4, 1), metavar=("TRAIN", "TEST"))
    g.add_argument("--rotate", action="store_true", help="give every shape a random rigid rotation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model; writes model.ckpt and loss_log.csv")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--dataset", help="manifest.json or dataset directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default: config 'out')")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write descriptors.csv for a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", help="train, test or all")
    e.add_argument("--out", required=True, help="directory or .csv path")
    e.set_defaults(func=cmd_embed)

    q = sub.add_parser("query", help="rank indexed shapes against one of them")
    q.add_argument("--descriptors", required=True)
    q.add_argument("--id", required=True)
    q.add_argument("--k", type=int, default=5)
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("eval", help="metrics.json, pr.csv and tier.ppm for a descriptor file")
    v.add_argument("--descriptors", required=True)
    v.add_argument("--manifest", help="take labels from this manifest instead of the descriptor file")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarise metrics.json and loss_log.csv of a run directory")
    r.add_argument("run")
    r.add_argument("--out", help="also write the report to this file")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (RisaError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"risa {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
