"""Losses, in-batch triplet mining and the optimisation loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergedLoss, NonFinite, NoValidTriplet
from .mesh import EdgeAdjacency
from .model import ForwardOutput, ModelConfig, RisaNet, ShapeBatch
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_vae_part", "l_vae_global", "l_trip_part", "l_trip_global", "total")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 8
    gamma: float = 1e5
    lambda1: float = 1e3
    lambda2: float = 1e2
    lambda3: float = 1e2
    eta: float = 0.3
    epochs: int = 2000
    seed: int = 0
    triplet_reduction: str = "sum"
    patience: int = 20
    tol: float = 1e-4
    early_stop: bool = True
    checkpoint_every: int = 0
    detach_global_target: bool = True

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs) <= 0 or min(self.gamma, self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("lr, batch_size and epochs must be positive; loss weights non-negative")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if self.triplet_reduction not in ("sum", "mean"):
            raise ConfigError("triplet_reduction must be 'sum' or 'mean'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def mine_triplets(labels: Sequence) -> list[tuple[int, int, int]]:
    """Every (anchor, positive, negative) index triple in the batch, lexicographic."""
    out = []
    n = len(labels)
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] != labels[a]:
                    out.append((a, p, q))
    return out


def normalized_distances(x) -> Tensor:
    """Squared Euclidean distances divided by the batch maximum."""
    d = T.pairwise_sq_dist(x)
    if d.data.max() <= 0:
        return d
    return T.div(d, T.maximum(d))


def triplet_loss(x, triplets: Sequence[tuple[int, int, int]], eta: float = 0.3, reduction: str = "sum") -> Tensor:
    if not triplets:
        raise NoValidTriplet("no valid (anchor, positive, negative) triple in the batch")
    d = normalized_distances(x)
    a, p, n = (np.array(c) for c in zip(*triplets))
    hinge = T.relu(T.add(T.sub(d[a, p], d[a, n]), eta))
    return T.mean(hinge) if reduction == "mean" else T.total(hinge)


def part_vae_loss(out: ForwardOutput, mask: np.ndarray, gamma: float) -> Tensor:
    """Batch mean of (1/P_i) sum_p MSE(f, f') + gamma * sum_p KL over present parts."""
    B = mask.shape[0]
    n_present = mask.sum(axis=1).astype(np.float64)
    loss: Tensor = Tensor(0.0)
    for pt in out.parts:
        err = T.mean(T.square(T.sub(pt.recon, pt.target)), axis=(1, 2))
        loss = T.add(loss, T.total(T.mul(err, 1.0 / n_present[pt.rows])))
        if pt.kl is not None and gamma:
            loss = T.add(loss, T.mul(T.total(pt.kl), gamma))
    return T.mul(loss, 1.0 / B)


def global_vae_loss(out: ForwardOutput, gamma: float, detach_target: bool = True) -> Tensor:
    """Batch mean of MSE(fv, fv') + gamma * KL.

    By default the target fv is a constant: letting the reconstruction term
    pull on it collapses fv (and with it the descriptor) towards zero.
    """
    B = out.fv.shape[0]
    target = Tensor(out.fv.data) if detach_target else out.fv
    loss = T.total(T.mean(T.square(T.sub(out.fv_recon, target)), axis=1))
    if out.global_kl is not None and gamma:
        loss = T.add(loss, T.mul(T.total(out.global_kl), gamma))
    return T.mul(loss, 1.0 / B)


def vae_loss(out: ForwardOutput, batch: ShapeBatch, gamma: float,
             detach_target: bool = True) -> tuple[Tensor, Tensor]:
    """(part term, global term) of the VAE objective."""
    part, glob = part_vae_loss(out, batch.mask, gamma), global_vae_loss(out, gamma, detach_target)
    if not (np.isfinite(part.data) and np.isfinite(glob.data)):
        raise NonFinite("VAE loss is not finite")
    return part, glob


@dataclass
class LossTerms:
    vae_part: Tensor
    vae_global: Tensor
    trip_part: Tensor
    trip_global: Tensor
    total: Tensor

    def values(self) -> tuple[float, ...]:
        return tuple(float(t.data) for t in (self.vae_part, self.vae_global, self.trip_part, self.trip_global, self.total))


def total_loss(model: RisaNet, batch: ShapeBatch, cfg: TrainConfig, train: bool = True,
               rng: np.random.Generator | None = None) -> LossTerms:
    out = model.forward(batch, train=train, rng=rng)
    gamma = cfg.gamma if model.config.variational else 0.0
    l_part, l_glob = vae_loss(out, batch, gamma, cfg.detach_global_target)
    triplets = mine_triplets(batch.labels)
    zero = Tensor(0.0)
    if triplets:
        t_part = triplet_loss(out.gv, triplets, cfg.eta, cfg.triplet_reduction)
        t_glob = triplet_loss(out.zv_mu, triplets, cfg.eta, cfg.triplet_reduction)
    else:
        t_part = t_glob = zero
    total = T.add(
        T.add(l_part, T.mul(l_glob, cfg.lambda1)),
        T.add(T.mul(t_part, cfg.lambda2), T.mul(t_glob, cfg.lambda3)),
    )
    return LossTerms(l_part, l_glob, t_part, t_glob, total)


def stratified_batches(labels: Sequence, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle within each sub-class, then deal the sub-classes round-robin into batches."""
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    queues = [list(np.array(groups[k])[rng.permutation(len(groups[k]))]) for k in sorted(groups)]
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(int(q.pop(0)))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


@dataclass
class TrainResult:
    model: RisaNet
    optimizer: T.Adam
    log: list[tuple]
    epochs_run: int


def save_run(path, model: RisaNet, optimizer: T.Adam | None = None, meta: dict | None = None) -> None:
    """Checkpoint plus a JSON sidecar holding the model config and dataset metadata."""
    state = dict(model.state_dict())
    if optimizer is not None:
        state.update(optimizer.state())
    T.save_checkpoint(path, state)
    side = {"model": model.config.to_dict(), **(meta or {})}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def load_run(path, adjacency: EdgeAdjacency) -> tuple[RisaNet, dict]:
    side = json.loads(Path(str(path) + ".json").read_text())
    model = RisaNet(ModelConfig.from_dict(side["model"]), adjacency)
    model.load_state_dict(T.load_checkpoint(path))
    return model, side


def write_log(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0], *(repr(float(v)) for v in r[1:])])


def train(data: ShapeBatch, model_config: ModelConfig, cfg: TrainConfig, adjacency: EdgeAdjacency,
          out_dir=None, meta: dict | None = None, model: RisaNet | None = None,
          callback: Callable[[int, RisaNet, tuple], None] | None = None) -> TrainResult:
    """Minimise the combined VAE + triplet objective with Adam.

    Returns the trained model and one log row per epoch (batch means of the
    unweighted loss terms and of the weighted total).  With ``out_dir`` the
    checkpoint and ``loss_log.csv`` are written there.  ``callback`` is
    called after every epoch with (epoch, model, log row).
    """
    if len(set(data.labels)) < 2:
        raise ConfigError("training needs at least two sub-classes")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = RisaNet(model_config, adjacency, seed=cfg.seed)
    opt = T.Adam(model.params, lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {**(meta or {}), "train": asdict(cfg)}
    rows: list[tuple] = []
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        acc = np.zeros(5)
        batches = stratified_batches(data.labels, cfg.batch_size, rng)
        for idx in batches:
            batch = data.subset(idx)
            with Tape() as tape:
                terms = total_loss(model, batch, cfg, train=True, rng=rng)
            vals = np.array(terms.values())
            if not np.all(np.isfinite(vals)):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            opt.step(T.backward(tape, terms.total))
            acc += vals
        acc /= len(batches)
        rows.append((epoch, *acc.tolist()))
        if callback is not None:
            callback(epoch, model, rows[-1])
        if epoch == 1 or epoch % 50 == 0:
            log.info("epoch %d total %.6g", epoch, acc[4])
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_run(out / "model.ckpt", model, opt, meta)
        if cfg.early_stop and epoch > cfg.patience:
            old = rows[-1 - cfg.patience][5]
            if old != 0 and (old - acc[4]) / abs(old) < cfg.tol:
                log.info("converged at epoch %d", epoch)
                break
    if out is not None:
        save_run(out / "model.ckpt", model, opt, meta)
        write_log(out / "loss_log.csv", rows)
    return TrainResult(model, opt, rows, epoch)


def recompute_total(row: Sequence[float], cfg: TrainConfig) -> float:
    _, vp, vg, tp, tg, _ = row
    return vp + cfg.lambda1 * vg + cfg.lambda2 * tp + cfg.lambda3 * tg
