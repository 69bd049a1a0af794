"""Part VAEs, part/geometry attention, geometry/structure attention and the global VAE."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import AllPartsMissing, ConfigError, ShapeMismatch
from .geomfeat import FEATURE_CHANNELS, STRUCT_DIM
from .mesh import EdgeAdjacency
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_parts: int
    n_edges: int
    d_z: int = 64
    d_s: int = 64
    d_h: int = 64
    enc_widths: tuple[int, ...] = (16, 32, 64)
    global_widths: tuple[int, ...] = (512, 256, 128)
    geo_hidden: int = 32
    struct_hidden: int = 16
    variational: bool = True
    structure: bool = True
    feature: str = "scale_sensitive"
    share_part_weights: bool = False
    # multiplier on the Glorot init of the posterior (mu / logvar) heads
    head_init_scale: float = 1e-3

    def __post_init__(self):
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.global_widths = tuple(int(w) for w in self.global_widths)
        dims = (self.n_parts, self.n_edges, self.d_z, self.d_s, self.d_h, self.geo_hidden, self.struct_hidden)
        if min(dims) < 1 or not self.enc_widths or not self.global_widths or min(self.enc_widths + self.global_widths) < 1:
            raise ConfigError("all model dimensions must be >= 1 and width lists non-empty")
        if not self.head_init_scale > 0:
            raise ConfigError("head_init_scale must be positive")
        if self.feature not in FEATURE_CHANNELS:
            raise ConfigError(f"unknown feature kind {self.feature!r}")

    @property
    def in_channels(self) -> int:
        return FEATURE_CHANNELS[self.feature]

    @property
    def fv_dim(self) -> int:
        return self.n_parts * (self.d_z + STRUCT_DIM) if self.structure else self.n_parts * self.d_z

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["global_widths"] = list(self.global_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ShapeBatch:
    """Features of B shapes: (B, P, E, C) edge features, (B, P, 11) structure, (B, P) presence."""

    features: np.ndarray
    structure: np.ndarray
    mask: np.ndarray
    labels: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.shape[:2] != self.mask.shape or self.structure.shape[:2] != self.mask.shape:
            raise ShapeMismatch("features, structure and mask disagree on (B, P)")

    def __len__(self):
        return self.mask.shape[0]

    def subset(self, idx) -> "ShapeBatch":
        idx = list(idx)
        return ShapeBatch(
            self.features[idx],
            self.structure[idx],
            self.mask[idx],
            [self.labels[i] for i in idx] if self.labels else [],
            [self.ids[i] for i in idx] if self.ids else [],
        )


@dataclass
class PartTerms:
    part: int
    rows: np.ndarray  # batch rows in which the part is present
    target: np.ndarray
    recon: Tensor
    mu: Tensor
    logvar: Tensor | None
    kl: Tensor | None  # per-row KL, shape (len(rows),)


@dataclass
class ForwardOutput:
    z: Tensor  # (B, P, d_z), zero rows for missing parts
    alpha: Tensor  # (B, P)
    gv: Tensor  # (B, P * d_z)
    weights: Tensor | None  # (B, 2) = (w_g, w_s); None with structure off
    fv: Tensor
    fv_recon: Tensor
    zv_mu: Tensor
    zv_logvar: Tensor | None
    global_kl: Tensor | None  # (B,)
    parts: list[PartTerms]

    @property
    def descriptor(self) -> np.ndarray:
        return self.zv_mu.data


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class RisaNet:
    """All learnable tensors plus batch-norm buffers, and the forward pass."""

    def __init__(self, config: ModelConfig, adjacency: EdgeAdjacency, seed: int = 0):
        if adjacency.n_edges != config.n_edges:
            raise ShapeMismatch(f"adjacency has {adjacency.n_edges} edges, config says {config.n_edges}")
        self.config = config
        self.adjacency = adjacency
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def _linear(self, rng, name: str, n_out: int, n_in: int, bias: bool = True, scale: float = 1.0) -> None:
        self._param(f"{name}/W", scale * _glorot(rng, n_out, n_in))
        if bias:
            self._param(f"{name}/b", np.zeros(n_out))

    def _conv(self, rng, name: str, c_out: int, c_in: int, bn: bool) -> None:
        for w in ("W_e", "W_n1", "W_n2"):
            self._param(f"{name}/{w}", _glorot(rng, c_out, c_in))
        self._param(f"{name}/b", np.zeros(c_out))
        if bn:
            self._param(f"{name}/bn_gamma", np.ones(c_out))
            self._param(f"{name}/bn_beta", np.zeros(c_out))
            self.buffers[f"{name}/bn_mean"] = np.zeros(c_out)
            self.buffers[f"{name}/bn_var"] = np.ones(c_out)

    def part_prefix(self, p: int) -> str:
        return "partvae" if self.config.share_part_weights else f"partvae{p}"

    def _init(self, rng: np.random.Generator) -> None:
        cfg = self.config
        n_vaes = 1 if cfg.share_part_weights else cfg.n_parts
        enc = (cfg.in_channels,) + cfg.enc_widths
        flat = cfg.n_edges * cfg.enc_widths[-1]
        for p in range(n_vaes):
            pre = self.part_prefix(p)
            for k in range(len(cfg.enc_widths)):
                self._conv(rng, f"{pre}/enc{k}", enc[k + 1], enc[k], bn=True)
            self._linear(rng, f"{pre}/mu", cfg.d_z, flat, scale=cfg.head_init_scale)
            if cfg.variational:
                self._linear(rng, f"{pre}/logvar", cfg.d_z, flat, scale=cfg.head_init_scale)
            self._linear(rng, f"{pre}/dec_fc", flat, cfg.d_z)
            dec = enc[::-1]
            for k in range(len(cfg.enc_widths)):
                self._conv(rng, f"{pre}/dec{k}", dec[k + 1], dec[k], bn=k < len(cfg.enc_widths) - 1)
        for p in range(cfg.n_parts):
            self._linear(rng, f"attn/K{p}", cfg.d_h, cfg.d_z, bias=False)
            self._linear(rng, f"attn/Q{p}", cfg.d_h, cfg.d_z, bias=False)
        if cfg.structure:
            self._linear(rng, "geostruct/F1", cfg.geo_hidden, cfg.n_parts * cfg.d_z)
            self._linear(rng, "geostruct/F2", 1, cfg.geo_hidden)
            self._linear(rng, "geostruct/G1", cfg.struct_hidden, cfg.n_parts * STRUCT_DIM)
            self._linear(rng, "geostruct/G2", 1, cfg.struct_hidden)
        widths = (cfg.fv_dim,) + cfg.global_widths
        for k in range(len(cfg.global_widths)):
            self._linear(rng, f"global/enc{k}", widths[k + 1], widths[k])
        self._linear(rng, "global/mu", cfg.d_s, widths[-1], scale=cfg.head_init_scale)
        if cfg.variational:
            self._linear(rng, "global/logvar", cfg.d_s, widths[-1], scale=cfg.head_init_scale)
        dec = (cfg.d_s,) + cfg.global_widths[::-1] + (cfg.fv_dim,)
        for k in range(len(dec) - 1):
            self._linear(rng, f"global/dec{k}", dec[k + 1], dec[k])

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state) -> None:
        for k, v in self.params.items():
            arr = np.asarray(state[f"param/{k}"], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape} != {v.data.shape}")
            v.data = arr.copy()
        for k in self.buffers:
            self.buffers[k] = np.array(state[f"buffer/{k}"], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # --------------------------------------------------------------- layers

    def _lin(self, x, name: str) -> Tensor:
        b = self.params.get(f"{name}/b")
        return T.fc(x, self.params[f"{name}/W"], b)

    def _conv_layer(self, x, name: str, train: bool, act: bool = True) -> Tensor:
        P = self.params
        y = T.edge_conv(x, self.adjacency, P[f"{name}/W_e"], P[f"{name}/W_n1"], P[f"{name}/W_n2"], P[f"{name}/b"])
        if f"{name}/bn_gamma" in P:
            y = T.batch_norm(y, P[f"{name}/bn_gamma"], P[f"{name}/bn_beta"],
                             self.buffers[f"{name}/bn_mean"], self.buffers[f"{name}/bn_var"], train)
        return T.leaky_relu(y) if act else y

    def _sample(self, mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(mu.shape)
        return T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), eps))

    # ------------------------------------------------------------- forward

    def partvae_forward(self, p: int, f: np.ndarray, train: bool = False, rng=None):
        """Encode/decode one part for a (n, E, C) stack of its edge features.

        Returns (z, mu, logvar, reconstruction, per-row KL); logvar and KL are
        None for the plain autoencoder.
        """
        cfg = self.config
        if f.ndim != 3 or f.shape[1:] != (cfg.n_edges, cfg.in_channels):
            raise ShapeMismatch(f"part features must be (n, {cfg.n_edges}, {cfg.in_channels}), got {f.shape}")
        pre = self.part_prefix(p)
        n_layers = len(cfg.enc_widths)
        h: Tensor = Tensor(f)
        for k in range(n_layers):
            h = self._conv_layer(h, f"{pre}/enc{k}", train)
        flat = T.reshape(h, (f.shape[0], -1))
        mu = self._lin(flat, f"{pre}/mu")
        logvar = kl = None
        z = mu
        if cfg.variational:
            logvar = self._lin(flat, f"{pre}/logvar")
            kl = T.kl_gaussian(mu, logvar, axis=1)
            if train:
                z = self._sample(mu, logvar, rng)
        d = T.reshape(self._lin(z, f"{pre}/dec_fc"), (f.shape[0], cfg.n_edges, cfg.enc_widths[-1]))
        for k in range(n_layers):
            d = self._conv_layer(d, f"{pre}/dec{k}", train, act=k < n_layers - 1)
        return z, mu, logvar, d, kl

    def part_geo_attention(self, z: Tensor, mask: np.ndarray) -> Tensor:
        """Softmax of key/query dot products, restricted to present parts."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise AllPartsMissing("a shape has no present parts")
        n_parts = z.shape[1]
        zs = [z[:, p] for p in range(n_parts)]
        keys = [T.fc(zs[p], self.params[f"attn/K{p}/W"]) for p in range(n_parts)]
        query = T.fc(zs[0], self.params["attn/Q0/W"])
        for p in range(1, n_parts):
            query = T.add(query, T.fc(zs[p], self.params[f"attn/Q{p}/W"]))
        scores = T.stack([T.total(T.mul(keys[p], query), axis=1) for p in range(n_parts)], axis=1)
        return T.softmax(scores, mask)

    def geo_struct_attention(self, gv, sv) -> Tensor:
        """(B, 2) softmax weights of the geometric vs structural blocks."""
        cfg = self.config
        gv, sv = T.as_tensor(gv), T.as_tensor(sv)
        if gv.shape[-1] != cfg.n_parts * cfg.d_z or sv.shape[-1] != cfg.n_parts * STRUCT_DIM:
            raise ShapeMismatch("geo/struct attention input widths do not match the config")
        fg = self._lin(T.leaky_relu(self._lin(gv, "geostruct/F1")), "geostruct/F2")
        gs = self._lin(T.leaky_relu(self._lin(sv, "geostruct/G1")), "geostruct/G2")
        return T.softmax(T.concat([fg, gs], axis=1))

    def global_vae_forward(self, fv, train: bool = False, rng=None):
        cfg = self.config
        fv = T.as_tensor(fv)
        if fv.shape[-1] != cfg.fv_dim:
            raise ShapeMismatch(f"global feature width {fv.shape[-1]} != {cfg.fv_dim}")
        h = fv
        for k in range(len(cfg.global_widths)):
            h = T.leaky_relu(self._lin(h, f"global/enc{k}"))
        mu = self._lin(h, "global/mu")
        logvar = kl = None
        z = mu
        if cfg.variational:
            logvar = self._lin(h, "global/logvar")
            kl = T.kl_gaussian(mu, logvar, axis=1)
            if train:
                z = self._sample(mu, logvar, rng)
        n_dec = len(cfg.global_widths) + 1
        d = z
        for k in range(n_dec):
            d = self._lin(d, f"global/dec{k}")
            if k < n_dec - 1:
                d = T.leaky_relu(d)
        return z, mu, logvar, d, kl

    def forward(self, batch: ShapeBatch, train: bool = False, rng: np.random.Generator | None = None) -> ForwardOutput:
        cfg = self.config
        if train and cfg.variational and rng is None:
            raise ValueError("training-mode forward of a VAE needs an rng for sampling")
        B = len(batch)
        if batch.features.shape[1:] != (cfg.n_parts, cfg.n_edges, cfg.in_channels):
            raise ShapeMismatch(f"batch features {batch.features.shape[1:]} do not match the config")
        mask = batch.mask
        if not mask.any(axis=1).all():
            raise AllPartsMissing("a shape has no present parts")

        parts: list[PartTerms] = []
        z_cols = []
        for p in range(cfg.n_parts):
            rows = np.flatnonzero(mask[:, p])
            if rows.size == 0:
                z_cols.append(Tensor(np.zeros((B, cfg.d_z))))
                continue
            target = batch.features[rows, p]
            z, mu, logvar, recon, kl = self.partvae_forward(p, target, train, rng)
            parts.append(PartTerms(p, rows, target, recon, mu, logvar, kl))
            # downstream blocks see the posterior mean; samples only drive the decoder
            z_cols.append(T.scatter_rows(mu, rows, B))
        z_all = T.stack(z_cols, axis=1)

        alpha = self.part_geo_attention(z_all, mask)
        weighted = T.mul(z_all, T.reshape(alpha, (B, cfg.n_parts, 1)))
        gv = T.reshape(weighted, (B, cfg.n_parts * cfg.d_z))

        weights = None
        if cfg.structure:
            sv = batch.structure
            weights = self.geo_struct_attention(gv, sv.reshape(B, -1))
            w_g = T.reshape(weights[:, 0], (B, 1, 1))
            w_s = T.reshape(weights[:, 1], (B, 1, 1))
            fv3 = T.concat([T.mul(weighted, w_g), T.mul(Tensor(sv), w_s)], axis=2)
            fv = T.reshape(fv3, (B, cfg.fv_dim))
        else:
            fv = gv

        _, zv_mu, zv_logvar, fv_recon, gkl = self.global_vae_forward(fv, train, rng)
        return ForwardOutput(z_all, alpha, gv, weights, fv, fv_recon, zv_mu, zv_logvar, gkl, parts)

    def describe(self, batch: ShapeBatch, chunk: int = 256) -> np.ndarray:
        """Eval-mode descriptors (GlobalVAE latent means), shape (B, d_s)."""
        out = []
        for s in range(0, len(batch), chunk):
            out.append(self.forward(batch.subset(range(s, min(s + chunk, len(batch)))), train=False).descriptor)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.d_s))


def stack_shapes(features: Sequence[np.ndarray], structure: Sequence[np.ndarray], mask: Sequence,
                 labels=None, ids=None) -> ShapeBatch:
    return ShapeBatch(np.stack(features), np.stack(structure), np.stack(mask), list(labels or []), list(ids or []))
