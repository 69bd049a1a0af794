"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations only record when a :class:`Tape` is active and at least one
input requires a gradient, so inference runs as plain numpy.

    with Tape() as tape:
        loss = ...
    grads = backward(tape, loss)
    grads[w]          # zeros if ``w`` did not influence ``loss``
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np

from .errors import CycleDetected, NonFinite, ShapeMismatch

LEAKY_SLOPE = 0.02
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    # arithmetic sugar; everything routes through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._pos: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, t: Tensor) -> None:
        self._pos[id(t)] = len(self.nodes)
        self.nodes.append(t)

    def position(self, t: Tensor) -> int | None:
        return self._pos.get(id(t))


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _ACTIVE[-1].record(out)
    return out


class Gradients(Mapping):
    """Gradient arrays keyed by tensor identity; unseen tensors map to zeros."""

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._grads

    def __iter__(self):
        return iter(self._keep.values())

    def __len__(self):
        return len(self._grads)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss`` over the recorded tape."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    keep: dict[int, Tensor] = {}
    if not loss.requires_grad:
        return Gradients(grads, keep)
    start = tape.position(loss)
    if start is None:
        raise ValueError("loss was not recorded on this tape")
    grads[id(loss)] = np.ones_like(loss.data)
    keep[id(loss)] = loss
    for i in range(start, -1, -1):
        node = tape.nodes[i]
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pos = tape.position(parent)
            if pos is not None and pos >= i:
                raise CycleDetected(f"node {i} depends on a later node {pos}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                keep[key] = parent
    return Gradients(grads, keep)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**2, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def total(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(total(a, axis, keepdims), 1.0 / n)


def maximum(a) -> Tensor:
    """Largest entry; the gradient goes to the first arg-max."""
    a = as_tensor(a)
    flat = int(np.argmax(a.data))

    def bw(g):
        out = np.zeros_like(a.data)
        out.flat[flat] = g
        return (out,)

    return _make(a.data.flat[flat], (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _make(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def scatter_rows(src, rows: np.ndarray, n: int) -> Tensor:
    """Place ``src`` rows at ``rows`` of an otherwise zero tensor with ``n`` rows."""
    src = as_tensor(src)
    out = np.zeros((n,) + src.shape[1:])
    out[rows] = src.data
    return _make(out, (src,), lambda g: (g[rows],))


# --------------------------------------------------------------------- layers


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    return _make(np.where(pos, x.data, slope * x.data), (x,), lambda g: (np.where(pos, g, slope * g),))


def fc(x, weight, bias=None) -> Tensor:
    """y = x W^T + b for ``x`` of shape (..., in) and ``weight`` (out, in)."""
    x, w = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"fc input width {x.shape[-1]} != weight in-dim {w.shape[1]}")
    out = x.data @ w.data.T
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw)


def edge_conv(x, adjacency, w_e, w_n1, w_n2, bias) -> Tensor:
    """Edge convolution over the two first- and two second-adjacent edges.

    ``x`` is (B, E, C_in); weights are (C_out, C_in) and ``bias`` (C_out,), so
    each output row is W_e x_i + W_n1 mean(x[N1(i)]) + W_n2 mean(x[N2(i)]) + b.
    """
    x = as_tensor(x)
    w_e, w_n1, w_n2, bias = map(as_tensor, (w_e, w_n1, w_n2, bias))
    if x.data.ndim != 3:
        raise ShapeMismatch(f"edge_conv expects (B, E, C), got {x.shape}")
    n1, n2 = adjacency.n1, adjacency.n2
    if x.shape[1] != n1.shape[0]:
        raise ShapeMismatch(f"input has {x.shape[1]} edges, adjacency has {n1.shape[0]}")
    c_out, c_in = w_e.shape
    if x.shape[2] != c_in or w_n1.shape != (c_out, c_in) or w_n2.shape != (c_out, c_in) or bias.shape != (c_out,):
        raise ShapeMismatch("edge_conv parameter shapes do not match the input channels")
    a1, a2 = adjacency.mean_operators
    m1 = np.matmul(a1, x.data)
    m2 = np.matmul(a2, x.data)
    out = x.data @ w_e.data.T + m1 @ w_n1.data.T + m2 @ w_n2.data.T + bias.data

    def bw(g):
        gx = g @ w_e.data
        gx += np.matmul(a1.T, g @ w_n1.data)
        gx += np.matmul(a2.T, g @ w_n2.data)
        g2 = g.reshape(-1, c_out)
        return (
            gx,
            g2.T @ x.data.reshape(-1, c_in),
            g2.T @ m1.reshape(-1, c_in),
            g2.T @ m2.reshape(-1, c_in),
            g2.sum(axis=0),
        )

    return _make(out, (x, w_e, w_n1, w_n2, bias), bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, train: bool) -> Tensor:
    """Normalise the last axis per channel over all leading axes.

    Training mode uses batch statistics (biased variance) and updates the
    running buffers in place; eval mode uses the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm expects ({c},) scale/shift")
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * (var * n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if train:
            n = x.data.size // c
            gx = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries with ``mask == False`` get exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


def kl_gaussian(mu, logvar, axis=None) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over ``axis`` (all by default)."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"mu {mu.shape} and logvar {logvar.shape} differ")
    with np.errstate(over="ignore"):
        var = np.exp(logvar.data)
    terms = 0.5 * (mu.data**2 + var - 1.0 - logvar.data)
    out = terms.sum(axis=axis)
    if not np.all(np.isfinite(out)):
        raise NonFinite("KL divergence is not finite")

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return g * mu.data, g * 0.5 * (var - 1.0)

    return _make(out, (mu, logvar), bw)


def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))


def pairwise_sq_dist(x) -> Tensor:
    """(B, B) squared Euclidean distances between the rows of ``x``."""
    x = as_tensor(x)
    diff = x.data[:, None, :] - x.data[None, :, :]
    out = (diff**2).sum(axis=-1)

    def bw(g):
        gs = g + g.T
        return (2.0 * (gs.sum(axis=1)[:, None] * x.data - gs @ x.data),)

    return _make(out, (x,), bw)


# ------------------------------------------------------------------ optimiser


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: Gradients | Mapping) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[p] if isinstance(grads, Gradients) else grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, expected {p.data.shape}")
            _adam_kernel(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1), self.m[k].reshape(-1),
                         self.v[k].reshape(-1), self.lr, self.beta1, self.beta2, self.eps, c1, c2)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array([float(self.t)])}
        for k in self.params:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["adam/t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"adam/m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"adam/v/{k}"], dtype=np.float64)


def adam_step(params: Mapping[str, Tensor], grads, state: Adam | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Adam:
    """One Adam update; creates fresh optimiser state when ``state`` is None."""
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.step(grads)
    return state


# ----------------------------------------------------------------- checkpoint

MAGIC = b"RISA1"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Binary dump: magic, count, then (name, rank, extents, float64 values) per tensor."""
    chunks = [MAGIC, struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        a = np.require(arr, dtype="<f8", requirements="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise ValueError(f"{path}: not a RISA1 checkpoint")
    off = 5
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<Q", buf, off)
        off += 8
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out


def finite_difference(f: Callable[[], float], array: np.ndarray, index, h: float = 1e-6) -> float:
    """Central difference of ``f`` w.r.t. ``array[index]`` (restored afterwards)."""
    old = array[index]
    array[index] = old + h
    fp = f()
    array[index] = old - h
    fm = f()
    array[index] = old
    return (fp - fm) / (2 * h)


def gradient_check(build: Callable[[], Tensor], inputs: Sequence[Tensor], max_entries: int | None = None,
                   h: float = 1e-6, rng: np.random.Generator | None = None, joint: bool = False) -> float:
    """Largest relative error between tape gradients and central differences.

    ``build`` recomputes the scalar loss from ``inputs``.  For each input at
    most ``max_entries`` randomly chosen entries are probed (all by default);
    the error of an input is ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||).
    With ``joint`` the probed entries of all inputs form one vector and a
    single error is returned, which suits many-parameter models whose
    individual tensors may have vanishing gradients.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with Tape() as tape:
        loss = build()
    grads = backward(tape, loss)
    pairs = []
    for t in inputs:
        flat = np.arange(t.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, max_entries, replace=False)
        idx = [np.unravel_index(k, t.data.shape) for k in flat]
        g = grads.get(t)
        analytic = np.array([0.0 if g is None else g[i] for i in idx])
        numeric = np.array([finite_difference(lambda: float(build().data), t.data, i, h) for i in idx])
        pairs.append((analytic, numeric))
    if joint:
        pairs = [tuple(np.concatenate(v) for v in zip(*pairs))] if pairs else []
    worst = 0.0
    for analytic, numeric in pairs:
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
