import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risa import tensor as T
from risa.errors import CycleDetected, NonFinite, ShapeMismatch
from risa.mesh import subdivided_cube
from risa.tensor import Tape, Tensor

LAYER_TOL = 1e-5
CONFIGS = range(20)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ tape


def test_no_recording_outside_tape():
    a = leaf([1.0, 2.0])
    b = T.mul(a, a)
    assert not b.requires_grad and b.parents == ()


def test_backward_accumulates_shared_inputs():
    a = leaf([1.0, -2.0, 3.0])
    with Tape() as tape:
        y = T.total(T.add(T.mul(a, a), T.mul(a, 3.0)))
    g = T.backward(tape, y)
    np.testing.assert_allclose(g[a], 2 * a.data + 3.0)


def test_unreached_tensor_has_zero_gradient():
    a, b = leaf([1.0]), leaf([[2.0, 3.0]])
    with Tape() as tape:
        y = T.total(T.square(a))
    g = T.backward(tape, y)
    np.testing.assert_array_equal(g[b], np.zeros((1, 2)))
    assert b not in g


def test_loss_must_be_scalar():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        y = T.square(a)
    with pytest.raises(ShapeMismatch):
        T.backward(tape, y)


def test_cycle_detected():
    a = leaf([1.0])
    with Tape() as tape:
        b = T.mul(a, 2.0)
        c = T.mul(b, 3.0)
        y = T.total(c)
    b.parents = (c,)  # corrupt the graph: b now depends on a later node
    with pytest.raises(CycleDetected):
        T.backward(tape, y)


def test_broadcast_gradients_reduce_to_input_shape():
    a, b = leaf(np.ones((3, 4))), leaf(np.arange(4.0))
    with Tape() as tape:
        y = T.total(T.mul(a, b))
    g = T.backward(tape, y)
    np.testing.assert_array_equal(g[b], np.full(4, 3.0))
    np.testing.assert_array_equal(g[a], np.tile(np.arange(4.0), (3, 1)))


# ------------------------------------------------------------------ layer values


def edge_conv_literal_error():
    """Max deviation of edge_conv from a scalar, term-by-term evaluation with C_in = C_out = 2."""
    mesh = subdivided_cube(0)
    adj = mesh.adjacency
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, mesh.n_edges, 2))
    we, wn1, wn2 = (rng.normal(size=(2, 2)) for _ in range(3))
    b = rng.normal(size=2)
    y = T.edge_conv(x, adj, we, wn1, wn2, b).data[0]
    worst = 0.0
    for i in range(mesh.n_edges):
        j1, j2 = adj.n1[i]
        k1, k2 = adj.n2[i]
        xi = x[0, i]
        m1 = [(x[0, j1, c] + x[0, j2, c]) / 2 for c in range(2)]
        m2 = [(x[0, k1, c] + x[0, k2, c]) / 2 for c in range(2)]
        for o in range(2):
            expect = (we[o, 0] * xi[0] + we[o, 1] * xi[1] + wn1[o, 0] * m1[0] + wn1[o, 1] * m1[1]
                      + wn2[o, 0] * m2[0] + wn2[o, 1] * m2[1] + b[o])
            worst = max(worst, abs(y[i, o] - expect))
    return worst


def test_edge_conv_literal_formula():
    assert edge_conv_literal_error() <= 1e-12


def test_edge_conv_identity_and_neighbour_mean():
    adj = subdivided_cube(0).adjacency
    x = np.random.default_rng(0).normal(size=(2, 18, 2))
    eye, zero = np.eye(2), np.zeros((2, 2))
    np.testing.assert_array_equal(T.edge_conv(x, adj, eye, zero, zero, np.zeros(2)).data, x)
    got = T.edge_conv(x, adj, zero, eye, zero, np.zeros(2)).data
    np.testing.assert_allclose(got, x[:, adj.n1].mean(axis=2), atol=1e-15)


def test_edge_conv_shape_errors():
    adj = subdivided_cube(0).adjacency
    w = np.zeros((3, 2))
    with pytest.raises(ShapeMismatch):
        T.edge_conv(np.zeros((1, 18, 3)), adj, w, w, w, np.zeros(3))
    with pytest.raises(ShapeMismatch):
        T.edge_conv(np.zeros((1, 72, 2)), adj, w, w, w, np.zeros(3))


def test_leaky_relu_slope():
    np.testing.assert_array_equal(T.leaky_relu(np.array([-1.0, 0.0, 2.0])).data, [-0.02, 0.0, 2.0])


def test_fc_matches_matmul():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=5)
    np.testing.assert_allclose(T.fc(x, w, b).data, x @ w.T + b)
    with pytest.raises(ShapeMismatch):
        T.fc(x, w.T, b)


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(np.full((1, 3), 2.5)).data, [[1 / 3, 1 / 3, 1 / 3]])
    out = T.softmax(np.array([[1.0, 5.0, 2.0]]), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_sums_to_one(v):
    out = T.softmax(np.array([v])).data
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(out >= 0)


def test_batch_norm_train_statistics():
    x = np.array([[1.0, -3.0], [5.0, 2.0]])
    rm, rv = np.zeros(2), np.ones(2)
    out = T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, train=True).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=0), x.var(axis=0) / (x.var(axis=0) + 1e-5), atol=1e-9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batch_norm_eval_uses_running_stats():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = T.batch_norm(x, np.array([2.0, 1.0]), np.array([0.5, 0.0]), rm, rv, train=False).data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-5) * [2.0, 1.0] + [0.5, 0.0])
    np.testing.assert_array_equal(rm, [1.0, -1.0])


def test_kl_closed_form_examples():
    assert T.kl_gaussian(np.zeros(4), np.zeros(4)).data == 0.0
    assert T.kl_gaussian(np.array([1.0]), np.array([0.0])).data == pytest.approx(0.5)
    with pytest.raises(NonFinite):
        T.kl_gaussian(np.array([0.0]), np.array([1e4]))
    with pytest.raises(ShapeMismatch):
        T.kl_gaussian(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    assert T.kl_gaussian(rng.normal(size=16), rng.normal(size=16)).data >= 0


def kl_monte_carlo(mu, logvar, n, rng, chunk=100_000):
    sd = np.exp(0.5 * logvar)
    acc = 0.0
    for s in range(0, n, chunk):
        eps = rng.standard_normal((min(chunk, n - s), mu.size))
        z = mu + sd * eps
        # log q(z) - log p(z); the 2*pi terms cancel
        acc += np.sum(-0.5 * eps**2 - 0.5 * logvar + 0.5 * z**2)
    return acc / n


def test_kl_monte_carlo_single():
    rng = np.random.default_rng(3)
    mu, lv = rng.normal(size=64), rng.uniform(-1, 1, 64)
    est = kl_monte_carlo(mu, lv, 200_000, rng)
    assert est == pytest.approx(float(T.kl_gaussian(mu, lv).data), rel=0.02)


def test_pairwise_sq_dist():
    x = np.random.default_rng(2).normal(size=(5, 3))
    brute = np.array([[np.sum((a - b) ** 2) for b in x] for a in x])
    np.testing.assert_allclose(T.pairwise_sq_dist(x).data, brute, atol=1e-12)


# ------------------------------------------------------------------ gradients


def edge_conv_case(seed):
    rng = np.random.default_rng(seed)
    adj = subdivided_cube(0).adjacency
    c_in, c_out = rng.integers(1, 4, 2)
    x = leaf(rng.normal(size=(2, 18, c_in)))
    ws = [leaf(rng.normal(size=(c_out, c_in))) for _ in range(3)]
    b = leaf(rng.normal(size=c_out))
    r = rng.normal(size=(2, 18, c_out))
    return lambda: T.total(T.mul(T.edge_conv(x, adj, *ws, b), r)), [x, *ws, b]


def fc_case(seed):
    rng = np.random.default_rng(seed)
    n_in, n_out = rng.integers(1, 6, 2)
    x, w, b = leaf(rng.normal(size=(3, n_in))), leaf(rng.normal(size=(n_out, n_in))), leaf(rng.normal(size=n_out))
    r = rng.normal(size=(3, n_out))
    return lambda: T.total(T.mul(T.fc(x, w, b), r)), [x, w, b]


def batch_norm_case(seed, train=None):
    rng = np.random.default_rng(seed)
    train = bool(seed % 2) if train is None else train
    c = int(rng.integers(1, 4))
    x = leaf(rng.normal(size=(3, 4, c)) * rng.uniform(0.5, 3))
    g, b = leaf(rng.normal(size=c)), leaf(rng.normal(size=c))
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, c)
    r = rng.normal(size=(3, 4, c))
    return lambda: T.total(T.mul(T.batch_norm(x, g, b, rm.copy(), rv.copy(), train), r)), [x, g, b]


def leaky_relu_case(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(4, 5))
    v += np.sign(v) * 0.1  # keep away from the kink
    x = leaf(v)
    r = rng.normal(size=v.shape)
    return lambda: T.total(T.mul(T.leaky_relu(x), r)), [x]


def softmax_case(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(3, 5)) * 2)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    r = rng.normal(size=(3, 5))
    return lambda: T.total(T.mul(T.softmax(x, mask), r)), [x]


def kl_case(seed):
    rng = np.random.default_rng(seed)
    mu, lv = leaf(rng.normal(size=(3, 6))), leaf(rng.uniform(-2, 2, (3, 6)))
    r = rng.normal(size=3)
    return lambda: T.total(T.mul(T.kl_gaussian(mu, lv, axis=1), r)), [mu, lv]


LAYER_CASES = {
    "edge_conv": edge_conv_case,
    "fc": fc_case,
    "batch_norm": batch_norm_case,
    "leaky_relu": leaky_relu_case,
    "softmax": softmax_case,
    "kl": kl_case,
}


@pytest.mark.parametrize("seed", CONFIGS)
@pytest.mark.parametrize("layer", sorted(LAYER_CASES))
def test_layer_gradient(layer, seed):
    assert T.gradient_check(*LAYER_CASES[layer](seed)) <= LAYER_TOL


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradient_both_modes(seed, train):
    assert T.gradient_check(*batch_norm_case(seed, train)) <= LAYER_TOL


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(0.5, 2.0, (3, 4)))
    b = leaf(rng.uniform(0.5, 2.0, (4,)))
    c = leaf(rng.normal(size=(4, 2)))

    def build():
        h = T.div(T.exp(T.mul(a, 0.3)), b)
        h = T.sub(T.log(T.add(T.square(h), 1.0)), T.mean(h, axis=0, keepdims=True))
        h = T.matmul(h, c)  # (3, 2)
        h = T.concat([h, T.getitem(h, [2, 0])], axis=0)  # (5, 2)
        h = T.reshape(T.stack([h, T.mul(h, 2.0)], axis=0), (10, 2))
        rows = np.array([0, 2, 3, 5, 6, 7, 8, 9, 10, 11])
        return T.add(T.total(T.square(T.scatter_rows(h, rows, 12))), T.mul(T.total(T.pairwise_sq_dist(T.reshape(h, (5, 4)))), 0.1))

    assert T.gradient_check(build, [a, b, c]) <= LAYER_TOL


def test_maximum_gradient_goes_to_argmax():
    a = leaf([[1.0, 7.0], [3.0, 2.0]])
    with Tape() as tape:
        y = T.maximum(a)
    np.testing.assert_array_equal(T.backward(tape, y)[a], [[0.0, 1.0], [0.0, 0.0]])


# ------------------------------------------------------------------ adam


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(p.copy())
    return out


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(6)]
    w = leaf(p0.copy())
    opt = T.Adam({"w": w}, lr=0.01)
    for g, expect in zip(grads, reference_adam(p0, grads, 0.01)):
        opt.step({"w": g})
        np.testing.assert_allclose(w.data, expect, rtol=0, atol=1e-14)
    assert opt.t == 6


def test_adam_first_step_is_lr_times_sign():
    w = leaf([1.0, 1.0, 1.0])
    T.adam_step({"w": w}, {"w": np.array([1e-2, -3.0, 200.0])}, lr=0.1)
    np.testing.assert_allclose(w.data, [0.9, 1.1, 0.9], atol=1e-6)


def test_adam_state_round_trip():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    oa, ob = T.Adam({"w": a}), T.Adam({"w": b})
    oa.step({"w": np.ones(3)})
    ob.load_state(oa.state())
    b.data = a.data.copy()
    g = rng.normal(size=3)
    oa.step({"w": g})
    ob.step({"w": g})
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.Adam({"w": leaf(np.zeros(3))}).step({"w": np.zeros(4)})


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    state = {"a/b": rng.normal(size=(2, 3)), "scalar": np.array(3.5), "vec": np.arange(4.0), "e": np.zeros((0, 2))}
    T.save_checkpoint(tmp_path / "x.ckpt", state)
    back = T.load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
        assert back[k].shape == state[k].shape


def test_checkpoint_layout(tmp_path):
    T.save_checkpoint(tmp_path / "x.ckpt", {"w": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:5] == b"RISA1"
    assert int.from_bytes(raw[5:13], "little") == 1
    assert len(raw) == 5 + 8 + 8 + 1 + 8 + 16 + 16


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE!" + bytes(8))
    with pytest.raises(ValueError):
        T.load_checkpoint(tmp_path / "x.ckpt")
