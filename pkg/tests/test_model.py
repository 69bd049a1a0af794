import numpy as np
import pytest

from conftest import random_batch, tiny_config, tiny_model
from risa import tensor as T
from risa.errors import AllPartsMissing, ConfigError, ShapeMismatch
from risa.geomfeat import STRUCT_DIM
from risa.mesh import subdivided_cube
from risa.model import ModelConfig, RisaNet
from risa.train import TrainConfig, total_loss

FULL_MODEL_TOL = 1e-4


def test_forward_shapes():
    model = tiny_model()
    cfg = model.config
    batch = random_batch(cfg, "aabb", missing=[(1, 2)])
    out = model.forward(batch, train=True, rng=np.random.default_rng(0))
    assert out.z.shape == (4, 3, cfg.d_z)
    assert out.alpha.shape == (4, 3)
    assert out.gv.shape == (4, 3 * cfg.d_z)
    assert out.weights.shape == (4, 2)
    assert out.fv.shape == (4, cfg.fv_dim) == (4, 3 * (cfg.d_z + STRUCT_DIM))
    assert out.fv_recon.shape == out.fv.shape
    assert out.descriptor.shape == (4, cfg.d_s)
    for pt in out.parts:
        assert pt.recon.shape == (len(pt.rows), cfg.n_edges, cfg.in_channels)
        assert np.all(pt.kl.data >= 0)
    assert [len(pt.rows) for pt in out.parts] == [4, 4, 3]


def test_missing_part_gets_zero_attention():
    model = tiny_model(n_parts=4)
    batch = random_batch(model.config, "ab", missing=[(0, 1)])
    out = model.forward(batch)
    a = out.alpha.data
    assert a[0, 1] == 0.0
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_array_equal(out.z.data[0, 1], 0.0)
    np.testing.assert_allclose(out.weights.data.sum(axis=1), 1.0, atol=1e-15)


def test_fv_layout():
    model = tiny_model()
    cfg = model.config
    out = model.forward(random_batch(cfg, "ab"))
    fv = out.fv.data.reshape(2, cfg.n_parts, cfg.d_z + STRUCT_DIM)
    w = out.weights.data
    a = out.alpha.data
    expect_g = out.z.data * a[:, :, None] * w[:, 0, None, None]
    np.testing.assert_allclose(fv[:, :, :cfg.d_z], expect_g, atol=1e-14)
    sv = random_batch(cfg, "ab").structure
    np.testing.assert_allclose(fv[:, :, cfg.d_z:], sv * w[:, 1, None, None], atol=1e-14)


def test_structure_off_uses_gv():
    model = tiny_model(structure=False)
    out = model.forward(random_batch(model.config, "ab"))
    assert out.weights is None
    np.testing.assert_array_equal(out.fv.data, out.gv.data)
    assert not any(k.startswith("geostruct") for k in model.params)


def test_autoencoder_has_no_kl():
    model = tiny_model(variational=False)
    out = model.forward(random_batch(model.config, "ab"), train=True)
    assert out.global_kl is None and out.zv_logvar is None
    assert all(pt.kl is None for pt in out.parts)
    assert not any(k.endswith("logvar/W") for k in model.params)


def test_training_forward_needs_rng():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.forward(random_batch(model.config, "ab"), train=True)


def test_eval_forward_is_deterministic_and_ignores_sampling():
    model = tiny_model()
    batch = random_batch(model.config, "aabb")
    np.testing.assert_array_equal(model.describe(batch), model.describe(batch))
    # descriptors are the global posterior means: training-mode sampling never reaches them
    a = model.forward(batch, train=True, rng=np.random.default_rng(1)).descriptor
    b = model.forward(batch, train=True, rng=np.random.default_rng(2)).descriptor
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_describe_is_independent_of_chunking():
    model = tiny_model()
    batch = random_batch(model.config, "aabbc")
    np.testing.assert_allclose(model.describe(batch, chunk=2), model.describe(batch), atol=1e-13)


def test_shared_part_weights():
    model = tiny_model(share_part_weights=True)
    assert any(k.startswith("partvae/") for k in model.params)
    assert not any(k.startswith("partvae0/") for k in model.params)
    model.forward(random_batch(model.config, "ab"))


def test_errors():
    model = tiny_model()
    cfg = model.config
    with pytest.raises(AllPartsMissing):
        model.forward(random_batch(cfg, "ab", missing=[(0, 0), (0, 1), (0, 2)]))
    with pytest.raises(ShapeMismatch):
        RisaNet(cfg, subdivided_cube(1).adjacency)
    bad = random_batch(tiny_config(n_parts=2), "ab")
    with pytest.raises(ShapeMismatch):
        model.forward(bad)
    with pytest.raises(ConfigError):
        tiny_config(d_z=0)
    with pytest.raises(ConfigError):
        tiny_config(feature="curvature")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n_parts": 1, "n_edges": 18, "width": 3})


def test_config_round_trip():
    cfg = tiny_config(feature="scale_invariant")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.in_channels == 5


def test_state_dict_round_trip(tmp_path):
    model = tiny_model(seed=3)
    batch = random_batch(model.config, "aabb")
    model.forward(batch, train=True, rng=np.random.default_rng(0))  # moves batch-norm buffers
    T.save_checkpoint(tmp_path / "m.ckpt", model.state_dict())
    other = tiny_model(seed=4)
    other.load_state_dict(T.load_checkpoint(tmp_path / "m.ckpt"))
    np.testing.assert_array_equal(other.describe(batch), model.describe(batch))


def test_same_seed_same_weights():
    a, b = tiny_model(seed=5), tiny_model(seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def _random_setup(seed):
    rng = np.random.default_rng(seed)
    kw = dict(variational=bool(rng.integers(2)), structure=bool(rng.integers(2)),
              feature=["scale_sensitive", "scale_invariant"][rng.integers(2)],
              share_part_weights=bool(rng.integers(2)))
    model = tiny_model(seed=seed, **kw)
    labels = ["a", "a", "b", "b", "a"][: int(rng.integers(3, 6))]
    missing = [(int(rng.integers(len(labels))), int(rng.integers(3)))] if rng.random() < 0.5 else []
    batch = random_batch(model.config, labels, seed=seed, missing=missing)
    # the undetached objective is a plain function of the parameters, so finite differences apply
    cfg = TrainConfig(gamma=float(rng.choice([1.0, 1e5])), detach_global_target=False)
    return model, batch, cfg


def full_model_error(seed):
    model, batch, cfg = _random_setup(seed)
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def build():
        # identical noise on every evaluation; batch-norm buffers do not feed the train-mode output.
        # h is small because triplet hinges put kinks close to random parameter points
        return total_loss(model, batch, cfg, train=True, rng=np.random.default_rng(seed)).total

    err = T.gradient_check(build, list(model.params.values()), max_entries=4, h=1e-7,
                           rng=np.random.default_rng(seed), joint=True)
    model.buffers.update(buffers)
    return err


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradient(seed):
    assert full_model_error(seed) <= FULL_MODEL_TOL
