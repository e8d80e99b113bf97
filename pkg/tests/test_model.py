import numpy as np
import pytest
import torch

from loda import tensor as T
from loda.adaptation import (
    MODES,
    AdapterConfig,
    LoDaModel,
    cross_attend,
    frozen_vit_head_forward,
    inject,
    parameter_counts,
)
from loda.backbones import CnnConfig, VitConfig, attention, cnn_forward, init_frozen, load_frozen, save_frozen
from loda.exceptions import ConfigError, ShapeError, WeightFileError
from loda.metrics import plcc_loss
from loda.tensor import Tensor, backward
from loda.weights import load_weights, save_weights


@pytest.fixture(scope="module")
def frozen():
    return init_frozen(0)


def images(n, seed=0, size=64):
    return Tensor(T.rng(seed).normal(size=(n, 3, size, size)))


def test_cnn_feature_sizes(frozen):
    feats = cnn_forward(images(2), frozen.cnn_config, frozen.cnn)
    assert [f.shape[2] for f in feats] == [16, 8, 4, 2]
    assert [f.shape[1] for f in feats] == list(frozen.cnn_config.stage_channels)
    assert CnnConfig.full().feature_sizes(224) == [56, 28, 14, 7]
    assert all(f.data.min() >= 0 for f in feats)  # post-ReLU


def test_attention_matches_torch_mha():
    g = T.rng(4)
    q, k, v = g.normal(size=(2, 5, 8)), g.normal(size=(2, 7, 8)), g.normal(size=(2, 7, 8))
    ours = attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data

    def split(x):
        return torch.tensor(x).reshape(x.shape[0], x.shape[1], 2, 4).transpose(1, 2)

    ref = torch.nn.functional.scaled_dot_product_attention(split(q), split(k), split(v))
    ref = ref.transpose(1, 2).reshape(2, 5, 8).numpy()
    assert np.allclose(ours, ref, atol=1e-13)


def test_init_identity_is_bitwise(frozen):
    model = LoDaModel(frozen, mode="loda", seed=3)
    x = images(4, seed=1)
    assert np.array_equal(model(x).data, frozen_vit_head_forward(model, x).data)


def test_gate_zero_makes_inject_identity(frozen):
    model = LoDaModel(frozen, mode="loda", seed=0)
    toks = Tensor(T.rng(0).normal(size=(2, 17, 64)))
    kv = Tensor(T.rng(1).normal(size=(2, 64, 16)))
    assert np.array_equal(inject(toks, kv, model.params, 0, 4).data, toks.data)


def test_gated_residual_law(frozen):
    """Injected tokens equal tokens + s * up(attn(q) + q) for an arbitrary gate."""
    model = LoDaModel(frozen, mode="loda", seed=0)
    p = model.params
    gate = T.rng(2).normal(size=64)
    p["injector.I1.gate"].data = gate
    toks = Tensor(T.rng(0).normal(size=(2, 17, 64)))
    kv = Tensor(T.rng(1).normal(size=(2, 64, 16)))
    queried = cross_attend(toks, kv, p, 1, 4).data
    expected = toks.data + gate * (queried @ p["injector.I1.up_w"].data + p["injector.I1.up_b"].data)
    assert np.allclose(inject(toks, kv, p, 1, 4).data, expected, atol=1e-13)


def test_cross_attention_weights_are_distributions(frozen):
    model = LoDaModel(frozen, mode="loda", seed=0)
    toks = Tensor(T.rng(0).normal(size=(2, 17, 64)))
    kv = Tensor(T.rng(1).normal(size=(2, 64, 16)))
    _, w = cross_attend(toks, kv, model.params, 0, 4, return_weights=True)
    w = np.asarray(getattr(w, "data", w))
    assert w.shape[-2:] == (17, 64)
    assert np.allclose(w.sum(-1), 1.0) and np.all(w >= 0)


def test_injection_only_at_block_starts(frozen):
    model = LoDaModel(frozen, AdapterConfig(interactions=2), mode="loda", seed=0)
    assert model.interaction_layers() == [0, 2]
    x = images(2)
    model.set_gates(0.0)
    _, base = model(x, return_tokens=True)
    model.params["injector.I1.gate"].data[:] = 1.0
    _, toks = model(x, return_tokens=True)
    # gate I1 acts before layer 2: layers 0 and 1 unchanged, later layers differ
    assert np.array_equal(toks[0].data, base[0].data)
    assert np.array_equal(toks[1].data, base[1].data)
    assert not np.allclose(toks[2].data, base[2].data)


def test_gradients_reach_every_trainable_tensor_and_no_frozen(frozen):
    model = LoDaModel(frozen, mode="loda", seed=0)
    model.set_gates(0.1)
    out = model(images(4))
    backward(plcc_loss(out, [1.0, 2.0, 3.0, 5.0]))
    for name, t in model.params.items():
        assert t.grad is not None and t.grad.shape == t.shape, name
        if name not in ("head.b",) and not name.endswith("attn_k_b"):
            assert np.any(t.grad != 0), name
    assert all(t.grad is None for _, t in frozen.items())


def test_zero_gates_still_give_gate_gradient(frozen):
    model = LoDaModel(frozen, mode="loda", seed=0)
    backward(plcc_loss(model(images(4)), [1.0, 2.0, 3.0, 5.0]))
    assert np.any(model.params["injector.I0.gate"].grad != 0)
    assert not np.any(model.params["injector.I0.up_w"].grad)


def test_cnn_is_read_only(frozen):
    model = LoDaModel(frozen, mode="loda", seed=0)
    feats = model.cnn_features(images(2))
    assert all(not f.requires_grad for f in feats)


@pytest.mark.parametrize("mode", MODES)
def test_trainable_sets_per_mode(frozen, mode):
    model = LoDaModel(frozen, mode=mode, seed=0)
    prefixes = {n.split(".")[0] for n in model.params}
    expected = {
        "loda": {"extractor", "injector", "head"},
        "linear_probe": {"head"},
        "full_finetune": {"vit", "head"},
        "extractor_only": {"extractor", "direct", "head"},
    }[mode]
    assert prefixes == expected
    assert model(images(2)).shape == (2, 1)


def test_desk_counts_and_ratio(frozen):
    counts = parameter_counts(LoDaModel(frozen, mode="loda"))
    assert counts == {"trainable": 26641, "frozen": 348816, "total": 375457}
    assert counts["trainable"] / counts["total"] < 0.15


def test_interactions_must_divide_layers(frozen):
    with pytest.raises(ConfigError):
        LoDaModel(frozen, AdapterConfig(interactions=3))
    with pytest.raises(ConfigError):
        AdapterConfig(latent_dim=18, heads=4)


def test_full_profile_shapes():
    vit, cnn, a = VitConfig.full(), CnnConfig.full(), AdapterConfig.full()
    assert (vit.embed_dim, vit.num_layers, vit.grid) == (768, 12, 14)
    assert (a.latent_dim, a.heads, a.interactions, a.pooled_size) == (64, 4, 12, 7)
    assert cnn.stage_channels == (256, 512, 1024, 2048)


def test_frozen_round_trip(tmp_path, frozen):
    save_frozen(frozen, tmp_path / "f.lodaw")
    again = load_frozen(tmp_path / "f.lodaw")
    assert again.digest() == frozen.digest()


def test_frozen_load_errors(tmp_path, frozen):
    tensors = {k: v.data for k, v in frozen.items()}
    name = sorted(tensors)[0]
    missing = dict(tensors)
    del missing[name]
    save_weights(missing, tmp_path / "m.lodaw", namespace="frozen")
    with pytest.raises(WeightFileError, match=name):
        load_frozen(tmp_path / "m.lodaw")
    wrong = dict(tensors)
    wrong[name] = np.zeros(3)
    save_weights(wrong, tmp_path / "w.lodaw", namespace="frozen")
    with pytest.raises(ShapeError):
        load_frozen(tmp_path / "w.lodaw")


def test_state_dict_round_trip(tmp_path, frozen):
    a = LoDaModel(frozen, mode="loda", seed=1)
    save_weights(a.state_dict(), tmp_path / "t.lodaw", namespace="trainable")
    b = LoDaModel(frozen, mode="loda", seed=2)
    b.load_state_dict(load_weights(tmp_path / "t.lodaw", namespace="trainable"))
    x = images(2)
    assert np.array_equal(a(x).data, b(x).data)
    with pytest.raises(ShapeError):
        b.load_state_dict({})
