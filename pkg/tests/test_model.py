import numpy as np
import pytest
from conftest import tiny_batch, tiny_config, tiny_corpus, tiny_params

import nextpoi.diffcore as dc
from nextpoi.diffcore import Graph, Tensor
from nextpoi.model import (
    ModelConfig,
    Runtime,
    as_leaves,
    aux_geo_features,
    embed_steps,
    forward,
    fuse,
    infer_coordinate,
    init_params,
    mobility_features,
    positional_encoding,
    predict_location,
    predict_poi,
    social_aggregate,
    variant_config,
)
from nextpoi.rng import stream
from nextpoi.train import loss_poi, loss_traj, model_loss


@pytest.fixture(scope="module")
def std():
    """Standard-width parameters on a small POI/user vocabulary."""
    cfg = ModelConfig(dropout=0.0)
    P = as_leaves(init_params(cfg, 50, 10, 6, stream(3, "init")), requires_grad=False)
    return cfg, P


def seq(rng, B=2, n=20, n_pois=50):
    return rng.integers(0, n_pois, (B, n)), rng.integers(0, 10, (B, n)), rng.integers(0, 168, (B, n))


# ---------------------------------------------------------------- config


def test_config_checks_block_sum_and_heads():
    with pytest.raises(ValueError, match="d_model"):
        ModelConfig(d_poi=10)
    with pytest.raises(ValueError, match="heads"):
        ModelConfig(n_heads=3)


@pytest.mark.parametrize("name, sem, soc, aux, theta", [
    ("V0", False, False, False, (1, 0, 0)),
    ("V1", True, False, False, (1, 0, 0)),
    ("V2", True, False, True, (1, 0, 0)),
    ("V3", True, False, True, (1, 1, 0)),
    ("V4", True, False, True, (1, 0, 1)),
    ("V5", True, False, True, (1, 1, 1)),
    ("full", True, True, True, (1, 1, 1)),
])
def test_variant_table(name, sem, soc, aux, theta):
    c = variant_config(name)
    assert (c.use_semantic, c.use_social, c.use_aux, c.theta) == (sem, soc, aux, theta)


def test_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        variant_config("V9")


# ---------------------------------------------------------------- embeddings and positions


def test_embedding_width_and_determinism(std):
    cfg, P = std
    poi, cat, slot = seq(np.random.default_rng(0))
    a = embed_steps(P, poi, cat, slot, cfg).data
    assert a.shape == (2, 20, 128)
    assert np.array_equal(a, embed_steps(P, poi, cat, slot, cfg).data)


def test_category_change_touches_only_middle_block(std):
    cfg, P = std
    a = embed_steps(P, np.array([3]), np.array([1]), np.array([7]), cfg).data
    b = embed_steps(P, np.array([3]), np.array([2]), np.array([7]), cfg).data
    changed = np.flatnonzero(a[0] != b[0])
    assert changed.min() >= cfg.d_poi and changed.max() < cfg.d_poi + cfg.d_cat
    assert len(changed) == cfg.d_cat


def test_no_semantic_zeroes_category_block(std):
    cfg, P = std
    e = embed_steps(P, np.array([3]), np.array([1]), np.array([7]), cfg.replace(use_semantic=False)).data
    assert np.all(e[0, cfg.d_poi:cfg.d_poi + cfg.d_cat] == 0)


def test_positional_encoding_examples():
    pe = positional_encoding(20, 4)
    assert np.allclose(pe[0], [0, 1, 0, 1])
    assert pe[1] == pytest.approx([0.84147, 0.54030, 0.01000, 0.99995], abs=1e-5)
    big = positional_encoding(20, 128)
    assert all(not np.array_equal(big[i], big[j]) for i in range(20) for j in range(i))
    with pytest.raises(ValueError):
        positional_encoding(5, 3)


# ---------------------------------------------------------------- mobility extractor


def test_mobility_pure_and_order_sensitive(std):
    cfg, P = std
    poi, cat, slot = seq(np.random.default_rng(1), B=1)
    poi[0, 0], poi[0, 19] = 4, 9
    h = mobility_features(P, poi, cat, slot, cfg).data
    assert h.shape == (1, 128)
    assert np.array_equal(h, mobility_features(P, poi, cat, slot, cfg).data)
    swapped = poi.copy()
    swapped[0, [0, 19]] = swapped[0, [19, 0]]
    assert np.linalg.norm(mobility_features(P, swapped, cat, slot, cfg).data - h) > 0


def test_attention_rows_are_distributions(std):
    cfg, P = std
    rt = Runtime(capture=[])
    mobility_features(P, *seq(np.random.default_rng(2)), cfg, rt)
    assert len(rt.capture) == cfg.n_layers
    for w in rt.capture:
        assert np.all(w >= 0) and np.allclose(w.sum(-1), 1.0, atol=1e-6)


def test_final_output_depends_on_every_position(std):
    cfg, P = std
    poi, cat, slot = seq(np.random.default_rng(4), B=1)
    h = mobility_features(P, poi, cat, slot, cfg).data
    for pos in range(20):
        p2 = poi.copy()
        p2[0, pos] = (p2[0, pos] + 1) % 50
        assert not np.array_equal(mobility_features(P, p2, cat, slot, cfg).data, h)


# ---------------------------------------------------------------- social aggregation


def identity_social(d=2):
    eye, zero = np.eye(d), np.zeros(d)
    return {f"social.w{w}": Tensor(eye) for w in "qkvo"} | {f"social.b{w}": Tensor(zero) for w in "qvo"}


def test_social_hand_example():
    cfg = ModelConfig(d_model=2, d_poi=1, d_cat=1, d_time=0, n_heads=1)
    H, alpha = social_aggregate(identity_social(), Tensor(np.array([[1.0, 0.0]])),
                                Tensor(np.array([[[0.0, 1.0]]])), np.array([[True]]), cfg)
    e = np.exp(1 / np.sqrt(2))
    oracle = np.array([e, 1.0]) / (e + 1.0)
    assert alpha[0] == pytest.approx(oracle, abs=1e-12)
    assert H.data[0] == pytest.approx(oracle, abs=1e-12)
    # the stated reference values, at their tolerance
    assert alpha[0] == pytest.approx([0.66985, 0.33015], abs=1e-4)


def test_social_without_neighbors_is_identity(std):
    cfg, P = std
    h = Tensor(np.random.default_rng(5).normal(size=(3, 128)))
    H, alpha = social_aggregate(P, h, Tensor(np.zeros((3, 2, 128))), np.zeros((3, 2), bool), cfg)
    assert H is h
    assert alpha.tolist() == [[1.0, 0.0, 0.0]] * 3


def test_social_mixed_rows_and_padding(std):
    cfg, P = std
    rng = np.random.default_rng(6)
    h = Tensor(rng.normal(size=(2, 128)))
    nb = Tensor(rng.normal(size=(2, 3, 128)))
    mask = np.array([[True, False, True], [False, False, False]])
    H, alpha = social_aggregate(P, h, nb, mask, cfg)
    assert np.array_equal(H.data[1], h.data[1])  # bit-exact for m=0
    assert alpha[0, 2] == 0.0 and alpha[1].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert np.all(alpha >= 0) and np.allclose(alpha.sum(1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- auxiliary branch and fusion


def test_aux_constant_trajectory_and_translation(std):
    cfg, P = std
    flat = np.full((1, 20, 2), 0.3)
    g = aux_geo_features(P, flat, cfg).data
    assert g.shape == (1, 128) and np.all(np.isfinite(g))
    coords = np.random.default_rng(7).uniform(-0.5, 0.5, (1, 20, 2))
    assert not np.allclose(aux_geo_features(P, coords, cfg).data, aux_geo_features(P, coords + 0.1, cfg).data)


def test_fuse_zero_weights_gives_relu_bias(std):
    cfg, P = std
    Q = dict(P)
    Q["fuse.w"] = Tensor(np.zeros_like(P["fuse.w"].data))
    bias = np.linspace(-1, 1, 128)
    Q["fuse.b"] = Tensor(bias)
    f = fuse(Q, Tensor(np.ones((1, 128))), Tensor(np.ones((1, 128))), np.array([0]), cfg).data
    assert np.array_equal(f[0], np.maximum(bias, 0))
    Q["fuse.b"] = Tensor(np.abs(bias) + 0.1)
    assert np.array_equal(fuse(Q, None, None, np.array([0]), cfg).data[0], np.abs(bias) + 0.1)


def test_fuse_depends_on_user(std):
    cfg, P = std
    ctx = Tensor(np.random.default_rng(8).normal(size=(1, 128)))
    assert not np.array_equal(fuse(P, ctx, None, np.array([0]), cfg).data, fuse(P, ctx, None, np.array([1]), cfg).data)


# ---------------------------------------------------------------- heads


def test_poi_head_distribution_and_uniform(std):
    cfg, P = std
    f = Tensor(np.abs(np.random.default_rng(9).normal(size=(2, 128))))
    probs = np.exp(predict_poi(P, f).data)
    assert probs.shape == (2, 50) and np.all(probs > 0)
    assert np.allclose(probs.sum(1), 1.0, atol=1e-6)
    Q = dict(P)
    Q["mlp_f.w2"] = Tensor(np.zeros_like(P["mlp_f.w2"].data))
    Q["mlp_f.b2"] = Tensor(np.zeros(50))
    assert np.allclose(np.exp(predict_poi(Q, f).data), 1 / 50)


def test_location_head_zero_weights_gives_bias(std):
    cfg, P = std
    Q = dict(P)
    Q["mlp_g.w2"] = Tensor(np.zeros_like(P["mlp_g.w2"].data))
    Q["mlp_g.b2"] = Tensor(np.array([0.25, -0.5]))
    out = predict_location(Q, Tensor(np.ones((3, 128)))).data
    assert out.shape == (3, 2) and np.all(out == [0.25, -0.5])


def test_infer_coordinate_ties_to_lowest_id():
    xy = np.array([[0.0, 0.0], [0.2, 0.3], [0.9, 0.9]])
    assert infer_coordinate(np.array([[0.1, 0.45, 0.45]]), xy).tolist() == [[0.2, 0.3]]


def _head_params(n_pois=7, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "mlp.w1": rng.normal(0, 0.5, (d, d)), "mlp.b1": rng.normal(0, 0.1, d),
        "mlp.w2": rng.normal(0, 0.5, (d, n_pois)), "mlp.b2": rng.normal(0, 0.1, n_pois),
    }


def test_poi_head_gradient_oracle():
    f = np.random.default_rng(1).normal(size=(3, 8))
    targets = np.array([0, 4, 6])

    def fn(p, _):
        Q = {k.replace("mlp.", "mlp_f."): v for k, v in p.items()}
        lp = predict_poi(Q, Tensor(f))
        return loss_poi(lp, targets)

    assert dc.finite_diff_check(Graph(fn, _head_params())) < 1e-4


def test_location_head_gradient_oracle():
    f = np.random.default_rng(2).normal(size=(3, 8))
    target = np.random.default_rng(3).uniform(-1, 1, (3, 2))

    def fn(p, _):
        Q = {k.replace("mlp.", "mlp_g."): v for k, v in p.items()}
        return loss_traj(predict_location(Q, Tensor(f)), target)

    assert dc.finite_diff_check(Graph(fn, _head_params(n_pois=2))) < 1e-4


# ---------------------------------------------------------------- full network


def test_forward_shapes_and_social_switch(tiny):
    cfg, corpus, batch, params = tiny
    P = as_leaves(params, requires_grad=False)
    out = forward(P, batch, cfg)
    assert out.log_probs.shape == (2, corpus.log.n_pois) and out.pred_xy.shape == (2, 2)
    assert out.alpha.shape == (2, 2) and out.alpha[1].tolist() == [1.0, 0.0]
    off = cfg.replace(use_social=False)
    lone = tiny_batch(corpus, off)
    lone.nb_slot_index[:] = -1
    a, b = forward(P, batch, off), forward(P, lone, off)
    assert np.array_equal(a.f.data, b.f.data)


def test_two_layer_model_gradient_on_deep_params():
    """Untimed check of the stacked encoder: perturbs the last mobility layer,
    the social attention and the fusion layer (the embedding tables and
    the first layer are covered by the one-layer acceptance check)."""
    cfg = tiny_config()
    corpus = tiny_corpus()
    batch = tiny_batch(corpus, cfg)
    params = tiny_params(cfg, corpus)
    poi_xy = corpus.registry.xy
    checked = ("mob.1.attn", "mob.1.ff", "social.", "fuse.")
    g = Graph(lambda p, _: model_loss(p, batch, cfg, poi_xy)[0], params)
    err = dc.finite_diff_check(g, skip=lambda k: not k.startswith(checked))
    assert err < 1e-4
