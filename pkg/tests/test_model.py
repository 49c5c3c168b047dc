import numpy as np
import pytest

from heartlora import tensor as T
from heartlora.lora import init_adapters
from heartlora.model import (
    ConfigError,
    ModelConfig,
    count_flops,
    init_backbone,
    mhsa_forward,
    model_forward,
    patchify,
    reset_classifier,
)
from heartlora.pattern import HeadPattern
from oracles import randomize_adapters, toy_backbone, toy_batch, toy_config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"embed_dim": 16, "depth": 3})
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.head_dim == 8 and cfg.num_tokens == 65


def test_patchify_row_major_order():
    img = np.arange(2 * 4 * 4, dtype=np.float64).reshape(1, 2, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 8)
    # second patch is the top-right 2x2 block of each channel
    np.testing.assert_array_equal(p[0, 1], np.concatenate([img[0, c, 0:2, 2:4].ravel() for c in range(2)]))


def test_forward_shape_and_dtype():
    w = toy_backbone()
    x, _ = toy_batch(w.config, n=3)
    out = model_forward(x, w)
    assert out.shape == (3, w.config.num_classes)
    assert out.data.dtype == np.float64


def test_pattern_layer_count_mismatch_rejected():
    w = toy_backbone()
    x, _ = toy_batch(w.config, n=1)
    with pytest.raises(ConfigError):
        model_forward(x, w, patterns=HeadPattern.all_ones(3, 4))
    with pytest.raises(ConfigError):
        model_forward(x, w, patterns=HeadPattern.all_ones(2, 3))


def _zero_weight_oracle(weights, layer: int, head: int):
    w = weights.copy()
    hd = w.config.head_dim
    w.layers[layer].w_o.data[head * hd:(head + 1) * hd, :] = 0.0
    return w


@pytest.mark.parametrize("head", range(4))
def test_masking_matches_zeroed_output_rows(head):
    w = toy_backbone(seed=3)
    reset_classifier(w, w.config.num_classes, seed=1)
    x, _ = toy_batch(w.config, n=2)
    row = np.ones((2, 4), dtype=np.uint8)
    row[1, head] = 0
    masked = model_forward(x, w, patterns=HeadPattern(row)).data
    oracle = model_forward(x, _zero_weight_oracle(w, 1, head)).data
    np.testing.assert_allclose(masked, oracle, atol=1e-12, rtol=0)


def test_mhsa_unbatched_matches_batched(rng):
    w = toy_backbone()
    x = rng.normal(size=(5, w.config.embed_dim))
    a = mhsa_forward(T.Tensor(x, dtype=np.float64), w.layers[0], None, None, 4).data
    b = mhsa_forward(T.Tensor(x[None], dtype=np.float64), w.layers[0], None, None, 4).data[0]
    np.testing.assert_array_equal(a, b)


def test_attention_rows_sum_to_one():
    w = toy_backbone()
    x, _ = toy_batch(w.config, n=2)
    attn = []
    model_forward(x, w, attn_out=attn)
    assert len(attn) == w.config.num_layers
    for a in attn:
        assert a.shape == (2, 4, w.config.num_tokens, w.config.num_tokens)
        np.testing.assert_allclose(a.sum(-1), 1.0)


def test_adapters_change_output_only_when_nonzero():
    w = toy_backbone()
    x, _ = toy_batch(w.config)
    with T.precision("float64"):
        pairs = init_adapters(w.config, rank=2)
    base = model_forward(x, w).data
    np.testing.assert_array_equal(model_forward(x, w, pairs).data, base)
    randomize_adapters(pairs)
    assert not np.allclose(model_forward(x, w, pairs).data, base)


def test_flops_scale_with_active_heads():
    cfg = ModelConfig()
    full = count_flops(cfg)
    pat = HeadPattern([[0, 0, 1, 1, 1, 1, 1, 1]] * cfg.num_layers)
    part = count_flops(cfg, pat)
    assert part["value_output"] * 8 == full["value_output"] * 6
    assert part["query_key"] * 8 == full["query_key"] * 6
    assert part["mlp"] == full["mlp"]
    assert count_flops(cfg, HeadPattern.all_ones(cfg.num_layers, 8)) == full
    assert count_flops(cfg, batch=3)["total"] == 3 * full["total"]


def test_init_is_seeded():
    a = init_backbone(toy_config(), seed=5)
    b = init_backbone(toy_config(), seed=5)
    c = init_backbone(toy_config(), seed=6)
    assert a.checksum() == b.checksum() != c.checksum()


def test_freeze_leaves_only_classifier_trainable():
    w = toy_backbone()
    w.freeze(train_classifier=True)
    trainable = [n for n, t in w.named_tensors() if t.requires_grad]
    assert trainable == ["head.w", "head.b"]
