import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grads
from essa.errors import ConfigError, ShapeError
from essa.peft import VPT, AdapterContext, inject
from essa.tensor import Tensor, linear, sum_, mul
from essa.vit import (
    PRESETS,
    ViTConfig,
    attention_block,
    block_params,
    forward_features,
    init_backbone,
    patch_embed,
    preset,
)

TINY = preset("tiny")


def closed_form_count(c: ViTConfig) -> int:
    d, h, n = c.embed_dim, c.mlp_hidden, c.num_patches
    embed = d * c.patch_dim + d + d + (1 + n) * d + c.num_registers * d
    block = 2 * d + 4 * (d * d + d) + 2 * d + (h * d + h) + (d * h + d)
    return embed + c.depth * block + 2 * d


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"image_size": 15}, {"embed_dim": 33}, {"depth": 0}, {"num_registers": -1}, {"pixel_std": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ViTConfig(**kw)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("huge")

    def test_tiny_shape(self):
        assert (TINY.image_size, TINY.patch_size, TINY.embed_dim, TINY.depth, TINY.num_heads, TINY.mlp_ratio) == (
            16, 4, 32, 2, 2, 2)


class TestInit:
    def test_deterministic(self):
        a, b = init_backbone(TINY, 3), init_backbone(TINY, 3)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_count_matches_closed_form(self, name):
        c = preset(name)
        params = init_backbone(c, 0)
        assert sum(p.size for p in params.values()) == closed_form_count(c)

    def test_tiny_count(self):
        assert closed_form_count(TINY) == 19296

    def test_seed_changes_values_not_layout(self):
        a, b = init_backbone(TINY, 0), init_backbone(TINY, 1)
        assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}
        assert not np.array_equal(a["block.0.attn.q.weight"].data, b["block.0.attn.q.weight"].data)

    def test_init_statistics(self):
        params = init_backbone(TINY, 0)
        assert not params["block.1.mlp.fc1.bias"].data.any()
        np.testing.assert_array_equal(params["block.0.norm1.weight"].data, 1.0)
        w = params["block.0.mlp.fc1.weight"].data
        assert np.abs(w).max() <= 0.04 + 1e-9
        assert 0.01 < w.std() < 0.02


class TestPatchEmbed:
    def test_token_counts(self):
        params = init_backbone(TINY, 0)
        assert patch_embed(np.zeros((3, 16, 16)), params, TINY).shape == (17, 32)
        small = ViTConfig(image_size=8, patch_size=4, embed_dim=32, num_heads=2)
        assert patch_embed(np.zeros((3, 8, 8)), init_backbone(small, 0), small).shape == (5, 32)

    def test_zero_image_zero_pos_gives_bias(self):
        params = init_backbone(TINY, 0)
        params["pos_embed"] = Tensor(np.zeros_like(params["pos_embed"].data))
        params["patch_embed.bias"] = Tensor(np.arange(32.0))
        tokens = patch_embed(np.zeros((3, 16, 16)), params, TINY).data
        np.testing.assert_array_equal(tokens[1:], np.broadcast_to(np.arange(32.0), (16, 32)))
        np.testing.assert_array_equal(tokens[0], params["cls_token"].data[0])

    def test_patch_order_is_row_major(self):
        params = init_backbone(TINY, 0)
        params["pos_embed"] = Tensor(np.zeros_like(params["pos_embed"].data))
        img = np.zeros((3, 16, 16))
        img[:, 4:8, 8:12] = 1.0  # grid row 1, column 2 -> patch 6
        tokens = patch_embed(img, params, TINY).data[1:]
        moved = np.flatnonzero(np.abs(tokens - params["patch_embed.bias"].data).sum(1) > 0)
        assert moved.tolist() == [6]

    def test_wrong_size(self):
        with pytest.raises(ShapeError):
            patch_embed(np.zeros((3, 12, 12)), init_backbone(TINY, 0), TINY)

    def test_registers_follow_class_token(self):
        c = ViTConfig(num_registers=2)
        params = init_backbone(c, 0)
        tokens = patch_embed(np.zeros((3, 16, 16)), params, c).data
        assert tokens.shape == (19, 32)
        np.testing.assert_array_equal(tokens[1:3], params["registers"].data)


class TestAttentionBlock:
    def test_attention_rows_sum_to_one(self, rng):
        params = init_backbone(TINY, 0)
        x = Tensor(rng.standard_normal((5, 32)))
        _, attn = attention_block(x, block_params(params, 0), 2, return_attention=True)
        assert attn.shape == (2, 5, 5)
        np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-14)

    def test_single_token_attends_to_itself(self, rng):
        params = init_backbone(TINY, 0)
        blk = block_params(params, 0)
        for k in ("mlp.fc2.weight", "mlp.fc2.bias"):
            blk[k] = Tensor(np.zeros_like(blk[k].data))
        x = Tensor(rng.standard_normal((1, 32)))
        out = attention_block(x, blk, 2).data
        from essa.tensor import layer_norm

        h = layer_norm(x, blk["norm1.weight"], blk["norm1.bias"], 1e-6)
        v = linear(h, blk["attn.v.weight"], blk["attn.v.bias"])
        ref = x.data + linear(v, blk["attn.proj.weight"], blk["attn.proj.bias"]).data
        np.testing.assert_allclose(out, ref, atol=1e-14)

    def test_gradient(self, rng):
        params = init_backbone(TINY, 0)
        blk = {k: Tensor(v.data + rng.normal(0, 0.3, v.shape)) for k, v in block_params(params, 1).items()}
        x = Tensor(rng.standard_normal((2, 4, 32)))
        w = Tensor(rng.standard_normal((2, 4, 32)))
        check_grads(lambda: sum_(mul(attention_block(x, blk, 2), w)), [x, *blk.values()], tol=1e-4)


class TestForwardFeatures:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_shapes(self, name, rng):
        c = preset(name)
        params = init_backbone(c, 0)
        imgs = rng.uniform(size=(3, 3, c.image_size, c.image_size))
        cls, tokens = forward_features(imgs, params, c)
        assert cls.shape == (3, c.embed_dim)
        assert tokens.shape == (3, 1 + c.num_patches, c.embed_dim)
        cls1, _ = forward_features(imgs[0], params, c)
        assert cls1.shape == (c.embed_dim,)
        np.testing.assert_allclose(cls1.data, cls.data[0], atol=1e-12)

    def test_prompts_extend_tokens_but_keep_cls_first(self, rng):
        params = init_backbone(TINY, 0)
        spec = VPT(prompts=4)
        ctx = AdapterContext.from_specs([spec], inject(spec, params))
        cls, tokens = forward_features(rng.uniform(size=(3, 16, 16)), params, TINY, ctx)
        assert tokens.shape == (21, 32)
        np.testing.assert_array_equal(cls.data, tokens.data[0])

    def test_distinct_images_give_distinct_embeddings(self, rng):
        params = init_backbone(TINY, 0)
        cls, _ = forward_features(rng.uniform(size=(2, 3, 16, 16)), params, TINY)
        assert np.abs(cls.data[0] - cls.data[1]).max() > 1e-6

    def test_zero_blocks_leave_positional_stream(self, rng):
        params = init_backbone(TINY, 0)
        for k, v in params.items():
            if k.startswith("block.") and not k.endswith(("norm1.weight", "norm2.weight")):
                params[k] = Tensor(np.zeros_like(v.data))
        params["patch_embed.weight"] = Tensor(np.zeros_like(params["patch_embed.weight"].data))
        a, ta = forward_features(rng.uniform(size=(3, 16, 16)), params, TINY)
        b, tb = forward_features(rng.uniform(size=(3, 16, 16)), params, TINY)
        np.testing.assert_array_equal(ta.data, tb.data)

    @settings(max_examples=10, deadline=None)
    @given(st.permutations(list(range(16))))
    def test_patch_permutation_invariance(self, perm):
        rng = np.random.default_rng(5)
        params = init_backbone(TINY, 0)
        img = rng.uniform(size=(3, 16, 16))
        base, _ = forward_features(img, params, TINY)
        # permute the 4x4 grid of patches and the matching positional rows
        grid = img.reshape(3, 4, 4, 4, 4).transpose(0, 1, 3, 2, 4).reshape(3, 16, 4, 4)
        inv = np.argsort(perm)
        shuffled = grid[:, perm].reshape(3, 4, 4, 4, 4).transpose(0, 1, 3, 2, 4).reshape(3, 16, 16)
        pos = params["pos_embed"].data
        moved = dict(params)
        moved["pos_embed"] = Tensor(np.concatenate([pos[:1], pos[1:][perm]]))
        out, _ = forward_features(shuffled, moved, TINY)
        np.testing.assert_allclose(out.data, base.data, atol=1e-12)
        assert sorted(inv) == list(range(16))

    def test_pixel_standardisation_precedes_embedding(self, rng):
        params = init_backbone(TINY, 0)
        img = rng.uniform(size=(3, 16, 16))
        plain = ViTConfig(pixel_mean=0.0, pixel_std=1.0)
        a, _ = forward_features(img, params, TINY)
        b, _ = forward_features((img - 0.5) / 0.25, params, plain)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)
