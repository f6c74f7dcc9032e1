import numpy as np
from django.test import SimpleTestCase

from trl3d import tensor as T
from trl3d.backbone import (
    BackboneConfig,
    BackboneParams,
    Block,
    InsertModule,
    VisionTransformer,
    attention,
    block_forward,
    patchify,
)
from trl3d.exceptions import ConfigError, ShapeError
from trl3d.geometry import make_patch_grid
from trl3d.gradcheck import check_tensor, perturb
from trl3d.layer import LayerConfig, parameter_count
from trl3d.losses import cross_entropy
from trl3d.optim import SGD
from trl3d.tensor import Rng, Tensor


def small_config(**overrides: object) -> BackboneConfig:
    values = dict(image_size=8, patch_size=4, depth=2, heads=2, embed_dim=8, num_classes=3, insert_at=(1,))
    values.update(overrides)
    values.setdefault("layer_cfg", LayerConfig(embed_dim=int(values["embed_dim"]), stem_hidden=4))  # type: ignore[arg-type]
    return BackboneConfig(**values)  # type: ignore[arg-type]


def images(seed: int, count: int = 2, size: int = 8) -> np.ndarray:
    return Rng(seed).uniform(0.0, 1.0, (count, size, size, 1))


class BackboneConfigTests(SimpleTestCase):
    def test_defaults(self) -> None:
        cfg = BackboneConfig()
        self.assertEqual(cfg.grid_size, 8)
        self.assertEqual(cfg.num_patches, 64)
        assert cfg.layer_cfg is not None
        self.assertEqual(cfg.layer_cfg.embed_dim, 48)

    def test_invalid_configs_raise(self) -> None:
        with self.assertRaises(ConfigError):
            BackboneConfig(image_size=30, patch_size=4)
        with self.assertRaises(ConfigError):
            BackboneConfig(embed_dim=50, heads=3)
        with self.assertRaises(ConfigError):
            BackboneConfig(depth=2, insert_at=(3,))
        with self.assertRaises(ConfigError):
            BackboneConfig(insert_module="conv")  # type: ignore[arg-type]
        with self.assertRaises(ConfigError):
            BackboneConfig(embed_dim=48, layer_cfg=LayerConfig(embed_dim=24))


class PatchifyTests(SimpleTestCase):
    def setUp(self) -> None:
        self.cfg = small_config(image_size=4, patch_size=2)
        self.params = BackboneParams(self.cfg, Rng(0))
        self.grid = make_patch_grid(2, 2)

    def test_token_count(self) -> None:
        batch = patchify(np.zeros((4, 4, 1)), self.cfg, self.params, self.grid)
        self.assertEqual(batch.values.shape, (5, 8))
        self.assertTrue(batch.has_cls)

    def test_zero_image_and_projection_give_positional_embedding(self) -> None:
        self.params.patch_proj.weight.data[:] = 0.0
        tokens = patchify(np.zeros((4, 4, 1)), self.cfg, self.params, self.grid).values.data
        np.testing.assert_array_equal(tokens[1:], self.params.pos_embed.data)
        np.testing.assert_array_equal(tokens[0], self.params.cls_token.data[0])

    def test_patch_order_is_row_major(self) -> None:
        image = np.arange(16.0).reshape(4, 4, 1)
        self.params.patch_proj.weight.data = np.eye(4, 8)
        self.params.pos_embed.data[:] = 0.0
        tokens = patchify(image, self.cfg, self.params, self.grid).values.data
        for k in range(4):
            r, c = 2 * (k // 2), 2 * (k % 2)
            expected = image[r : r + 2, c : c + 2, 0].reshape(-1)
            np.testing.assert_array_equal(tokens[1 + k, :4], expected)

    def test_wrong_image_shape_raises(self) -> None:
        with self.assertRaises(ShapeError):
            patchify(np.zeros((4, 5, 1)), self.cfg, self.params, self.grid)


class BlockTests(SimpleTestCase):
    def setUp(self) -> None:
        self.cfg = small_config()
        self.block = Block(self.cfg, Rng(0))

    def test_zero_weights_give_identity(self) -> None:
        for _, param in self.block.named_parameters():
            param.data = np.zeros_like(param.data)
        x = Tensor(Rng(1).normal(0.0, 1.0, (2, 5, 8)))
        np.testing.assert_array_equal(block_forward(x, self.block, 2).data, x.data)

    def test_attention_rows_sum_to_one(self) -> None:
        x = Tensor(Rng(2).normal(0.0, 1.0, (3, 5, 8)))
        out, weights = attention(x, self.block, 2)
        self.assertEqual(out.shape, (3, 5, 8))
        self.assertEqual(weights.shape, (3, 2, 5, 5))
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0)

    def test_gradient_through_block(self) -> None:
        x = Tensor(Rng(3).normal(0.0, 1.0, (5, 8)), requires_grad=True)
        projection = Rng(4).normal(0.0, 1.0, (5, 8))

        def loss() -> Tensor:
            return T.tsum(block_forward(x, self.block, 2) * projection)

        loss().backward()
        self.assertTrue(check_tensor("x", x, loss, 10, Rng(5)).passed)
        self.assertTrue(check_tensor("qkv", self.block.qkv.weight, loss, 10, Rng(6)).passed)


class VisionTransformerTests(SimpleTestCase):
    def test_logits_and_embedding_heads(self) -> None:
        model = VisionTransformer(small_config(), Rng(0))
        out = model(images(1))
        assert out.logits is not None
        self.assertEqual(out.logits.shape, (2, 3))
        self.assertEqual(len(out.layer_outputs), 1)

        embedder = VisionTransformer(small_config(num_classes=0), Rng(0))
        embedding = embedder(images(1)).embedding
        assert embedding is not None
        np.testing.assert_allclose(np.linalg.norm(embedding.data, axis=-1), 1.0)

    def test_empty_insert_at_is_plain_backbone(self) -> None:
        model = VisionTransformer(small_config(insert_at=()), Rng(0))
        self.assertEqual(model.trl3d, [])
        self.assertEqual(model.num_parameters(), model.backbone.num_parameters())
        self.assertEqual(model(images(2)).layer_outputs, [])

    def test_identity_at_initialisation(self) -> None:
        batch = images(3)
        baseline = VisionTransformer(small_config(insert_at=()), Rng(7))
        with_layer = VisionTransformer(small_config(insert_at=(1,)), Rng(7))
        for (name, a), (_, b) in zip(baseline.backbone.named_parameters(), with_layer.backbone.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        first, second = baseline(batch).logits, with_layer(batch).logits
        assert first is not None and second is not None
        np.testing.assert_array_equal(first.data, second.data)

    def test_one_training_step_breaks_identity(self) -> None:
        batch, labels = images(4), np.array([0, 2])
        baseline = VisionTransformer(small_config(insert_at=()), Rng(7))
        with_layer = VisionTransformer(small_config(insert_at=(1,)), Rng(7))
        for model in (baseline, with_layer):
            logits = model(batch).logits
            assert logits is not None
            cross_entropy(logits, labels).backward()
            SGD(model.parameters(), lr=0.1).step()
        first, second = baseline(batch).logits, with_layer(batch).logits
        assert first is not None and second is not None
        self.assertFalse(np.array_equal(first.data, second.data))

    def test_several_insertions_have_independent_parameters(self) -> None:
        cfg = small_config(depth=3, insert_at=(1, 2, 3))
        model = VisionTransformer(cfg, Rng(0))
        assert cfg.layer_cfg is not None
        self.assertEqual(len(model.trl3d), 3)
        self.assertEqual(
            model.num_parameters(), model.backbone.num_parameters() + 3 * parameter_count(cfg.layer_cfg)
        )
        names = [name for name, _ in model.named_parameters() if name.startswith("trl3d.")]
        self.assertEqual({name.split(".")[1] for name in names}, {"0", "1", "2"})
        self.assertFalse(
            np.array_equal(model.trl3d[0].depth_mlp.layers[0].weight.data, model.trl3d[1].depth_mlp.layers[0].weight.data)
        )
        self.assertEqual(len(model(images(5)).layer_outputs), 3)

    def test_repeated_insertion_point(self) -> None:
        model = VisionTransformer(small_config(insert_at=(1, 1)), Rng(0))
        self.assertEqual(len(model(images(6)).layer_outputs), 2)

    def test_mlp_control_variant(self) -> None:
        model = VisionTransformer(small_config(insert_module=InsertModule.MLP), Rng(0))
        self.assertEqual(len(model.mlp), 1)
        out = model(images(7))
        self.assertEqual(out.layer_outputs, [])
        baseline = VisionTransformer(small_config(insert_at=()), Rng(0))
        assert out.logits is not None
        np.testing.assert_array_equal(out.logits.data, baseline(images(7)).logits.data)  # type: ignore[union-attr]

    def test_clip_forward_gives_one_embedding_per_frame(self) -> None:
        model = VisionTransformer(small_config(num_classes=0), Rng(0))
        out = model(images(8, count=5), clip=True)
        assert out.embedding is not None
        self.assertEqual(out.embedding.shape, (5, 8))
        self.assertEqual(len(out.layer_outputs[0].extrinsics()), 5)

    def test_full_model_gradients(self) -> None:
        model = VisionTransformer(small_config(), Rng(9))
        perturb(model, Rng(10))
        batch, labels = images(11), np.array([1, 2])

        def loss() -> Tensor:
            logits = model(batch).logits
            assert logits is not None
            return cross_entropy(logits, labels)

        loss().backward()
        for name, param in model.named_parameters():
            self.assertTrue(check_tensor(name, param, loss, 2, Rng(12).child(name)).passed, name)
