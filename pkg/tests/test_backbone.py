import numpy as np
import pytest
import torch

from helpers import finite_diff_grads, grad_rel_error, random_boundary_vector
from reinpatch import (
    BackboneConfig,
    BoundaryVector,
    CompressionConfig,
    Forecaster,
    ForecastWindow,
    enforce_min_compression,
    reward,
    static_partition,
    task_loss,
)
from reinpatch.backbone import partitions_for


def tiny_backbone(seed=0, dtype=torch.float32, **kw):
    torch.manual_seed(seed)
    defaults = dict(
        d_model=16, d_latent=16, latent_depth=1, heads=2, horizon=8, lookback=32
    )
    defaults.update(kw)
    return Forecaster(BackboneConfig(**defaults), dtype=dtype)


def window(seed=0, lookback=32, horizon=8):
    rng = np.random.default_rng(seed)
    return ForecastWindow.from_arrays(
        rng.normal(size=lookback), rng.normal(size=horizon)
    )


class TestEmbedSteps:
    def test_shape(self):
        f = tiny_backbone()
        emb = f.embed_steps(np.zeros(96)) if f.cfg.lookback else None
        assert tuple(emb.shape) == (96, 16)

    def test_zero_input_zero_bias(self):
        f = tiny_backbone()
        with torch.no_grad():
            f.step_embed.bias.zero_()
        emb = f.embed_steps(np.zeros(10))
        assert torch.all(emb == 0)

    def test_affine_identity(self):
        # embed(a*x) - a*embed(x) == (1-a) * bias on every row
        f = tiny_backbone()
        rng = np.random.default_rng(1)
        x = rng.normal(size=12)
        alpha = 1.7
        lhs = f.embed_steps(alpha * x) - alpha * f.embed_steps(x)
        expected = (1 - alpha) * f.step_embed.bias
        assert torch.allclose(lhs, expected.expand_as(lhs), atol=1e-5)


class TestDownsample:
    def test_singleton_spans_equal_per_step_lift(self):
        f = tiny_backbone()
        emb = f.embed_steps(np.random.default_rng(2).normal(size=8))
        part = static_partition(8, 1)
        got = f.downsample(emb, part)
        expected = f.down[0](emb)
        assert torch.allclose(got, expected, atol=1e-6)

    def test_constant_steps_give_equal_patches(self):
        f = tiny_backbone()
        emb = f.embed_steps(np.ones(12))
        got = f.downsample(emb, static_partition(12, 3))
        assert torch.allclose(got, got[0].expand_as(got), atol=1e-6)

    def test_matches_mean_then_lift_oracle(self):
        f = tiny_backbone()
        emb = f.embed_steps(np.random.default_rng(3).normal(size=16))
        b = random_boundary_vector(np.random.default_rng(4), 16)
        part = partitions_for(b, 1)[0]
        got = f.downsample(emb, part)
        for i, (start, end) in enumerate(part.spans):
            mean = emb[start : end + 1].mean(dim=0)
            assert torch.allclose(got[i], f.down[0](mean), atol=1e-6)

    def test_cross_attention_shape_and_singletons(self):
        f = tiny_backbone(downsample_mode="cross_attention")
        emb = f.embed_steps(np.random.default_rng(5).normal(size=8))
        part = static_partition(8, 1)
        got = f.downsample(emb, part)
        assert tuple(got.shape) == (8, 16)
        # a span of one step pools to exactly its own value projection
        assert torch.allclose(got, f.down[0].value(emb), atol=1e-6)


class TestLatentEncode:
    def test_shape_preserving(self):
        f = tiny_backbone()
        patches = torch.randn(5, 16)
        assert tuple(f.latent_encode(patches).shape) == (5, 16)

    def test_single_patch(self):
        f = tiny_backbone()
        patches = torch.randn(1, 16)
        out = f.latent_encode(patches)
        assert tuple(out.shape) == (1, 16)
        assert torch.isfinite(out).all()

    def test_permutation_equivariance_without_positions(self):
        f = tiny_backbone(latent_positional=False, dtype=torch.float64)
        patches = torch.randn(7, 16, dtype=torch.float64)
        perm = torch.randperm(7, generator=torch.Generator().manual_seed(0))
        direct = f.latent_encode(patches)[perm]
        permuted = f.latent_encode(patches[perm])
        assert torch.allclose(direct, permuted, atol=1e-12)


class TestUpsample:
    def test_zero_context_is_identity_with_zero_bias(self):
        f = tiny_backbone()
        with torch.no_grad():
            f.up[0].bias.zero_()
        emb = f.embed_steps(np.random.default_rng(6).normal(size=10))
        part = static_partition(10, 5)
        got = f.upsample(torch.zeros(2, 16), part, emb)
        assert torch.equal(got, emb)

    def test_matches_gather_then_add_oracle(self):
        f = tiny_backbone()
        emb = f.embed_steps(np.random.default_rng(7).normal(size=12))
        b = random_boundary_vector(np.random.default_rng(8), 12)
        part = partitions_for(b, 1)[0]
        ctx = torch.randn(part.num_patches, 16)
        got = f.upsample(ctx, part, emb)
        patch_of = part.patch_of()
        for t in range(12):
            expected = emb[t] + f.up[0](ctx[patch_of[t]])
            assert torch.allclose(got[t], expected, atol=1e-6)

    def test_singleton_spans(self):
        f = tiny_backbone()
        emb = f.embed_steps(np.random.default_rng(9).normal(size=6))
        part = static_partition(6, 1)
        ctx = torch.randn(6, 16)
        got = f.upsample(ctx, part, emb)
        assert torch.allclose(got, emb + f.up[0](ctx), atol=1e-6)


class TestForecast:
    def test_output_shape(self):
        f = tiny_backbone()
        w = window()
        b = random_boundary_vector(np.random.default_rng(10), 32)
        pred = f.forecast(w, b, CompressionConfig(min_rate=4.0))
        assert pred.shape == (8,)
        assert np.isfinite(pred).all()

    def test_enforcement_equivalence(self):
        # two proposals that coincide after enforcement -> identical output
        f = tiny_backbone()
        w = window(1)
        comp = CompressionConfig(min_rate=8.0)
        rng = np.random.default_rng(11)
        b1 = random_boundary_vector(rng, 32)
        b2 = enforce_min_compression(b1, comp)
        p1 = f.forecast(w, b1, comp)
        p2 = f.forecast(w, b2, comp)
        assert np.array_equal(p1, p2)

    def test_all_ones_equals_static_size_one(self):
        f = tiny_backbone()
        w = window(2)
        comp = CompressionConfig(min_rate=1.0001)
        ones = BoundaryVector(levels=np.ones(32, dtype=int))
        from reinpatch import partition_to_boundaries

        static = partition_to_boundaries(static_partition(32, 1))
        assert np.array_equal(
            f.forecast(w, ones, comp), f.forecast(w, static, comp)
        )

    def test_length_mismatch_rejected(self):
        f = tiny_backbone()
        w = window(3, lookback=16)
        b = random_boundary_vector(np.random.default_rng(12), 16)
        with pytest.raises(ValueError):
            f.forecast(w, b, CompressionConfig(min_rate=4.0))

    def test_constant_window_instance_norm_finite(self):
        f = tiny_backbone()
        w = ForecastWindow.from_arrays(np.full(32, 3.25), np.zeros(8))
        b = random_boundary_vector(np.random.default_rng(13), 32)
        pred = f.forecast(w, b, CompressionConfig(min_rate=4.0))
        assert np.isfinite(pred).all()

    def test_deterministic(self):
        f = tiny_backbone()
        w = window(4)
        b = random_boundary_vector(np.random.default_rng(14), 32)
        comp = CompressionConfig(min_rate=4.0)
        assert np.array_equal(f.forecast(w, b, comp), f.forecast(w, b, comp))

    def test_cross_attention_pipeline_finite(self):
        f = tiny_backbone(
            downsample_mode="cross_attention", upsample_mode="cross_attention"
        )
        w = window(5)
        b = random_boundary_vector(np.random.default_rng(15), 32)
        pred = f.forecast(w, b, CompressionConfig(min_rate=4.0))
        assert pred.shape == (8,) and np.isfinite(pred).all()

    def test_two_level_hierarchy(self):
        f = tiny_backbone(num_levels=2)
        w = window(6)
        rng = np.random.default_rng(16)
        b = random_boundary_vector(rng, 32, num_levels=2)
        comp = CompressionConfig(min_rate=2.0, level_rates=(2.0, 8.0))
        pred = f.forecast(w, b, comp)
        assert pred.shape == (8,) and np.isfinite(pred).all()

    def test_batched_matches_single(self):
        f = tiny_backbone()
        comp = CompressionConfig(min_rate=4.0)
        rng = np.random.default_rng(17)
        ws = [window(20 + i) for i in range(3)]
        bs = [
            enforce_min_compression(random_boundary_vector(rng, 32), comp)
            for _ in range(3)
        ]
        singles = np.stack([f.forecast(w, b, comp) for w, b in zip(ws, bs)])
        inputs = torch.as_tensor(np.stack([w.input for w in ws]), dtype=f.dtype)
        stats = (
            torch.tensor([w.norm_mean for w in ws]),
            torch.tensor([w.norm_std for w in ws]),
        )
        parts = [partitions_for(b, 1) for b in bs]
        with torch.no_grad():
            batched = f.forward_batch(inputs, parts, stats).numpy()
        assert np.allclose(batched, singles, atol=1e-5)


class TestLossAndReward:
    def test_perfect_prediction(self):
        assert task_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert reward(np.array([1.0]), np.array([1.0])) == 0.0

    def test_unit_example(self):
        assert task_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == 1.0
        assert reward(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == -1.0

    def test_matches_hand_mse(self):
        rng = np.random.default_rng(18)
        a, b = rng.normal(size=20), rng.normal(size=20)
        assert task_loss(a, b) == pytest.approx(np.mean((a - b) ** 2), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            task_loss(np.zeros(3), np.zeros(4))


class TestGradients:
    def test_task_loss_gradient_matches_finite_differences(self):
        f = tiny_backbone(
            seed=3,
            dtype=torch.float64,
            d_model=8,
            d_latent=8,
            heads=2,
            horizon=3,
            lookback=8,
        )
        n_params = sum(p.numel() for p in f.parameters())
        assert n_params <= 5000
        rng = np.random.default_rng(19)
        w = ForecastWindow.from_arrays(rng.normal(size=8), rng.normal(size=3))
        b = enforce_min_compression(
            random_boundary_vector(rng, 8), CompressionConfig(min_rate=2.0)
        )
        parts = [partitions_for(b, 1)]
        x = torch.as_tensor(w.input, dtype=torch.float64).unsqueeze(0)
        stats = (torch.tensor([w.norm_mean]), torch.tensor([w.norm_std]))
        target = torch.as_tensor(w.target, dtype=torch.float64)

        def scalar():
            pred = f.forward_batch(x, parts, stats)[0]
            return task_loss(pred, target)

        loss = scalar()
        loss.backward()
        analytic = [p.grad.clone() for p in f.parameters()]
        reference = finite_diff_grads(list(f.parameters()), scalar)
        assert grad_rel_error(analytic, reference) < 1e-4
