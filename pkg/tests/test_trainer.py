import math

import numpy as np
import pytest
import torch

from helpers import finite_diff_grads, grad_rel_error
from reinpatch import (
    BackboneConfig,
    BoundaryVector,
    CompressionConfig,
    Forecaster,
    ForecastWindow,
    GrpgTrainer,
    PatchPolicy,
    PolicyConfig,
    TrainConfig,
    group_advantages,
    grpg_surrogate,
    log_prob,
    sample_group,
    train_backbone_with_patcher,
)
from reinpatch.baselines import StaticPatcher
from reinpatch.data import synth_piecewise, windows_from_array
from reinpatch.trainer import FrozenPolicyError, NonFiniteLossError


def tiny_models(seed=0, lookback=16, horizon=4, normalize=True):
    torch.manual_seed(seed)
    policy = PatchPolicy(
        PolicyConfig(d_patch=16, depth=1, heads=2, context_limit=lookback)
    )
    backbone = Forecaster(
        BackboneConfig(
            d_model=8,
            d_latent=8,
            latent_depth=1,
            heads=2,
            horizon=horizon,
            lookback=lookback,
            normalize=normalize,
        )
    )
    return policy, backbone


def toy_windows(n=8, seed=0, lookback=16, horizon=4):
    rng = np.random.default_rng(seed)
    return [
        ForecastWindow.from_arrays(
            rng.normal(size=lookback), rng.normal(size=horizon)
        )
        for _ in range(n)
    ]


class TestGroupAdvantages:
    def test_center_example(self):
        np.testing.assert_allclose(
            group_advantages([1, 2, 3], "center"), [-1.0, 0.0, 1.0]
        )

    def test_identical_rewards_standardize_zero(self):
        np.testing.assert_array_equal(
            group_advantages([2.0, 2.0, 2.0], "standardize"), np.zeros(3)
        )

    def test_standardize_population_sigma(self):
        adv = group_advantages([1, 2, 3], "standardize", eps=1e-8)
        sigma = math.sqrt(2.0 / 3.0)
        np.testing.assert_allclose(
            adv, np.array([-1.0, 0.0, 1.0]) / (sigma + 1e-8), rtol=1e-12
        )
        assert adv[2] == pytest.approx(1.2247, abs=1e-4)

    def test_too_small_group(self):
        with pytest.raises(ValueError):
            group_advantages([1.0], "center")

    def test_centering_sums(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = rng.normal(size=rng.integers(2, 12))
            assert abs(group_advantages(r, "center").sum()) < 1e-9
            assert abs(group_advantages(r, "standardize").sum()) < 1e-9 * r.size

    def test_scale_response(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=6)
        c = 3.7
        np.testing.assert_allclose(
            group_advantages(c * r, "standardize"),
            group_advantages(r, "standardize"),
            atol=1e-9,
        )
        np.testing.assert_allclose(
            group_advantages(c * r, "center"),
            c * group_advantages(r, "center"),
            rtol=1e-12,
        )


class TestSurrogate:
    def test_zero_advantages_zero_surrogate_and_gradient(self):
        policy, _ = tiny_models()
        out = policy(np.zeros(8))
        pairs = sample_group(out, 4, torch.Generator().manual_seed(0))
        s = grpg_surrogate([lp for _, lp in pairs], np.zeros(4))
        assert float(s.detach()) == 0.0
        s.backward()
        for p in policy.parameters():
            assert p.grad is None or torch.all(p.grad == 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            grpg_surrogate([torch.tensor(0.0)], np.zeros(2))

    def test_positive_advantage_increases_log_prob(self):
        policy, _ = tiny_models(seed=5)
        x = np.linspace(-1, 1, 8)
        out = policy(x)
        pairs = sample_group(out, 4, torch.Generator().manual_seed(1))
        target_b = pairs[0][0]
        before = float(log_prob(policy(x), target_b))
        adv = np.array([1.0, 0.0, 0.0, 0.0])
        opt = torch.optim.SGD(policy.parameters(), lr=0.05)
        s = grpg_surrogate([lp for _, lp in pairs], adv)
        opt.zero_grad()
        s.backward()
        opt.step()
        after = float(log_prob(policy(x), target_b))
        assert after > before

    def test_gradient_matches_sum_form_by_finite_differences(self):
        torch.manual_seed(7)
        policy = PatchPolicy(
            PolicyConfig(d_patch=8, depth=1, heads=2, context_limit=6),
            dtype=torch.float64,
        )
        x = torch.as_tensor(np.random.default_rng(2).normal(size=5))
        rng = np.random.default_rng(3)
        bs = [
            BoundaryVector(levels=rng.integers(0, 2, size=5)) for _ in range(3)
        ]
        adv = rng.normal(size=3)

        def scalar():
            out = policy(x)
            return grpg_surrogate([log_prob(out, b) for b in bs], adv)

        s = scalar()
        s.backward()
        analytic = [p.grad.clone() for p in policy.parameters()]
        reference = finite_diff_grads(list(policy.parameters()), scalar)
        assert grad_rel_error(analytic, reference) < 1e-4


class TestTrainStep:
    def test_metrics_and_enforcement_guarantee(self):
        policy, backbone = tiny_models()
        cfg = TrainConfig(
            group_size=4, batch_size=4, epochs=1, min_rate=4.0, seed=0
        )
        trainer = GrpgTrainer(policy, backbone, cfg)
        for _ in range(5):
            m = trainer.train_step(toy_windows(4))
            assert m["realized_compression"] >= 4.0
            assert set(m) >= {
                "step",
                "policy_loss",
                "backbone_loss",
                "mean_reward",
                "realized_compression",
                "entropy",
            }
            assert math.isfinite(m["policy_loss"])

    def test_equal_rewards_leave_policy_unchanged(self):
        # min_rate above the window length forces a single patch for every
        # sample, so all G rewards coincide and every advantage is zero.
        policy, backbone = tiny_models(seed=1)
        cfg = TrainConfig(
            group_size=4, batch_size=2, epochs=1, min_rate=15.5, seed=0,
            weight_decay=0.0,
        )
        trainer = GrpgTrainer(policy, backbone, cfg)
        before = {k: v.clone() for k, v in policy.state_dict().items()}
        m = trainer.train_step(toy_windows(2, seed=3))
        assert m["policy_loss"] == 0.0
        for k, v in policy.state_dict().items():
            assert torch.equal(before[k], v)

    def test_non_finite_loss_aborts_without_update(self):
        policy, backbone = tiny_models(seed=2, normalize=False)
        cfg = TrainConfig(group_size=2, batch_size=1, epochs=1, min_rate=4.0)
        trainer = GrpgTrainer(policy, backbone, cfg)
        w = ForecastWindow.from_arrays(
            np.full(16, 1e30), np.full(4, -1e30)
        )
        before = {k: v.clone() for k, v in backbone.state_dict().items()}
        with pytest.raises(NonFiniteLossError):
            trainer.train_step([w])
        for k, v in backbone.state_dict().items():
            assert torch.equal(before[k], v)

    def test_update_counter_tracks_steps(self):
        policy, backbone = tiny_models(seed=3)
        cfg = TrainConfig(group_size=2, batch_size=4, epochs=1, min_rate=4.0)
        trainer = GrpgTrainer(policy, backbone, cfg)
        for i in range(3):
            trainer.train_step(toy_windows(4, seed=i))
        assert policy.update_count == 3
        assert trainer.global_step == 3

    def test_frozen_policy_request_rejected(self):
        policy, backbone = tiny_models(seed=4)
        policy.freeze()
        cfg = TrainConfig(group_size=2, batch_size=2, epochs=1, min_rate=4.0)
        with pytest.raises(FrozenPolicyError):
            GrpgTrainer(policy, backbone, cfg, train_policy=True)

    def test_frozen_policy_stays_bit_identical(self):
        policy, backbone = tiny_models(seed=5)
        policy.freeze()
        cfg = TrainConfig(group_size=2, batch_size=4, epochs=1, min_rate=4.0)
        trainer = GrpgTrainer(policy, backbone, cfg)
        before = {k: v.clone() for k, v in policy.state_dict().items()}
        backbone_before = {
            k: v.clone() for k, v in backbone.state_dict().items()
        }
        for i in range(5):
            trainer.train_step(toy_windows(4, seed=i))
        for k, v in policy.state_dict().items():
            assert torch.equal(before[k], v)
        assert any(
            not torch.equal(backbone_before[k], v)
            for k, v in backbone.state_dict().items()
        )


class TestTrainLoop:
    def test_step_count_per_epoch(self):
        policy, backbone = tiny_models(seed=6)
        cfg = TrainConfig(
            group_size=2, batch_size=3, epochs=1, min_rate=4.0, seed=0
        )
        trainer = GrpgTrainer(policy, backbone, cfg)
        history = trainer.train(toy_windows(10))
        assert len(history) == math.ceil(10 / 3)

    def test_empty_dataset_rejected(self):
        policy, backbone = tiny_models(seed=7)
        trainer = GrpgTrainer(
            policy, backbone, TrainConfig(group_size=2, epochs=1, min_rate=4.0)
        )
        with pytest.raises(ValueError):
            trainer.train([])

    def test_deterministic_given_seed(self):
        def run():
            policy, backbone = tiny_models(seed=8)
            cfg = TrainConfig(
                group_size=4, batch_size=4, epochs=2, min_rate=4.0, seed=11
            )
            trainer = GrpgTrainer(policy, backbone, cfg)
            return trainer.train(toy_windows(8, seed=9))

        h1, h2 = run(), run()
        assert h1 == h2

    def test_loss_trend_on_piecewise_task(self):
        rng = np.random.default_rng(10)
        series, _ = synth_piecewise(30, (8, 16), 0.05, rng)
        windows = windows_from_array(series, 16, 4, stride=4)
        policy, backbone = tiny_models(seed=11)
        cfg = TrainConfig(
            group_size=4,
            batch_size=16,
            epochs=6,
            min_rate=4.0,
            seed=0,
            lr_backbone=1e-3,
        )
        trainer = GrpgTrainer(policy, backbone, cfg)
        history = trainer.train(windows)
        per_epoch = len(history) // 6
        first = np.mean([h["backbone_loss"] for h in history[:per_epoch]])
        last = np.mean([h["backbone_loss"] for h in history[-per_epoch:]])
        assert last < first


class TestBackboneOnlyTraining:
    def test_static_patcher_training_reduces_loss(self):
        rng = np.random.default_rng(12)
        series, _ = synth_piecewise(30, (8, 16), 0.05, rng)
        windows = windows_from_array(series, 16, 4, stride=4)
        _, backbone = tiny_models(seed=13)
        cfg = TrainConfig(
            group_size=2,
            batch_size=16,
            epochs=6,
            min_rate=4.0,
            seed=0,
            lr_backbone=1e-3,
        )
        history = train_backbone_with_patcher(
            backbone, windows, StaticPatcher(4), cfg
        )
        assert history[-1]["backbone_loss"] < history[0]["backbone_loss"]
        assert all(h["realized_compression"] >= 4.0 for h in history)


class TestBanditQuick:
    def test_boundary_at_zero_learned(self):
        # reward 1 iff the sampled vector marks a boundary at step 0
        torch.manual_seed(21)
        policy = PatchPolicy(
            PolicyConfig(d_patch=16, depth=1, heads=2, context_limit=2)
        )
        opt = torch.optim.AdamW(policy.parameters(), lr=1e-2)
        rng = torch.Generator().manual_seed(0)
        x = np.array([0.5, -0.25])
        prob = 0.0
        for step in range(600):
            out = policy(x)
            pairs = sample_group(out, 8, rng)
            rewards = np.array(
                [1.0 if b.levels[0] >= 1 else 0.0 for b, _ in pairs]
            )
            adv = group_advantages(rewards, "standardize")
            loss = grpg_surrogate([lp for _, lp in pairs], adv)
            opt.zero_grad()
            loss.backward()
            opt.step()
            prob = float(torch.softmax(policy(x).logits[0], dim=-1)[1])
            if prob > 0.95:
                break
        assert prob > 0.95
