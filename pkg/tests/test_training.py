import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch

import attnrefine.training as training
from attnrefine.data import FindingSpec, SyntheticConfig, generate_synthetic
from attnrefine.losses import LossConfig
from attnrefine.metrics import dice_at
from attnrefine.model import build_model, params_hash
from attnrefine.training import (
    ExpertModel,
    TrainConfig,
    TrainingDiverged,
    checkpoint_hash,
    finding_schedule,
    finetune_model,
    make_optimizer,
    pretrain_backbone,
    pretrain_config,
    run_training,
    teacher_targets,
    train_cls_only,
    train_direct_attention,
    train_dwarf,
    train_dwarf_with_teachers,
    train_expert,
    train_gain,
)

FAST = TrainConfig(epochs=3, pretrain_samples=0, eval_every=1)


def heads_of(model):
    return [(h.weight.detach().clone(), h.bias.detach().clone()) for h in model.seg_heads]


def same_heads(a, b):
    return all(torch.equal(wa, wb) and torch.equal(ba, bb) for (wa, ba), (wb, bb) in zip(a, b))


class GroundTruthExpert:
    """Stands in for a perfect expert: returns the stored masks of known images."""

    def __init__(self, ds, finding):
        self.images = ds.images()
        self.masks = ds.mask_array(finding)

    def pseudo_masks(self, images, threshold=0.5):
        idx = [int(np.nonzero((self.images == im).reshape(len(self.images), -1).all(1))[0][0]) for im in images]
        return torch.as_tensor(self.masks[idx], dtype=torch.float32)


class TestSchedule:
    def test_fixed_order(self):
        assert finding_schedule(3, 7) == [0, 1, 2, 0, 1, 2, 0]

    def test_shuffled_blocks_are_permutations(self):
        order = finding_schedule(4, 12, shuffle=True, seed=5)
        assert order == finding_schedule(4, 12, shuffle=True, seed=5)
        for i in range(0, 12, 4):
            assert sorted(order[i:i + 4]) == [0, 1, 2, 3]

    def test_history_follows_catalog(self, tiny_splits):
        train = tiny_splits[0]
        state = train_dwarf(train, replace(FAST, epochs=5))
        names = list(train.catalog)
        assert [r["finding"] for r in state.history] == [names[e % 3] for e in range(5)]
        assert state.epoch == 5 and state.finding_cursor == 1

    def test_joint_arms_see_all_samples(self, tiny_splits):
        state = train_gain(tiny_splits[0], replace(FAST, epochs=1))
        assert state.history[0]["finding"] == "all"
        assert state.history[0]["n_samples"] == len(tiny_splits[0])


class TestArms:
    def test_cls_only_leaves_heads(self, tiny_splits):
        model = build_model(tiny_splits[0].catalog, seed=0, init_mode="random")
        before = heads_of(model)
        state = train_cls_only(tiny_splits[0], replace(FAST, init_mode="random"), model=model)
        assert same_heads(before, heads_of(state.model))

    def test_direct_attention_leaves_heads_moves_backbone(self, tiny_splits):
        model = build_model(tiny_splits[0].catalog, seed=0)
        before, embed = heads_of(model), model.patch_embed.weight.detach().clone()
        state = train_direct_attention(tiny_splits[0], FAST, model=model)
        assert same_heads(before, heads_of(state.model))
        assert not torch.equal(embed, state.model.patch_embed.weight)

    def test_gain_on_raw_attention_leaves_heads(self, tiny_splits):
        model = build_model(tiny_splits[0].catalog, seed=0)
        before = heads_of(model)
        state = train_gain(tiny_splits[0], replace(FAST, gain_use_heads=False), model=model)
        assert same_heads(before, heads_of(state.model))

    def test_gain_with_heads_trains_heads(self, tiny_splits):
        model = build_model(tiny_splits[0].catalog, seed=0)
        before = heads_of(model)
        state = train_gain(tiny_splits[0], replace(FAST, epochs=1), model=model)
        changed = [not torch.equal(a[0], b[0]) for a, b in zip(before, heads_of(state.model))]
        assert all(changed)

    def test_seg_loss_touches_only_its_head(self, tiny_splits):
        train = tiny_splits[0]
        model = build_model(train.catalog, seed=0)
        labels = train.label_matrix()
        rows = np.nonzero(labels[:, 1])[0][:4]
        x = torch.as_tensor(train.images()[rows])
        _, _, refined = model(x, 1)
        refined.sum().backward()
        for k, head in enumerate(model.seg_heads):
            has_grad = head.weight.grad is not None and bool(head.weight.grad.abs().sum() > 0)
            assert has_grad == (k == 1)
        assert model.ca_key.weight.grad.abs().sum() > 0

    def test_dwarf_epoch_only_updates_trained_head(self, tiny_splits):
        model = build_model(tiny_splits[0].catalog, seed=0)
        before = heads_of(model)
        state = train_dwarf(tiny_splits[0], replace(FAST, epochs=1), model=model)
        after = heads_of(state.model)
        assert not torch.equal(before[0][0], after[0][0])
        assert same_heads(before[1:], after[1:])

    def test_alpha_zero_dwarf_equals_cyclic_cls_only(self, tiny_splits):
        cfg = replace(FAST, loss=LossConfig(alpha_seg=0.0))
        a = train_dwarf(tiny_splits[0], cfg)
        b = train_cls_only(tiny_splits[0], replace(cfg, schedule="cyclic"))
        assert checkpoint_hash(a) == checkpoint_hash(b)

    def test_single_finding_gain_matches_dwarf(self):
        cfg_data = SyntheticConfig(n_train=40, n_val=1, n_test=1, findings=(FindingSpec("Mass", "disc", (5, 9)),))
        train, _, _ = generate_synthetic(cfg_data)
        cfg = replace(FAST, negative_ratio=1e6, model=replace(FAST.model))
        a = train_dwarf(train, cfg).model.state_dict()
        b = train_gain(train, cfg).model.state_dict()
        for key in a:
            torch.testing.assert_close(a[key], b[key], atol=1e-5, rtol=1e-5)

    def test_perfect_teachers_reproduce_dwarf(self, tiny_splits):
        train = tiny_splits[0]
        experts = {n: GroundTruthExpert(train, n) for n in train.catalog}
        a = train_dwarf(train, FAST)
        b = train_dwarf_with_teachers(train, experts, FAST)
        assert checkpoint_hash(a) == checkpoint_hash(b)
        assert [r["seg_loss"] for r in a.history] == [r["seg_loss"] for r in b.history]

    def test_missing_teacher(self, tiny_splits):
        train = tiny_splits[0]
        with pytest.raises(ValueError, match="missing expert"):
            teacher_targets(train, {"Mass": GroundTruthExpert(train, "Mass")})

    @pytest.mark.parametrize("arm", ["dwarf", "cls_only", "gain", "direct_attention"])
    def test_deterministic(self, tiny_splits, arm):
        cfg = replace(FAST, arm=arm, epochs=2)
        a = run_training(tiny_splits[0], cfg, tiny_splits[1])
        b = run_training(tiny_splits[0], cfg, tiny_splits[1])
        assert checkpoint_hash(a) == checkpoint_hash(b)
        assert a.history == b.history

    def test_cls_loss_decreases(self, tiny_splits):
        state = train_cls_only(tiny_splits[0], replace(FAST, epochs=10))
        losses = [r["cls_loss"] for r in state.history]
        assert losses[-1] < losses[0]

    def test_divergence_reported(self, tiny_splits, monkeypatch):
        monkeypatch.setattr(training, "cls_loss", lambda logits, labels: logits.sum() * float("nan"))
        with pytest.raises(TrainingDiverged, match="epoch 0, step 0"):
            train_dwarf(tiny_splits[0], FAST)


class TestValidation:
    def test_cadence_and_best(self, tiny_splits):
        state = train_dwarf(tiny_splits[0], replace(FAST, epochs=7, eval_every=3), tiny_splits[1])
        evaluated = [r["epoch"] + 1 for r in state.history if "val" in r]
        assert evaluated == [3, 6, 7]
        for crit in ("max_dice", "auc"):
            best = state.best[crit]
            scores = [r["val"][crit] for r in state.history if "val" in r]
            assert best["score"] == max(scores)
            assert best["epoch"] == evaluated[scores.index(max(scores))]

    @pytest.mark.parametrize("kw", [
        dict(epochs=0), dict(arm="nope"), dict(init_mode="zeros"), dict(schedule="random"),
        dict(negative_ratio=-1), dict(head_lr_mult=0), dict(pretrain_samples=-1), dict(learning_rate=0),
    ])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError, match="train\\."):
            TrainConfig(**kw)

    def test_config_hash(self):
        assert TrainConfig().config_hash() == TrainConfig().config_hash()
        assert TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()


class TestWarmStart:
    def test_optimizer_groups(self):
        model = build_model(SyntheticConfig().catalog)
        opt = make_optimizer(model, TrainConfig(learning_rate=1e-3, head_lr_mult=10))
        assert [g["lr"] for g in opt.param_groups] == [1e-3, pytest.approx(1e-2)]
        n_heads = sum(p.numel() for p in model.seg_heads.parameters())
        assert sum(p.numel() for p in opt.param_groups[1]["params"]) == n_heads

    def test_pretrain_independent_of_arm(self, tiny_splits):
        cfg = TrainConfig(pretrain_samples=48, pretrain_epochs=1)
        assert pretrain_config(replace(cfg, arm="gain", epochs=9)) == pretrain_config(cfg)
        a = pretrain_backbone(tiny_splits[0], cfg)
        b = pretrain_backbone(tiny_splits[0], replace(cfg, arm="direct_attention", init_mode="random"))
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_finetune_model_resets_heads(self, tiny_splits):
        cfg = TrainConfig(pretrain_samples=48, pretrain_epochs=1)
        backbone = pretrain_backbone(tiny_splits[0], cfg)
        with torch.no_grad():
            backbone["seg_heads.0.bias"] += 1
        model = finetune_model(tiny_splits[0].catalog, cfg, backbone)
        assert torch.equal(model.seg_heads[0].weight, torch.eye(4))
        assert torch.count_nonzero(model.seg_heads[0].bias) == 0
        assert torch.equal(model.patch_embed.weight, backbone["patch_embed.weight"])
        fresh = finetune_model(tiny_splits[0].catalog, cfg)
        assert params_hash(fresh) == params_hash(build_model(tiny_splits[0].catalog, cfg.model, cfg.seed))


@pytest.fixture(scope="module")
def bench():
    return generate_synthetic(SyntheticConfig(seed=0))


class TestExperts:
    def test_disc_expert_generalizes(self, bench):
        train, _, test = bench
        expert = train_expert(train, "Mass", TrainConfig(seed=0))
        k = test.catalog.index("Mass")
        pos = test.label_matrix()[:, k] == 1
        pred = expert.predict(test.images()[pos]).numpy()
        gt = test.mask_array("Mass")[pos]
        assert np.mean([dice_at(p, g, 0.5) for p, g in zip(pred, gt)]) > 0.5

    def test_frozen_and_deterministic(self, tiny_splits):
        train = tiny_splits[0]
        cfg = TrainConfig(expert_epochs=2, pretrain_samples=0)
        a = train_expert(train, "Mass", cfg)
        b = train_expert(train, "Mass", cfg)
        assert isinstance(a, ExpertModel)
        assert all(not p.requires_grad for p in a.net.parameters())
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            assert torch.equal(pa, pb)
        before = [p.clone() for p in a.net.parameters()]
        experts = {n: a if n == "Mass" else train_expert(train, n, cfg) for n in train.catalog}
        train_dwarf_with_teachers(train, experts, replace(cfg, epochs=2))
        assert all(torch.equal(p, q) for p, q in zip(before, a.net.parameters()))

    def test_no_positives(self):
        specs = (FindingSpec("A", "disc", (4, 6)), FindingSpec("B", "square", (6, 8)))
        train, _, _ = generate_synthetic(SyntheticConfig(n_train=10, n_val=1, n_test=1, findings=specs))
        for s in train.samples:
            s.labels[1] = 0
            s.masks.pop("B", None)
        with pytest.raises(ValueError, match="no positive"):
            train_expert(train, "B", TrainConfig(expert_epochs=1))
