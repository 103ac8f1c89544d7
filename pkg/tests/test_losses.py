import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attnrefine.losses import (
    LossConfig,
    batch_seg_loss,
    cls_loss,
    fp_dice_score,
    seg_loss,
    soft_dice_score,
    total_loss,
)
from oracles import central_diff, rel_err


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class TestDiceScores:
    def test_empty_empty_is_one(self):
        z = np.zeros(4)
        assert float(soft_dice_score(z, z, LossConfig(smooth=1), eps=0.0)) == 1.0

    def test_worked_soft_dice(self):
        # (2*1 + 1) / (2 + 1 + 1)
        v = soft_dice_score([1, 1, 0, 0], [1, 0, 0, 0], LossConfig(smooth=1), eps=0.0)
        assert float(v) == 0.75

    def test_worked_fp_dice(self):
        # FP = 1, denominator 2 + 1 + (2 - 1) * 1 + 1
        v = fp_dice_score([1, 1, 0, 0], [1, 0, 0, 0], LossConfig(smooth=1, w_fp=2), eps=0.0)
        assert float(v) == 0.6

    def test_perfect_overlap(self):
        m = np.zeros((5, 5))
        m[1:3, 2:4] = 1
        for w in (1.0, 2.0, 7.5):
            cfg = LossConfig(smooth=1, w_fp=w)
            assert float(soft_dice_score(m, m, cfg, eps=0.0)) == 1.0
            assert float(fp_dice_score(m, m, cfg, eps=0.0)) == 1.0

    def test_wfp_one_matches_plain(self):
        rng = np.random.default_rng(0)
        cfg = LossConfig(w_fp=1.0)
        for _ in range(50):
            p = rng.random((6, 7))
            g = rng.random((6, 7)) > 0.5
            assert float(fp_dice_score(p, g, cfg)) == pytest.approx(float(soft_dice_score(p, g, cfg)), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            soft_dice_score(np.zeros(4), np.zeros(5))

    def test_out_of_range_pred(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            fp_dice_score(np.array([1.2, 0.0]), np.array([1, 0]))

    @pytest.mark.parametrize("kw", [dict(eps=0.0), dict(w_fp=0.5), dict(smooth=-1.0), dict(alpha_seg=-0.1)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


@st.composite
def pred_target(draw):
    h = draw(st.integers(1, 8))
    w = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return rng.random((h, w)), (rng.random((h, w)) > 0.5).astype(float)


@settings(max_examples=200, deadline=None)
@given(pred_target(), st.floats(1.0, 10.0), st.floats(0.0, 3.0))
def test_scores_in_unit_interval(pt, w_fp, smooth):
    p, g = pt
    cfg = LossConfig(smooth=smooth, w_fp=w_fp)
    for fn in (soft_dice_score, fp_dice_score):
        v = float(fn(p, g, cfg))
        assert 0 < v <= 1 + 1e-12


@settings(max_examples=200, deadline=None)
@given(pred_target(), st.floats(1.0, 5.0), st.floats(0.0, 5.0))
def test_fp_dice_nonincreasing_in_weight(pt, w, dw):
    p, g = pt
    lo = float(fp_dice_score(p, g, LossConfig(w_fp=w)))
    hi = float(fp_dice_score(p, g, LossConfig(w_fp=w + dw)))
    fp = float((p * (1 - g)).sum())
    if fp == 0:
        assert lo == hi
    else:
        assert hi <= lo + 1e-15


@settings(max_examples=100, deadline=None)
@given(pred_target(), st.integers(0, 2**32 - 1))
def test_permutation_invariance(pt, seed):
    p, g = pt
    perm = np.random.default_rng(seed).permutation(p.size)
    pp, gp = p.reshape(-1)[perm], g.reshape(-1)[perm]
    cfg = LossConfig()
    for fn in (soft_dice_score, fp_dice_score):
        assert float(fn(pp, gp, cfg)) == pytest.approx(float(fn(p, g, cfg)), abs=1e-12)


class TestSegLoss:
    def test_perfect_is_zero(self):
        m = np.zeros((4, 4))
        m[:2] = 1
        assert float(seg_loss(m, m)) == pytest.approx(0.0, abs=1e-15)

    def test_worst_case_near_one(self):
        g = np.array([1.0, 0.0, 1.0, 0.0])
        loss = float(seg_loss(1 - g, g, LossConfig(smooth=0.0, eps=1e-6, w_fp=1.0)))
        # 1 - eps / (4 + eps)
        assert loss == pytest.approx(1 - 1e-6 / (4 + 1e-6), abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        cfg = LossConfig(smooth=1.0, w_fp=2.0)
        for _ in range(10):
            p = t64(rng.uniform(0.05, 0.95, (4, 5))).requires_grad_()
            g = t64(rng.random((4, 5)) > 0.5)
            seg_loss(p, g, cfg).backward()
            fd = central_diff(lambda x: seg_loss(x, g, cfg), p)
            assert rel_err(p.grad, fd) < 1e-4

    def test_batch_mean_of_samples(self):
        rng = np.random.default_rng(2)
        p = t64(rng.random((3, 4, 4)))
        g = t64(rng.random((3, 4, 4)) > 0.5)
        expected = np.mean([float(seg_loss(p[i], g[i])) for i in range(3)])
        assert float(batch_seg_loss(p, g)) == pytest.approx(expected, abs=1e-12)


class TestClsLoss:
    def test_zero_logits_ln2(self):
        assert float(cls_loss(t64([0.0, 0.0, 0.0]), t64([1, 0, 1]))) == pytest.approx(np.log(2), abs=1e-15)

    def test_saturated_correct(self):
        assert float(cls_loss(t64([20.0]), t64([1.0]))) == pytest.approx(0.0, abs=1e-8)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            cls_loss(t64([0.0, 1.0]), t64([1.0]))

    def test_matches_manual_bce(self):
        z = np.array([-2.0, 0.3, 4.0])
        y = np.array([0.0, 1.0, 1.0])
        p = 1 / (1 + np.exp(-z))
        manual = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert float(cls_loss(t64(z), t64(y))) == pytest.approx(manual, abs=1e-12)


class TestTotalLoss:
    def test_alpha_zero(self):
        assert total_loss(0.4, 0.9, LossConfig(alpha_seg=0.0)) == 0.4

    def test_arithmetic(self):
        assert total_loss(0.5, 0.25, LossConfig(alpha_seg=1.0)) == 0.75

    def test_monotone_in_seg(self):
        cfg = LossConfig(alpha_seg=0.7)
        vals = [total_loss(0.3, s, cfg) for s in np.linspace(0, 1, 11)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            total_loss(float("nan"), 0.1)
        with pytest.raises(ValueError, match="non-finite"):
            total_loss(0.1, float("inf"))
