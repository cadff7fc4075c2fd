import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fewseg.losses import (
    LossBreakdown,
    LossWeights,
    composite_loss,
    compute_composite,
    distillation,
    entropy_regularizer,
    weighted_bce,
)
from fewseg.models import EPS_P, get_parameters
from tests.conftest import ToyConvModel, random_batch


# --- independent scalar references (pure python loops) -----------------------

def bce_reference(predictions, masks, weights):
    per_sample = []
    for pred, mask, w in zip(predictions, masks, weights):
        acc = 0.0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = min(max(pred[i, j], EPS_P), 1.0 - EPS_P)
                y = mask[i, j]
                acc += w * y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
        per_sample.append(-acc)
    return sum(per_sample) / len(per_sample)


def er_reference(predictions):
    per_sample = []
    for pred in predictions:
        acc = 0.0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = min(max(pred[i, j], EPS_P), 1.0 - EPS_P)
                acc += -p * math.log(p)
        per_sample.append(acc)
    return sum(per_sample) / len(per_sample)


def dist_reference(latents_m, latents_p):
    acc = 0.0
    for a in latents_m:
        for b in latents_p:
            acc += float(((np.asarray(a) - np.asarray(b)) ** 2).sum())
    return acc / (len(latents_m) * len(latents_p))


def _rand_preds(rng, n, size=8):
    return [rng.uniform(0.01, 0.99, size=(size, size)) for _ in range(n)]


def _rand_masks(rng, n, size=8):
    return [(rng.uniform(size=(size, size)) > 0.5).astype(np.float64) for _ in range(n)]


class TestWeightedBCE:
    def test_hand_computed_2x2(self):
        # mask [[1,0],[0,0]], w=3, uniform prediction 0.5:
        # fg term 3*ln2, bg terms 3*ln2 -> 6*ln2
        pred = torch.full((2, 2), 0.5, dtype=torch.float64)
        mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        loss = weighted_bce([pred], [mask], [3.0])
        assert float(loss) == pytest.approx(6 * math.log(2), rel=1e-12)
        assert float(loss) == pytest.approx(4.1589, abs=1e-4)

    def test_perfect_prediction_near_zero(self):
        mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        pred = torch.clamp(mask, EPS_P, 1 - EPS_P)
        loss = float(weighted_bce([pred], [mask], [3.0]))
        assert 0.0 <= loss <= 4 * 3.0 * EPS_P * abs(math.log(EPS_P)) + 1e-9

    def test_mean_over_identical_samples(self):
        pred = torch.full((2, 2), 0.5, dtype=torch.float64)
        mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        one = float(weighted_bce([pred], [mask], [3.0]))
        two = float(weighted_bce([pred, pred], [mask, mask], [3.0, 3.0]))
        assert two == pytest.approx(one, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_bce(
                [torch.zeros(2, 2, dtype=torch.float64)],
                [torch.zeros(3, 3, dtype=torch.float64)],
                [1.0],
            )

    def test_matches_reference_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            preds = _rand_preds(rng, 3)
            masks = _rand_masks(rng, 3)
            ws = [float(rng.uniform(0.5, 5.0)) for _ in range(3)]
            got = float(weighted_bce([torch.from_numpy(p) for p in preds],
                                     [torch.from_numpy(m) for m in masks], ws))
            assert got == pytest.approx(bce_reference(preds, masks, ws), rel=1e-9)

    def test_finite_at_hard_zero_one(self):
        pred = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        mask = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert math.isfinite(float(weighted_bce([pred], [mask], [1.0])))


class TestEntropyRegularizer:
    def test_confident_foreground_near_zero(self):
        pred = torch.full((4, 4), 1 - EPS_P, dtype=torch.float64)
        assert float(entropy_regularizer([pred])) == pytest.approx(0.0, abs=1e-4)

    def test_uniform_half(self):
        pred = torch.full((2, 2), 0.5, dtype=torch.float64)
        assert float(entropy_regularizer([pred])) == pytest.approx(4 * 0.5 * math.log(2), rel=1e-12)

    def test_at_lower_clamp(self):
        pred = torch.zeros(2, 2, dtype=torch.float64)
        expected = 4 * EPS_P * abs(math.log(EPS_P))
        assert float(entropy_regularizer([pred])) == pytest.approx(expected, rel=1e-9)

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            preds = _rand_preds(rng, 2)
            got = float(entropy_regularizer([torch.from_numpy(p) for p in preds]))
            assert got == pytest.approx(er_reference(preds), rel=1e-9)

    def test_full_binary_option(self):
        pred = torch.full((1, 1), 0.5, dtype=torch.float64)
        assert float(entropy_regularizer([pred], full_binary=True)) == pytest.approx(
            math.log(2), rel=1e-12
        )

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone_around_inv_e(self, a, b):
        # the maximizer of -p*ln(p) is 1/e; moving away on either side decreases it
        def h(p):
            pred = torch.full((1, 1), p, dtype=torch.float64)
            return float(entropy_regularizer([pred]))

        inv_e = 1 / math.e
        lo, hi = sorted((a, b))
        if hi <= inv_e:
            assert h(lo) <= h(hi) + 1e-12
        if lo >= inv_e:
            assert h(lo) >= h(hi) - 1e-12
        assert h(lo) <= h(inv_e) + 1e-12 and h(hi) <= h(inv_e) + 1e-12

    def test_non_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            preds = _rand_preds(rng, 2)
            assert float(entropy_regularizer([torch.from_numpy(p) for p in preds])) >= 0.0


class TestDistillation:
    def test_identical_lists_zero(self):
        lat = torch.ones(2, 3, 3, dtype=torch.float64)
        assert float(distillation([lat], [lat.clone()])) == 0.0

    def test_scalar_case(self):
        a = torch.tensor([[[1.0]]], dtype=torch.float64)
        b = torch.tensor([[[0.0]]], dtype=torch.float64)
        assert float(distillation([a], [b])) == 1.0

    def test_cross_pairs_match_brute_force(self):
        rng = np.random.default_rng(3)
        lm = [rng.normal(size=(2, 4, 4)) for _ in range(2)]
        lp = [rng.normal(size=(2, 4, 4)) for _ in range(3)]
        got = float(distillation([torch.from_numpy(a) for a in lm],
                                 [torch.from_numpy(b) for b in lp]))
        assert got == pytest.approx(dist_reference(lm, lp), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            distillation(
                [torch.zeros(1, 2, 2, dtype=torch.float64)],
                [torch.zeros(1, 3, 3, dtype=torch.float64)],
            )

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        lm = [torch.from_numpy(rng.normal(size=(2, 3, 3))) for _ in range(2)]
        lp = [torch.from_numpy(rng.normal(size=(2, 3, 3))) for _ in range(2)]
        assert float(distillation(lm, lp)) >= 0.0


class TestCompositeLoss:
    def _batches(self, k=2, seed=0):
        return (
            random_batch("m", k, seed=seed),
            random_batch("n", k, seed=seed + 1, labeled=False),
            random_batch("p", k, seed=seed + 2, labeled=False),
        )

    def test_zero_weights_reduce_to_bce(self):
        model = ToyConvModel()
        bm, bn, bp = self._batches()
        bd = composite_loss(get_parameters(model), bm, bn, bp, LossWeights(0.0, 0.0), model)
        assert bd.total == bd.bce

    def test_combination_identity(self):
        model = ToyConvModel()
        bm, bn, bp = self._batches(seed=5)
        w = LossWeights(0.01, 0.01)
        bd = composite_loss(get_parameters(model), bm, bn, bp, w, model)
        assert bd.total == pytest.approx(bd.bce + 0.01 * bd.er + 0.01 * bd.dist, rel=1e-9)

    def test_self_distillation_single_image(self):
        model = ToyConvModel()
        bm = random_batch("m", 1, seed=0)
        bn = random_batch("n", 1, seed=1, labeled=False)
        bp_same = type(bm)(domain_id="p", samples=tuple(s.without_mask() for s in bm.samples), labeled=False)
        bd = composite_loss(get_parameters(model), bm, bn, bp_same, LossWeights(0.01, 0.01), model)
        assert bd.dist == 0.0

    def test_requires_labeled_m(self):
        model = ToyConvModel()
        bm, bn, bp = self._batches()
        with pytest.raises(ValueError):
            composite_loss(get_parameters(model), bn, bm, bp, LossWeights(), model)

    def test_gradient_flows_through_all_terms(self):
        model = ToyConvModel()
        bm, bn, bp = self._batches(seed=9)
        total, _ = compute_composite(model, bm, bn, bp, LossWeights(0.5, 0.5), train=True)
        total.backward()
        assert model.conv.weight.grad is not None
        assert float(model.conv.weight.grad.abs().sum()) > 0.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.0)
    with pytest.raises(ValueError):
        LossWeights(float("nan"), 0.0)
