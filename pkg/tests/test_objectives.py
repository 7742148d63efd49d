"""Segmentation, cycle, adversarial losses and their weighted total."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protoalign import tensor as T
from protoalign.objectives import (
    DICE_SMOOTH,
    LossWeights,
    loss_all,
    loss_base,
    loss_cycle,
    loss_lsgan,
    loss_seg,
    one_hot,
)
from protoalign.tensor import Tensor


def seg_oracle(logits, labels):
    """Per-pixel softmax by hand, then CE and smoothed soft Dice."""
    n, c, h, w = logits.shape
    ce = 0.0
    inter = [0.0] * c
    psum = [0.0] * c
    tsum = [0.0] * c
    for b in range(n):
        for i in range(h):
            for j in range(w):
                z = [float(logits[b, k, i, j]) for k in range(c)]
                top = max(z)
                den = sum(math.exp(v - top) for v in z)
                p = [math.exp(v - top) / den for v in z]
                y = int(labels[b, i, j])
                ce -= math.log(p[y])
                for k in range(c):
                    psum[k] += p[k]
                    if k == y:
                        inter[k] += p[k]
                        tsum[k] += 1.0
    ce /= n * h * w
    dice = sum((2 * inter[k] + DICE_SMOOTH) / (psum[k] + tsum[k] + DICE_SMOOTH) for k in range(c)) / c
    return ce + 1.0 - dice


class TestSegmentationLoss:
    def test_confident_correct_logits_approach_zero(self, double, rng):
        labels = rng.integers(0, 3, size=(1, 5, 5))
        logits = Tensor(one_hot(labels, 3, np.float64) * 60.0)
        assert loss_seg(logits, labels).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_two_class_ce(self, double, rng):
        labels = rng.integers(0, 2, size=(2, 4, 4))
        out = loss_seg(Tensor(np.zeros((2, 2, 4, 4))), labels, dice=False)
        assert out.item() == pytest.approx(math.log(2), abs=1e-12)
        assert out.item() == pytest.approx(0.69315, abs=1e-5)

    def test_matches_scalar_oracle(self, double):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = rng.normal(size=(2, 4, 5, 5)) * 2
            labels = rng.integers(0, 4, size=(2, 5, 5))
            assert loss_seg(Tensor(logits), labels).item() == pytest.approx(seg_oracle(logits, labels), abs=1e-9)

    def test_single_image_layout(self, double, rng):
        logits = rng.normal(size=(3, 4, 4))
        labels = rng.integers(0, 3, size=(4, 4))
        a = loss_seg(Tensor(logits), labels).item()
        assert a == loss_seg(Tensor(logits[None]), labels[None]).item()

    @pytest.mark.parametrize("bad", [-1, 3])
    def test_label_out_of_range(self, bad):
        labels = np.zeros((1, 2, 2), dtype=int)
        labels[0, 0, 0] = bad
        with pytest.raises(ValueError, match="labels"):
            loss_seg(Tensor(np.zeros((1, 3, 2, 2))), labels)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="match"):
            loss_seg(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 3, 3), dtype=int))

    def test_terms_can_be_disabled(self, double, rng):
        logits = Tensor(rng.normal(size=(1, 3, 4, 4)))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        both = loss_seg(logits, labels).item()
        parts = loss_seg(logits, labels, dice=False).item() + loss_seg(logits, labels, ce=False).item()
        assert both == pytest.approx(parts, abs=1e-12)


class TestCycleAndAdversarial:
    def test_identity_cycle(self, rng):
        x = rng.uniform(-1, 1, size=(1, 1, 6, 6))
        assert loss_cycle(x, x.copy()).item() == 0.0

    def test_constant_offset(self, double, rng):
        x = rng.uniform(-1, 1, size=(2, 1, 4, 4))
        assert loss_cycle(x, x + 0.5).item() == pytest.approx(0.5, abs=1e-12)

    def test_cycle_matches_loop(self, double, rng):
        a, b = rng.normal(size=(2, 1, 3, 5)), rng.normal(size=(2, 1, 3, 5))
        want = sum(abs(float(x) - float(y)) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert loss_cycle(a, b).item() == pytest.approx(want, abs=1e-12)

    def test_cycle_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            loss_cycle(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 3)))

    def test_discriminator_optimum(self):
        assert loss_lsgan(Tensor(np.ones((2, 1, 3, 3))), Tensor(np.zeros((2, 1, 3, 3))), "discriminator").item() == 0.0

    def test_generator_optimum(self):
        assert loss_lsgan(None, Tensor(np.ones((1, 1, 4, 4))), "generator").item() == 0.0

    def test_generator_half(self):
        assert loss_lsgan(None, Tensor(np.full((1, 1, 4, 4), 0.5)), "generator").item() == pytest.approx(0.25)

    def test_discriminator_formula(self, double, rng):
        real, fake = rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 3, 3))
        want = np.mean((real - 1) ** 2) + np.mean(fake**2)
        assert loss_lsgan(Tensor(real), Tensor(fake), "discriminator").item() == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize(
        "real,fake,side",
        [(None, None, "generator"), (None, np.zeros(2), "discriminator"), (np.zeros(2), None, "discriminator")],
    )
    def test_missing_maps(self, real, fake, side):
        wrap = lambda a: None if a is None else Tensor(a)
        with pytest.raises(ValueError, match="needs"):
            loss_lsgan(wrap(real), wrap(fake), side)

    def test_unknown_side(self):
        with pytest.raises(ValueError, match="side"):
            loss_lsgan(None, Tensor(np.zeros(2)), "critic")


def scalar(v):
    return Tensor(np.array(v, dtype=np.float64))


class TestTotalObjective:
    def test_default_weights_hand_value(self, double):
        out = loss_all(scalar(1.0), scalar(1.0), scalar(1.0), LossWeights(0.05, 0.02))
        assert out.item() == pytest.approx(1.07, abs=1e-12)

    def test_zero_lambdas_bitwise_base(self, double, rng):
        base = {"seg": scalar(rng.random()), "cycle": scalar(rng.random()), "adv_img": scalar(rng.random())}
        w = LossWeights(0.0, 0.0)
        assert loss_all(base, scalar(3.3), scalar(4.4), w).item() == loss_base(base, w).item()

    def test_all_zero(self, double):
        assert loss_all(scalar(0.0), scalar(0.0), scalar(0.0), LossWeights()).item() == 0.0

    def test_base_weights_applied(self, double):
        w = LossWeights(0, 0, seg=2.0, cycle=10.0, adv_img=0.5, adv_seg=3.0)
        comps = {"seg": scalar(1.0), "cycle": scalar(0.1), "adv_img": scalar(2.0), "adv_seg": scalar(0.5)}
        assert loss_base(comps, w).item() == pytest.approx(2.0 + 1.0 + 1.0 + 1.5, abs=1e-12)

    @pytest.mark.parametrize("name", ["sim", "cl"])
    def test_nonfinite_component_named(self, name):
        args = {"sim": scalar(0.0), "cl": scalar(0.0)}
        args[name] = scalar(float("nan"))
        with pytest.raises(FloatingPointError, match=name):
            loss_all(scalar(1.0), args["sim"], args["cl"], LossWeights())

    def test_nonfinite_base_component_named(self):
        with pytest.raises(FloatingPointError, match="cycle"):
            loss_all({"seg": scalar(1.0), "cycle": scalar(float("inf"))}, scalar(0.0), scalar(0.0), LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="lambda2"):
            LossWeights(0.05, -0.1)

    def test_doubling_lambda1_doubles_contribution(self, double, rng):
        base, sim, cl = scalar(rng.random()), scalar(rng.random()), scalar(rng.random())
        w1, w2 = LossWeights(0.05, 0.02), LossWeights(0.10, 0.02)
        zero = LossWeights(0.0, 0.02)
        c1 = loss_all(base, sim, cl, w1).item() - loss_all(base, sim, cl, zero).item()
        c2 = loss_all(base, sim, cl, w2).item() - loss_all(base, sim, cl, zero).item()
        assert c2 == pytest.approx(2 * c1, rel=1e-12)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        with T.precision("double"):
            logits = Tensor(rng.normal(size=(1, 3, 4, 4)) * 5)
            assert loss_seg(logits, rng.integers(0, 3, size=(1, 4, 4))).item() >= 0
            a, b = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 4, 4))
            assert loss_cycle(a, b).item() >= 0
            assert loss_lsgan(None, Tensor(a), "generator").item() >= 0
            assert loss_lsgan(Tensor(a), Tensor(b), "discriminator").item() >= 0

    def test_gradient_soundness(self, double):
        from protoalign.gradcheck import run_suite

        for r in run_suite(cases=20, names={"L_seg", "L_cycle", "LSGAN_generator", "LSGAN_discriminator"}):
            assert r.max_error <= 1e-4, r
