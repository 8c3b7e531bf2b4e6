import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import loss_oracle
from conftest import TOY, central_difference_error
from misnet import MISNet
from misnet.objective import (LossReport, make_optimizer, pixel_weight, poly_lr, set_lr, structure_loss,
                              total_loss, weighted_bce, weighted_iou)


def random_instance(rng, max_side=8):
    h, w = rng.integers(1, max_side + 1, size=2)
    logits = rng.normal(0, 3, (h, w))
    mask = (rng.random((h, w)) < rng.random()).astype(np.float64)
    return logits, mask


class TestPixelWeight:
    def test_uniform_masks(self):
        for value in (0.0, 1.0):
            g = torch.full((1, 1, 31, 31), value, dtype=torch.float64)
            w = pixel_weight(g)
            # zero padding lowers the local mean of an all-ones mask near the border
            if value == 0.0:
                assert torch.equal(w, torch.ones_like(w))
            else:
                assert w[0, 0, 15, 15] == 1.0

    def test_isolated_pixel(self):
        g = torch.zeros(1, 1, 31, 31, dtype=torch.float64)
        g[..., 15, 15] = 1
        w = pixel_weight(g, 31)
        assert abs(w[0, 0, 15, 15].item() - (1 + 5 * (1 - 1 / 961))) < 1e-12
        assert abs(w[0, 0, 15, 15].item() - 5.9948) < 1e-4

    def test_range_on_random_masks(self, rng):
        g = torch.from_numpy(rng.random((3, 1, 40, 40)) < 0.3).double()
        w = pixel_weight(g)
        assert w.min() >= 1 and w.max() <= 6

    def test_matches_loop(self, rng):
        mask = (rng.random((6, 7)) < 0.4).astype(float)
        ref = loss_oracle.pixel_weight(mask.tolist(), k=5, multiplier=5.0)
        got = pixel_weight(torch.from_numpy(mask), 5)[0, 0].numpy()
        assert np.abs(got - np.array(ref)).max() < 1e-12


class TestWeightedBCE:
    def test_confident_correct(self):
        g = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        logits = 200 * g - 100
        assert weighted_bce(logits, g, torch.ones_like(g)) < 1e-6

    def test_max_entropy(self):
        g = torch.tensor([[1.0, 0.0, 1.0]])
        loss = weighted_bce(torch.zeros_like(g), g, torch.ones_like(g))
        assert abs(loss.item() - math.log(2)) < 1e-7

    def test_random_matches_loop(self, rng):
        for _ in range(50):
            logits, mask = random_instance(rng, 4)
            w = rng.uniform(1, 6, mask.shape)
            ref = loss_oracle.weighted_bce(logits.tolist(), mask.tolist(), w.tolist())
            got = weighted_bce(*(torch.from_numpy(a) for a in (logits, mask, w))).item()
            assert abs(got - ref) < 1e-9

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            weighted_bce(torch.tensor([[float("inf")]]), torch.ones(1, 1), torch.ones(1, 1))

    def test_batch_mean_of_per_image(self, rng):
        logits = torch.from_numpy(rng.normal(0, 2, (2, 1, 5, 5)))
        mask = torch.from_numpy(rng.random((2, 1, 5, 5)) < 0.4).double()
        w = pixel_weight(mask, 3)
        per = [weighted_bce(logits[i:i + 1], mask[i:i + 1], w[i:i + 1]) for i in range(2)]
        assert torch.allclose(weighted_bce(logits, mask, w), (per[0] + per[1]) / 2)


class TestWeightedIoU:
    def test_saturated(self):
        g = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        assert weighted_iou(200 * g - 100, g, torch.ones_like(g)) < 1e-4

    def test_disjoint_limit(self):
        g = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        w = torch.tensor([[2.0, 3.0], [1.0, 1.0]], dtype=torch.float64)
        loss = weighted_iou(torch.full_like(g, -1000.0), g, w).item()
        assert abs(loss - 5 / 6) < 1e-12

    def test_random_matches_loop(self, rng):
        for _ in range(50):
            logits, mask = random_instance(rng, 4)
            w = rng.uniform(1, 6, mask.shape)
            ref = loss_oracle.weighted_iou(logits.tolist(), mask.tolist(), w.tolist())
            got = weighted_iou(*(torch.from_numpy(a) for a in (logits, mask, w))).item()
            assert abs(got - ref) < 1e-9
            assert 0 <= got < 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.5, 2.0, 7.25]))
def test_uniform_weight_scaling_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    logits, mask = (torch.from_numpy(a) for a in random_instance(rng))
    w = torch.from_numpy(rng.uniform(1, 6, tuple(mask.shape)))
    assert weighted_bce(logits, mask, lam * w).item() == pytest.approx(weighted_bce(logits, mask, w).item(),
                                                                       rel=1e-14, abs=0)
    # the +1 smoothing is not scaled with the weights, so IoU is invariant only without it
    assert weighted_iou(logits, mask, lam * w, smooth=0.0).item() == pytest.approx(
        weighted_iou(logits, mask, w, smooth=0.0).item(), rel=1e-14, abs=1e-15)


def test_smoothed_iou_is_not_scale_invariant():
    g = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    x = torch.zeros_like(g)
    w = torch.ones_like(g)
    assert weighted_iou(x, g, 2 * w).item() != weighted_iou(x, g, w).item()


def test_loss_gradients_match_finite_differences(rng):
    logits, mask = random_instance(rng, 6)
    m = torch.from_numpy(mask)
    w = pixel_weight(m, 5)[0, 0]
    assert central_difference_error(lambda x: weighted_bce(x, m, w), [torch.from_numpy(logits)]) < 1e-4
    assert central_difference_error(lambda x: weighted_iou(x, m, w), [torch.from_numpy(logits)]) < 1e-4


class TestTotalLoss:
    def outputs(self):
        torch.manual_seed(0)
        model = MISNet(TOY).double().eval()
        return model(torch.randn(2, 3, 32, 32, dtype=torch.float64))

    def test_sum_of_map_losses(self):
        out = self.outputs()
        mask = (torch.rand(2, 1, 32, 32) > 0.6).double()
        report = total_loss(out, mask)
        assert isinstance(report, LossReport)
        assert set(report.per_map) == {"fuse", "l5", "l4", "l3"}
        expected = 0.0
        for name, logits in out.supervised().items():
            up = torch.nn.functional.interpolate(logits, size=(32, 32), mode="bilinear", align_corners=False)
            bce, iou = structure_loss(up, mask)
            expected += (bce + iou).item()
            assert report.per_map[name] == pytest.approx((bce + iou).item(), abs=1e-12)
        assert report.total.item() == pytest.approx(expected, abs=1e-12)
        assert report.total.item() == pytest.approx(sum(report.per_map.values()), abs=1e-12)
        assert report.total.item() == pytest.approx(report.bce_part + report.iou_part, abs=1e-12)
        assert report.total.item() >= 0

    def test_perfect_prediction(self):
        g = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
        g[..., 4:12, 4:12] = 1
        logits = 200 * g - 100
        report = total_loss({"fuse": logits, "l5": logits, "l4": logits, "l3": logits}, g)
        assert report.total.item() < 1e-3


class TestPolyLR:
    def test_values(self):
        assert poly_lr(0, 300) == 1e-5
        exact = lambda e: float(mpmath.mpf("1e-5") * (1 - mpmath.mpf(e) / 300) ** mpmath.mpf("0.9"))
        for epoch in (150, 299):
            assert poly_lr(epoch, 300) == pytest.approx(exact(epoch), rel=1e-12)
        assert f"{poly_lr(150, 300):.4g}" == "5.359e-06"
        assert f"{poly_lr(299, 300):.3g}" == "5.9e-08"

    def test_strictly_decreasing(self):
        lrs = [poly_lr(e, 300) for e in range(300)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("epoch", [-1, 300, 301])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            poly_lr(epoch, 300)


def test_optimizer_and_lr_update():
    p = torch.nn.Parameter(torch.zeros(3))
    opt = make_optimizer([p])
    assert isinstance(opt, torch.optim.Adam)
    assert opt.param_groups[0]["lr"] == 1e-5 and opt.param_groups[0]["weight_decay"] == 1e-5
    set_lr(opt, 3e-6)
    assert opt.param_groups[0]["lr"] == 3e-6
