import math

import numpy as np
import pytest
import torch

from ulsad.errors import ConfigError, ShapeError
from ulsad.global_branch import (
    GlobalAEConfig,
    GlobalAutoencoder,
    consistency_loss,
    cross_attention,
    loss_lg,
    loss_pg,
    loss_pg_direct,
    self_attention,
)
from ulsad.local_branch import LossConfig, loss_pl


def brute_attention(z, z_hat):
    """Direct double loop over the attention definition."""
    c, k = z.shape
    w = np.zeros((k, k))
    for q in range(k):
        logits = [sum(z[i, p] * z_hat[i, q] for i in range(c)) / math.sqrt(c) for p in range(k)]
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        for p in range(k):
            w[p, q] = ex[p] / sum(ex)
    a = np.array([[sum(z[i, p] * w[p, q] for p in range(k)) for q in range(k)] for i in range(c)])
    return w, a


class TestAttention:
    def test_singleton(self):
        z = torch.tensor([[1.5], [-2.0]])
        w, a = self_attention(z)
        assert w.tolist() == [[1.0]]
        assert torch.equal(a, z)

    def test_identical_columns_uniform(self):
        z = torch.tensor([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]], dtype=torch.float64)
        w, a = self_attention(z)
        assert torch.allclose(w, torch.full((3, 3), 1 / 3, dtype=torch.float64))
        assert torch.allclose(a, z)

    def test_two_by_two_hand_value(self):
        z = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        w, _ = self_attention(z)
        e = math.exp(1 / math.sqrt(2))
        assert w[0, 0].item() == pytest.approx(e / (e + 1), abs=1e-12)
        assert w[1, 0].item() == pytest.approx(1 / (e + 1), abs=1e-12)
        assert w[0, 0].item() == pytest.approx(0.6698, abs=1e-4)
        assert w[1, 0].item() == pytest.approx(0.3302, abs=1e-4)

    def test_cross_matches_brute_force(self, rng):
        for c, k in [(2, 2), (3, 4), (5, 3)]:
            z = rng.normal(size=(c, k))
            zh = rng.normal(size=(c, k))
            w, a = cross_attention(torch.from_numpy(z), torch.from_numpy(zh))
            w_ref, a_ref = brute_attention(z, zh)
            np.testing.assert_allclose(w.numpy(), w_ref, atol=1e-12)
            np.testing.assert_allclose(a.numpy(), a_ref, atol=1e-12)

    def test_cross_singleton_ignores_queries(self):
        z = torch.tensor([[0.3], [0.7]])
        _, a = cross_attention(z, torch.tensor([[9.0], [-4.0]]))
        assert torch.equal(a, z)

    def test_cross_of_self_equals_self(self, rng):
        z = torch.from_numpy(rng.normal(size=(6, 20)).astype(np.float32))
        assert torch.allclose(cross_attention(z, z).attended, self_attention(z).attended, atol=1e-6)

    def test_columns_sum_to_one_large(self, rng):
        z = torch.from_numpy(rng.normal(size=(16, 1024)).astype(np.float32)) * 3
        zh = torch.from_numpy(rng.normal(size=(16, 1024)).astype(np.float32)) * 3
        w, a = cross_attention(z, zh)
        assert torch.allclose(w.sum(dim=0), torch.ones(1024), atol=1e-5)
        assert (w >= 0).all()

    def test_convex_hull(self, rng):
        z = torch.from_numpy(rng.normal(size=(5, 30)))
        _, a = cross_attention(z, torch.from_numpy(rng.normal(size=(5, 30))))
        lo = z.min(dim=1, keepdim=True).values
        hi = z.max(dim=1, keepdim=True).values
        assert ((a >= lo - 1e-12) & (a <= hi + 1e-12)).all()

    def test_logit_shift_invariance(self, rng):
        # a constant key row turns a query shift along it into a constant added to every logit of that column
        z = torch.from_numpy(rng.normal(size=(3, 4)))
        z[2] = 1.0
        zh = torch.from_numpy(rng.normal(size=(3, 4)))
        shifted = zh.clone()
        shifted[2, 1] += 50.0
        w0 = cross_attention(z, zh).weights
        w1 = cross_attention(z, shifted).weights
        assert torch.allclose(w0, w1, atol=1e-12)

    def test_large_logits_stable(self):
        z = torch.tensor([[100.0, -100.0, 50.0], [80.0, 0.0, -60.0]])
        w, a = self_attention(z)
        assert torch.isfinite(w).all() and torch.isfinite(a).all()
        assert torch.allclose(w.sum(dim=0), torch.ones(3), atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_attention(torch.zeros(2, 3), torch.zeros(2, 4))


class TestGlobalLosses:
    def test_zero_when_equal(self, rng):
        a = torch.from_numpy(rng.normal(size=(4, 6)))
        assert loss_pg(a, a.clone()).item() == pytest.approx(0, abs=1e-9)
        assert loss_pg_direct(a, a.clone()).item() == pytest.approx(0, abs=1e-9)
        assert loss_lg(a, a.clone()).item() == pytest.approx(0, abs=1e-9)

    def test_hand_cases(self):
        x = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
        y = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
        cfg = LossConfig(lambda_g=0.5)
        for fn in (loss_pg, loss_pg_direct, loss_lg):
            assert fn(x, y, cfg).item() == pytest.approx(2.5, abs=1e-9)

    def test_lambda_g_zero(self, rng):
        a = torch.from_numpy(rng.normal(size=(3, 5)))
        b = torch.from_numpy(rng.normal(size=(3, 5)))
        expected = ((a - b) ** 2).sum(dim=0).mean().item()
        assert loss_pg(a, b, LossConfig(lambda_g=0)).item() == pytest.approx(expected, rel=1e-12)

    def test_uses_lambda_g_not_lambda_l(self, rng):
        a = torch.from_numpy(rng.normal(size=(3, 5)))
        b = torch.from_numpy(rng.normal(size=(3, 5)))
        cfg = LossConfig(lambda_l=0.0, lambda_g=1.0)
        assert loss_pg_direct(a, b, cfg).item() == pytest.approx(loss_pl(a, b, LossConfig(lambda_l=1.0)).item())

    def test_lg_lambda_toggle(self):
        same_dir = (torch.tensor([[1.0], [1.0]]), torch.tensor([[2.0], [2.0]]))
        other_dir = (torch.tensor([[1.0], [0.0]]), torch.tensor([[0.0], [1.0]]))
        lo, hi = LossConfig(lambda_g=0.0), LossConfig(lambda_g=1.0)
        assert loss_lg(*same_dir, lo).item() == pytest.approx(loss_lg(*same_dir, hi).item(), abs=1e-6)
        assert loss_lg(*other_dir, lo).item() != loss_lg(*other_dir, hi).item()

    def test_direct_mode_finite(self, rng):
        z = torch.from_numpy(rng.normal(size=(2, 4, 9)))
        zh = torch.from_numpy(rng.normal(size=(2, 4, 9)))
        assert torch.isfinite(consistency_loss(z, zh, LossConfig(), "direct"))
        with pytest.raises(ConfigError):
            consistency_loss(z, zh, LossConfig(), "bogus")

    def test_target_is_constant(self, rng):
        z = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
        zh = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
        consistency_loss(z, zh, LossConfig()).backward()
        assert z.grad is None
        assert zh.grad is not None and zh.grad.abs().sum() > 0

    def test_lg_gradient_flows_to_both(self, rng):
        a = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
        b = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
        loss_lg(a, b).backward()
        assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0

    def test_pg_gradient_finite_differences(self, rng):
        cfg = LossConfig(lambda_g=0.5)
        for _ in range(5):
            z = torch.from_numpy(rng.normal(size=(3, 4)))
            zh = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
            consistency_loss(z, zh, cfg).backward()
            h = 1e-4
            num = np.zeros((3, 4))
            base = zh.detach()
            for idx in np.ndindex(3, 4):
                e = torch.zeros_like(base)
                e[idx] = h
                num[idx] = (consistency_loss(z, base + e, cfg) - consistency_loss(z, base - e, cfg)).item() / (2 * h)
            rel = np.linalg.norm(zh.grad.numpy() - num) / np.linalg.norm(num)
            assert rel < 1e-3


class TestGlobalAutoencoder:
    def test_default_shape(self):
        gae = GlobalAutoencoder(GlobalAEConfig()).eval()
        with torch.no_grad():
            out = gae(torch.rand(1, 3, 256, 256))
        assert out.shape == (1, 384, 32, 32)
        assert torch.isfinite(out).all()

    def test_ladder(self):
        assert GlobalAEConfig().ladder == (4, 8, 16, 32, 64, 32)

    def test_bottleneck_is_global(self):
        gae = GlobalAutoencoder(GlobalAEConfig(image_size=128, out_size=16))
        with torch.no_grad():
            code = gae.eval().encoder(torch.rand(2, 3, 128, 128))
        assert code.shape[-2:] == (1, 1)

    def test_eval_deterministic(self):
        gae = GlobalAutoencoder(GlobalAEConfig(image_size=64, out_channels=8, out_size=8)).eval()
        x = torch.rand(2, 3, 64, 64)
        with torch.no_grad():
            assert torch.equal(gae(x), gae(x))

    def test_shape_error(self):
        gae = GlobalAutoencoder(GlobalAEConfig(image_size=64, out_channels=8, out_size=8))
        with pytest.raises(ShapeError):
            gae(torch.rand(1, 3, 32, 32))
