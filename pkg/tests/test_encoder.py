import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_err
from stylediff.encoder import (Aligner, DurationPredictor, StyleAdaptiveEncoder, TextEncoder, duration_loss,
                               inference_durations, prior_loss)
from stylediff.layers import StyleAdaptiveLayerNorm, TransformerBlock, saln


def ones(*shape):
    return torch.ones(*shape, dtype=torch.bool)


class TestSALN:
    def rigged(self, width=6, style_dim=3):
        layer = StyleAdaptiveLayerNorm(width, style_dim).double()
        with torch.no_grad():
            layer.affine.weight.zero_()
        return layer

    def test_reduces_to_layer_norm(self):
        layer = self.rigged()
        h = torch.randn(4, 6, dtype=torch.float64)
        out = layer(h, torch.randn(4, 3, dtype=torch.float64))
        ref = torch.nn.functional.layer_norm(h, (6,), eps=1e-5)
        assert torch.equal(out, ref) or torch.allclose(out, ref, atol=1e-15, rtol=0)

    def test_constant_input_gives_bias(self):
        layer = StyleAdaptiveLayerNorm(5, 2).double()
        s = torch.randn(2, dtype=torch.float64)
        out = layer(torch.full((5,), 3.7, dtype=torch.float64), s)
        bias = layer.affine(s)[5:]
        torch.testing.assert_close(out, bias)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 100.0), st.integers(0, 10000))
    def test_scale_invariant(self, c, seed):
        g = torch.Generator().manual_seed(seed)
        layer = StyleAdaptiveLayerNorm(8, 4).double()
        h = torch.randn(8, generator=g, dtype=torch.float64) * 3
        s = torch.randn(4, generator=g, dtype=torch.float64)
        # eps makes the invariance approximate; compare with a negligible eps
        a = saln(h, s, layer.affine, eps=1e-12)
        b = saln(c * h, s, layer.affine, eps=1e-12)
        assert float((a - b).abs().max()) < 1e-5

    def test_affine_width(self):
        assert StyleAdaptiveLayerNorm(16, 8).affine.out_features == 32


class TestTextEncoder:
    def enc(self, **kw):
        torch.manual_seed(0)
        return TextEncoder(10, 16, 2, 32, n_blocks=2, dropout=0.0, **kw).double().eval()

    def test_single_token(self):
        assert self.enc()(torch.tensor([[3]]), ones(1, 1)).shape == (1, 1, 16)

    def test_positions_matter(self):
        e = self.enc()
        a = e(torch.tensor([[1, 2]]), ones(1, 2))[0]
        b = e(torch.tensor([[2, 1]]), ones(1, 2))[0]
        assert not torch.allclose(a[0], b[1]) and not torch.allclose(a[1], b[0])

    def test_padding_invariance(self):
        e = self.enc()
        a = e(torch.tensor([[4, 5]]), ones(1, 2))[0]
        b = e(torch.tensor([[4, 5, 0]]), torch.tensor([[True, True, False]]))[0]
        assert float((a - b[:2]).abs().max()) < 1e-5

    def test_overlong(self):
        e = self.enc(max_len=8)
        with pytest.raises(ValueError):
            e(torch.ones(1, 9, dtype=torch.long), ones(1, 9))

    def test_style_free(self):
        import inspect

        assert "s" not in inspect.signature(TextEncoder.forward).parameters


class TestAligner:
    def test_single_token_all_ones(self):
        al = Aligner(80, 16, 8).double()
        _, ls = al(torch.randn(1, 1, 16, dtype=torch.float64), torch.randn(1, 7, 80, dtype=torch.float64),
                   ones(1, 1), ones(1, 7))
        assert torch.equal(ls.exp(), torch.ones(1, 7, 1, dtype=torch.float64))

    def test_identical_frames_identical_rows(self):
        al = Aligner(80, 16, 8).double()
        frame = torch.randn(80, dtype=torch.float64)
        mel = frame.repeat(1, 6, 1)
        # the conv sees edge padding at the ends, so compare interior rows
        _, ls = al(torch.randn(1, 3, 16, dtype=torch.float64), mel, ones(1, 3), ones(1, 6))
        torch.testing.assert_close(ls[0, 1], ls[0, 4])

    def test_rows_normalised_and_energy_form(self):
        al = Aligner(80, 16, 8).double()
        H, mel = torch.randn(1, 3, 16, dtype=torch.float64), torch.randn(1, 9, 80, dtype=torch.float64)
        e, ls = al(H, mel, ones(1, 3), ones(1, 9))
        torch.testing.assert_close(ls.exp().sum(-1), torch.ones(1, 9, dtype=torch.float64))
        q, k = al.query(mel, ones(1, 9)), al.key(H, ones(1, 3))
        torch.testing.assert_close(e, -torch.cdist(q, k) ** 2)
        assert torch.all(e <= 0)

    def test_argmax_at_matching_key(self):
        # energies are -||q - k||^2: a query equal to a key has the maximal (zero) energy
        al = Aligner(80, 16, 8).double()
        H = torch.randn(1, 4, 16, dtype=torch.float64)
        k = al.key(H, ones(1, 4))[0]
        q = k[[2, 0, 3, 1, 1]]
        e = -((q[:, None] - k[None]) ** 2).sum(-1)
        assert e.argmax(1).tolist() == [2, 0, 3, 1, 1]

    def test_infeasible(self):
        al = Aligner(80, 16, 8)
        with pytest.raises(ValueError):
            al(torch.randn(1, 4, 16), torch.randn(1, 3, 80), ones(1, 4), ones(1, 3))


class TestDurations:
    def test_loss_zero_at_log_target(self):
        d = torch.tensor([[3, 1, 4]])
        assert float(duration_loss(torch.log(d.double()), d, ones(1, 3))[0]) == 0.0

    def test_zero_logits_give_ones(self):
        out = inference_durations(torch.zeros(2, 4), ones(2, 4))
        assert out.tolist() == [[1] * 4] * 2

    def test_pace_and_clamp(self):
        c = torch.log(torch.tensor([[2.0, 3.0, 0.2]]))
        assert inference_durations(c, ones(1, 3), pace=2.0).tolist() == [[4, 6, 1]]
        assert inference_durations(c, torch.tensor([[True, True, False]])).tolist() == [[2, 3, 0]]

    def test_predictor_gradient(self):
        torch.manual_seed(0)
        dp = DurationPredictor(8, 4, 6, dropout=0.0).double()
        H, s = torch.randn(1, 5, 8, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64)
        d = torch.tensor([[2, 1, 3, 2, 5]])
        w = dp.conv1.weight

        def f(arr):
            with torch.no_grad():
                w.copy_(torch.from_numpy(arr))
                return float(duration_loss(dp(H, s, ones(1, 5)), d, ones(1, 5))[0])

        w0 = w.detach().numpy().copy()
        fd = central_difference(f, w0)
        with torch.no_grad():
            w.copy_(torch.from_numpy(w0))
        dp.zero_grad()
        duration_loss(dp(H, s, ones(1, 5)), d, ones(1, 5))[0].backward()
        assert rel_err(w.grad.numpy(), fd) < 1e-4

    def test_predictor_input_detach_flag(self):
        H = torch.randn(1, 3, 8, requires_grad=True)
        DurationPredictor(8, 4, 6, detach_input=True)(H, torch.randn(1, 4), ones(1, 3)).sum().backward()
        assert H.grad is None
        DurationPredictor(8, 4, 6)(H, torch.randn(1, 4), ones(1, 3)).sum().backward()
        assert H.grad is not None


class TestStyleAdaptiveEncoder:
    def sae(self):
        torch.manual_seed(1)
        return StyleAdaptiveEncoder(16, 6, 80, 2, 32, n_blocks=2, dropout=0.0).double().eval()

    @pytest.mark.parametrize("m", [1, 7, 40])
    def test_shape(self, m):
        out = self.sae()(torch.randn(1, m, 16, dtype=torch.float64), torch.randn(1, 6, dtype=torch.float64),
                         ones(1, m))
        assert out.shape == (1, m, 80) and torch.isfinite(out).all()

    def test_style_changes_output(self):
        g = self.sae()
        H = torch.randn(1, 9, 16, dtype=torch.float64)
        a = g(H, torch.randn(1, 6, dtype=torch.float64), ones(1, 9))
        b = g(H, torch.randn(1, 6, dtype=torch.float64), ones(1, 9))
        assert float((a - b).abs().max()) > 1e-6

    def test_identity_saln_removes_style(self):
        g = self.sae()
        with torch.no_grad():
            for mod in g.modules():
                if isinstance(mod, StyleAdaptiveLayerNorm):
                    mod.affine.weight.zero_()
        H = torch.randn(1, 9, 16, dtype=torch.float64)
        a = g(H, torch.randn(1, 6, dtype=torch.float64), ones(1, 9))
        b = g(H, torch.randn(1, 6, dtype=torch.float64), ones(1, 9))
        assert torch.equal(a, b)

    def test_padding_invariance(self):
        g = self.sae()
        H, s = torch.randn(1, 6, 16, dtype=torch.float64), torch.randn(1, 6, dtype=torch.float64)
        a = g(H, s, ones(1, 6))
        Hp = torch.cat([H, torch.randn(1, 3, 16, dtype=torch.float64)], 1)
        mask = torch.tensor([[True] * 6 + [False] * 3])
        b = g(Hp, s, mask)
        assert float((a - b[:, :6]).abs().max()) < 1e-5
        assert torch.all(b[:, 6:] == 0)

    def test_block_uses_saln(self):
        blk = TransformerBlock(16, 2, 32, style_dim=4)
        assert isinstance(blk.norm1, StyleAdaptiveLayerNorm) and isinstance(blk.norm2, StyleAdaptiveLayerNorm)


class TestPriorLoss:
    def test_zero(self):
        Y = torch.randn(5, 80)
        assert float(prior_loss(Y.clone(), Y)) == 0.0

    def test_unit_offset(self):
        Y = torch.randn(5, 80, dtype=torch.float64)
        assert abs(float(prior_loss(Y + 1, Y)) - 1.0) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            prior_loss(torch.zeros(3, 80), torch.zeros(4, 80))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        mu, Y = rng.normal(size=(4, 80)), rng.normal(size=(4, 80))
        x = torch.tensor(mu, requires_grad=True)
        prior_loss(x, torch.tensor(Y)).backward()
        analytic = 2 * (mu - Y) / mu.size
        fd = central_difference(lambda a: float(prior_loss(torch.tensor(a), torch.tensor(Y))), mu, 1e-5)
        assert rel_err(x.grad.numpy(), analytic) < 1e-12
        assert rel_err(fd, analytic) < 1e-6

    def test_masked_mean(self):
        Y = torch.zeros(1, 4, 80, dtype=torch.float64)
        mu = torch.ones(1, 4, 80, dtype=torch.float64)
        mu[0, 2:] = 100.0
        mask = torch.tensor([[True, True, False, False]])
        assert math.isclose(float(prior_loss(mu, Y, mask)[0]), 1.0)
