import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylediff.style import MelStyleEncoder, cosine_similarity, encode_style


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return MelStyleEncoder(80, 32, 16, n_heads=2).double()


class TestEncodeStyle:
    @pytest.mark.parametrize("m", [10, 200])
    def test_dimension(self, encoder, m):
        assert encode_style(np.random.default_rng(m).normal(size=(m, 80)), encoder).shape == (16,)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 300))
    def test_dimension_any_length(self, m):
        torch.manual_seed(0)
        enc = MelStyleEncoder(80, 16, 8)
        s = encode_style(np.random.default_rng(m).normal(size=(m, 80)), enc)
        assert s.shape == (8,) and np.all(np.isfinite(s))

    def test_deterministic_in_eval(self, encoder):
        mel = np.random.default_rng(0).normal(size=(30, 80))
        encoder.train()
        a, b = encode_style(mel, encoder), encode_style(mel, encoder)
        np.testing.assert_array_equal(a, b)
        assert encoder.training

    def test_errors(self, encoder):
        with pytest.raises(ValueError):
            encode_style(np.zeros((3, 80)), encoder)
        bad = np.zeros((10, 80))
        bad[2, 3] = np.nan
        with pytest.raises(ValueError):
            encode_style(bad, encoder)

    def test_masked_frames_ignored(self, encoder):
        encoder.eval()
        mel = torch.randn(1, 12, 80, dtype=torch.float64)
        padded = torch.cat([mel, 5 * torch.randn(1, 4, 80, dtype=torch.float64)], 1)
        mask = torch.tensor([[True] * 12 + [False] * 4])
        with torch.no_grad():
            torch.testing.assert_close(encoder(mel), encoder(padded, mask))

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            MelStyleEncoder(80, 30, 8, n_heads=4)

    def test_repetition_with_attention_bypassed(self, encoder):
        encoder.eval()
        encoder.use_attention = False
        try:
            for seed in range(5):
                mel = torch.randn(1, 60, 80, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
                with torch.no_grad():
                    a = encoder.pooled(mel)
                    b = encoder.pooled(torch.cat([mel, mel], 1))
                assert float((a - b).norm() / a.norm()) < 0.10
        finally:
            encoder.use_attention = True


class TestCosine:
    def test_examples(self):
        s = np.random.default_rng(0).normal(size=16)
        assert cosine_similarity(s, s) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity(s, -s) == pytest.approx(-1.0, abs=1e-15)
        e = np.eye(4)
        assert cosine_similarity(e[0], e[1]) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10000))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=8), rng.normal(size=8)
        c = cosine_similarity(a, b)
        assert c == cosine_similarity(b, a) and -1.0 <= c <= 1.0

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.zeros(3), np.ones(3))
