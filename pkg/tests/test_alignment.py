import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (brute_force_best_path, brute_force_forward_sum, central_difference, monotonic_paths,
                     path_log_prob, random_log_posteriors, rel_err)
from stylediff.alignment import (binarization_loss, forward_sum_loss, hard_from_durations, length_regulate,
                                 regulate_batch, viterbi_align)


def t64(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64)


class TestForwardSum:
    def test_single_token(self):
        for m in (1, 3, 9):
            assert float(forward_sum_loss(torch.zeros(m, 1))) == 0.0

    def test_uniform_two_tokens(self):
        loss = forward_sum_loss(t64(np.full((3, 2), math.log(0.5))))
        assert abs(float(loss) - math.log(4)) < 1e-12

    def test_infeasible(self):
        with pytest.raises(ValueError):
            forward_sum_loss(torch.zeros(2, 3))

    def test_matches_enumeration(self, rng):
        for n in range(1, 5):
            for m in range(n, 7):
                for _ in range(10):
                    ls = random_log_posteriors(rng, m, n)
                    assert abs(float(forward_sum_loss(t64(ls))) - brute_force_forward_sum(ls)) < 1e-6

    def test_nonnegative(self, rng):
        for _ in range(20):
            ls = random_log_posteriors(rng, 7, 3)
            assert float(forward_sum_loss(t64(ls))) >= 0

    def test_gradient_is_negative_occupancy(self, rng):
        ls = random_log_posteriors(rng, 6, 3)
        x = t64(ls).requires_grad_()
        forward_sum_loss(x).backward()
        fd = central_difference(lambda a: brute_force_forward_sum(a), ls, 1e-6)
        assert rel_err(x.grad.numpy(), fd) < 1e-6
        # occupancy rows sum to one
        np.testing.assert_allclose(-x.grad.numpy().sum(1), 1.0, atol=1e-12)

    def test_batched_padding(self, rng):
        a, b = random_log_posteriors(rng, 5, 2), random_log_posteriors(rng, 8, 4)
        batch = torch.zeros(2, 8, 4, dtype=torch.float64)
        batch[0, :5, :2] = t64(a)
        batch[1] = t64(b)
        out = forward_sum_loss(batch, [5, 8], [2, 4])
        assert abs(float(out[0]) - brute_force_forward_sum(a)) < 1e-10
        assert abs(float(out[1]) - brute_force_forward_sum(b)) < 1e-10


class TestViterbi:
    def test_single_token(self):
        hard, dur = viterbi_align(torch.zeros(7, 1))
        assert dur.tolist() == [7]

    def test_square_is_diagonal(self, rng):
        hard, dur = viterbi_align(t64(random_log_posteriors(rng, 5, 5)))
        assert dur.tolist() == [1] * 5
        assert torch.equal(hard, torch.eye(5, dtype=torch.float64))

    def test_ties_stay(self):
        _, dur = viterbi_align(t64(np.full((3, 2), math.log(0.5))))
        assert dur.tolist() == [2, 1]

    def test_random_5x3(self, rng):
        for _ in range(20):
            ls = random_log_posteriors(rng, 5, 3)
            hard, _ = viterbi_align(t64(ls))
            path = hard.argmax(1).numpy()
            assert abs(path_log_prob(ls, path) - brute_force_best_path(ls)[1]) < 1e-9

    def test_exhaustive_argmax(self, rng):
        for n in range(1, 5):
            for m in range(n, 7):
                for _ in range(10):
                    ls = random_log_posteriors(rng, m, n)
                    hard, dur = viterbi_align(t64(ls))
                    best, score = brute_force_best_path(ls)
                    assert abs(path_log_prob(ls, hard.argmax(1).numpy()) - score) < 1e-9
                    assert int(dur.sum()) == m

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 30), st.integers(0, 2**31 - 1))
    def test_valid_path(self, n, extra, seed):
        m = n + extra
        ls = random_log_posteriors(np.random.default_rng(seed), m, n)
        hard, dur = viterbi_align(t64(ls))
        assert torch.all(hard.sum(1) == 1)
        path = hard.argmax(1).numpy()
        assert path[0] == 0 and path[-1] == n - 1
        assert set(np.diff(path)) <= {0, 1}
        assert torch.all(dur >= 1) and int(dur.sum()) == m
        assert torch.equal(dur, hard.sum(0).long())

    def test_batched_padding(self, rng):
        a = random_log_posteriors(rng, 4, 2)
        batch = torch.zeros(2, 6, 3, dtype=torch.float64)
        batch[0, :4, :2] = t64(a)
        batch[1] = t64(random_log_posteriors(rng, 6, 3))
        hard, dur = viterbi_align(batch, [4, 6], [2, 3])
        h0, d0 = viterbi_align(t64(a))
        assert torch.equal(hard[0, :4, :2], h0) and hard[0, 4:].sum() == 0
        assert dur[0].tolist() == d0.tolist() + [0]

    def test_infeasible(self):
        with pytest.raises(ValueError):
            viterbi_align(torch.zeros(2, 4))


class TestBinarization:
    def test_one_hot_is_zero(self):
        hard = hard_from_durations(torch.tensor([2, 3])).double()
        log_soft = torch.log(hard.clamp(min=1e-300))
        assert float(binarization_loss(log_soft, hard)) == 0.0

    def test_uniform(self):
        hard = hard_from_durations(torch.tensor([1, 2, 1, 1])).double()
        ls = torch.full_like(hard, math.log(0.25))
        assert abs(float(binarization_loss(ls, hard)) - math.log(4)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            binarization_loss(torch.zeros(3, 2), torch.zeros(3, 3))

    def test_decreasing_in_path_mass(self, rng):
        m, n = 6, 3
        ls = random_log_posteriors(rng, m, n)
        hard, _ = viterbi_align(t64(ls))
        base = float(binarization_loss(t64(ls), hard))
        for _ in range(100):
            soft = np.exp(ls)
            j = rng.integers(m)
            i = int(hard[j].argmax())
            delta = rng.uniform(0.01, 0.5) * (1 - soft[j, i])
            soft[j] *= (1 - soft[j, i] - delta) / (1 - soft[j, i])
            soft[j, i] = np.exp(ls[j, i]) + delta
            assert float(binarization_loss(t64(np.log(soft)), hard)) < base

    def test_gradient(self, rng):
        ls = random_log_posteriors(rng, 5, 3)
        hard, _ = viterbi_align(t64(ls))
        x = t64(ls).requires_grad_()
        binarization_loss(x, hard).backward()
        fd = central_difference(lambda a: float(binarization_loss(t64(a), hard)), ls)
        assert rel_err(x.grad.numpy(), fd) < 1e-6


class TestLengthRegulation:
    def test_example(self):
        H = torch.arange(3.0)[:, None].repeat(1, 4)
        out = length_regulate(H, torch.tensor([2, 1, 3]))
        assert out[:, 0].tolist() == [0, 0, 1, 2, 2, 2]

    def test_identity(self):
        H = torch.randn(5, 4)
        assert torch.equal(length_regulate(H, torch.ones(5, dtype=torch.long)), H)

    def test_clamps(self):
        out = length_regulate(torch.randn(3, 2), torch.tensor([0.2, 2.0, -1.0]))
        assert out.shape[0] == 4

    def test_viterbi_length(self, rng):
        ls = random_log_posteriors(rng, 9, 4)
        _, dur = viterbi_align(t64(ls))
        assert length_regulate(torch.randn(4, 3), dur).shape[0] == 9

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=10))
    def test_row_count_and_batched(self, durs):
        H = torch.randn(len(durs), 3, dtype=torch.float64)
        d = torch.tensor(durs)
        out = length_regulate(H, d)
        assert out.shape[0] == sum(durs)
        hard = hard_from_durations(d[None]).double()
        torch.testing.assert_close(regulate_batch(H[None], hard)[0], out)
