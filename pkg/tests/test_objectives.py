import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moembed import numeric as nm
from moembed.moe import ConfigError
from moembed.numeric import DimensionError, grad_check
from moembed.objectives import (
    contrastive_scores,
    infonce,
    infonce_hard,
    mask_tokens,
    mrl_loss,
    score,
    total_loss,
)


def unit_rows(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def explicit_hard_infonce(S, hard, tau):
    """Direct evaluation of the hard-negative normaliser, one row at a time."""
    n = len(S)
    total = 0.0
    for i in range(n):
        pos = math.exp(S[i][i] / tau)
        z = pos + sum(math.exp(S[i][j] / tau) for j in range(n) if j != i)
        z += sum(math.exp(s / tau) for s in hard[i])
        total += -math.log(pos / z)
    return total / n


class TestScore:
    def test_identical_and_orthogonal(self):
        a = nm.tensor([[1.0, 0.0], [0.0, 1.0]])
        s = score(a, a).data
        np.testing.assert_array_equal(s, np.eye(2))

    def test_against_loop(self):
        rng = np.random.default_rng(0)
        q, d = unit_rows(rng, 4, 3), unit_rows(rng, 5, 3)
        s = score(nm.tensor(q), nm.tensor(d)).data
        for i in range(4):
            for j in range(5):
                assert s[i, j] == pytest.approx(sum(q[i, t] * d[j, t] for t in range(3)), abs=1e-15)
        np.testing.assert_allclose(score(nm.tensor(d), nm.tensor(q)).data, s.T, atol=1e-15)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            score(nm.tensor(np.ones((2, 3))), nm.tensor(np.ones((2, 4))))


class TestInfoNCE:
    def test_single_pair_is_zero(self):
        assert infonce(nm.tensor([[0.37]]), 0.02).item() == 0.0

    def test_two_pairs_closed_form(self):
        loss = infonce(nm.tensor([[1.0, 0.0], [0.0, 1.0]]), 0.02).item()
        expected = math.log1p(math.exp(-50.0))  # -log(e^50 / (e^50 + e^0))
        assert loss == pytest.approx(expected, rel=1e-12)
        assert loss == pytest.approx(1.93e-22, rel=1e-2)

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            infonce(nm.tensor([[1.0]]), 0.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        S = rng.uniform(-1, 1, size=(5, 5))
        perm = rng.permutation(5)
        a = infonce(nm.tensor(S), 0.1).item()
        b = infonce(nm.tensor(S[perm][:, perm]), 0.1).item()
        assert a == pytest.approx(b, rel=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 6), tau=st.floats(0.01, 2.0))
    def test_non_negative(self, seed, n, tau):
        S = np.random.default_rng(seed).uniform(-1, 1, size=(n, n))
        assert infonce(nm.tensor(S), tau).item() >= 0.0

    def test_monotone_in_inverse_temperature(self):
        S = np.array([[0.9, 0.2], [0.1, 0.7]])
        inv = np.linspace(0.5, 100, 200)
        losses = [infonce(nm.tensor(S), 1.0 / t).item() for t in inv]
        assert all(b <= a for a, b in zip(losses, losses[1:]))


class TestHardInfoNCE:
    def test_reduces_to_infonce_bitwise(self):
        rng = np.random.default_rng(2)
        q, d = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
        S = contrastive_scores(nm.tensor(q), nm.tensor(d), nm.tensor(np.zeros((4, 0, 6))))
        assert infonce_hard(S, 0.02).item() == infonce(score(nm.tensor(q), nm.tensor(d)), 0.02).item()

    def test_explicit_summation_oracle(self):
        rng = np.random.default_rng(3)
        q, d, h = unit_rows(rng, 2, 5), unit_rows(rng, 2, 5), unit_rows(rng, 2, 1, 5)
        S = q @ d.T
        hard = [[float(q[i] @ h[i, 0])] for i in range(2)]
        got = infonce_hard(contrastive_scores(nm.tensor(q), nm.tensor(d), nm.tensor(h)), 0.05).item()
        assert got == pytest.approx(explicit_hard_infonce(S.tolist(), hard, 0.05), rel=1e-12)

    def test_only_own_hard_negatives(self):
        rng = np.random.default_rng(4)
        q, d, h = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4), unit_rows(rng, 3, 2, 4)
        S = contrastive_scores(nm.tensor(q), nm.tensor(d), nm.tensor(h)).data
        for i in range(3):
            np.testing.assert_allclose(S[i, 3:], h[i] @ q[i], atol=1e-15)

    def test_minus_infinity_column_is_inert(self):
        rng = np.random.default_rng(5)
        S = rng.uniform(-1, 1, size=(3, 3))
        with_inf = np.concatenate([S, np.full((3, 1), -np.inf)], axis=1)
        assert infonce_hard(nm.tensor(with_inf), 0.1).item() == pytest.approx(infonce(nm.tensor(S), 0.1).item(), rel=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), extra=st.floats(-1, 1))
    def test_finite_hard_negative_increases_loss(self, seed, extra):
        S = np.random.default_rng(seed).uniform(-1, 1, size=(3, 3))
        base = infonce(nm.tensor(S), 0.5).item()
        more = infonce_hard(nm.tensor(np.concatenate([S, np.full((3, 1), extra)], axis=1)), 0.5).item()
        assert more > base


class TestMRL:
    def test_single_dim_is_plain_hard_infonce(self):
        rng = np.random.default_rng(6)
        q, d, h = (nm.tensor(unit_rows(rng, 3, 8)), nm.tensor(unit_rows(rng, 3, 8)), nm.tensor(unit_rows(rng, 3, 2, 8)))
        plain = infonce_hard(contrastive_scores(q, d, h), 0.02).item()
        assert mrl_loss(q, d, h, [8], 0.02).item() == plain

    def test_two_dims_average_independent_losses(self):
        rng = np.random.default_rng(7)
        q, d, h = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8), unit_rows(rng, 4, 3, 8)

        def by_hand(dim):
            norm = lambda x: x[..., :dim] / np.linalg.norm(x[..., :dim], axis=-1, keepdims=True)  # noqa: E731
            qq, dd, hh = norm(q), norm(d), norm(h)
            S = (qq @ dd.T).tolist()
            hard = [[float(qq[i] @ hh[i, m]) for m in range(3)] for i in range(4)]
            return explicit_hard_infonce(S, hard, 0.1)

        got = mrl_loss(nm.tensor(q), nm.tensor(d), nm.tensor(h), [8, 2], 0.1).item()
        assert got == pytest.approx((by_hand(8) + by_hand(2)) / 2, rel=1e-10)

    def test_full_dim_always_included(self):
        rng = np.random.default_rng(8)
        q, d = nm.tensor(unit_rows(rng, 3, 8)), nm.tensor(unit_rows(rng, 3, 8))
        assert mrl_loss(q, d, None, [4], 0.1).item() == pytest.approx(mrl_loss(q, d, None, [8, 4], 0.1).item(), rel=1e-15)

    def test_empty_dims(self):
        q = nm.tensor(np.eye(2))
        with pytest.raises(ConfigError):
            mrl_loss(q, q, None, [], 0.1)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_losses_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        qp = nm.parameter(rng.normal(size=(4, 8)))
        dp = nm.parameter(rng.normal(size=(4, 8)))
        hp = nm.parameter(rng.normal(size=(4, 2, 8)))
        norm = lambda t: nm.l2_normalize(t, axis=-1)  # noqa: E731
        named = {"q": qp, "d": dp, "h": hp}
        losses = {
            "infonce": lambda: infonce(score(norm(qp), norm(dp)), 0.1),
            "hard": lambda: infonce_hard(contrastive_scores(norm(qp), norm(dp), norm(hp)), 0.1),
            "mrl": lambda: mrl_loss(norm(qp), norm(dp), norm(hp), [8, 4], 0.1),
        }
        for name, f in losses.items():
            assert grad_check(f, named).worst <= 1e-4, name


class TestMasking:
    def test_rate_over_100k_tokens(self):
        ids = np.random.default_rng(0).integers(10, 1000, size=(100, 1000))
        m = mask_tokens(ids, 0.3, seed=1, vocab_size=1000)
        assert abs(m.mask_positions.mean() - 0.3) <= 0.01

    def test_corruption_confined_to_mask(self):
        ids = np.random.default_rng(1).integers(10, 50, size=(50, 40))
        m = mask_tokens(ids, 0.3, seed=2, vocab_size=50)
        assert np.all(m.corrupted[~m.mask_positions] == ids[~m.mask_positions])
        sel = m.mask_positions
        masked = (m.corrupted == 2) & sel
        assert 0.75 <= masked.sum() / sel.sum() <= 0.85

    def test_special_tokens_never_selected(self):
        ids = np.tile(np.array([3, 0, 2, 4, 17]), (200, 1))
        m = mask_tokens(ids, 0.9, seed=0, vocab_size=20)
        assert not m.mask_positions[:, :4].any()
        assert m.mask_positions[:, 4].mean() > 0.8

    def test_tiny_probability_masks_almost_nothing(self):
        m = mask_tokens(np.full((10, 10), 9), 1e-9, seed=0, vocab_size=20)
        assert m.num_masked == 0

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_probability_bounds(self, p):
        with pytest.raises(ConfigError):
            mask_tokens(np.ones((2, 2), int), p, 0, 10)

    def test_seeded(self):
        ids = np.arange(100).reshape(10, 10) + 10
        a = mask_tokens(ids, 0.3, [5, 1], 200)
        b = mask_tokens(ids, 0.3, [5, 1], 200)
        assert np.array_equal(a.corrupted, b.corrupted)


class TestTotalLoss:
    def test_dense_model(self):
        assert total_loss(nm.tensor(2.0), [], 1.0).item() == 2.0

    def test_two_layers(self):
        got = total_loss(nm.tensor(2.0), [nm.tensor(0.125), nm.tensor(0.125)], 1.0).item()
        assert got == 2.125

    def test_mean_over_layers(self):
        got = total_loss(nm.tensor(1.0), [nm.tensor(0.1), nm.tensor(0.3)], 2.0).item()
        assert got == pytest.approx(1.4, rel=1e-15)
