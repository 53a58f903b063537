"""Contrastive losses: closed forms, invariances, gradients, the breakdown."""

import math

import numpy as np
import pytest

from mvitac import tensor as T
from mvitac.errors import (
    ConfigError,
    InsufficientNegativesError,
    NormalizationContractError,
)
from mvitac.losses import (
    EmbeddingSet,
    LossWeights,
    combined_loss,
    cross_entropy,
    info_nce,
)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def random_embedding_set(seed, n=6, d=16):
    rng = np.random.default_rng(seed)
    return EmbeddingSet(*[T.Tensor(unit_rows(rng, n, d)) for _ in range(8)])


class TestInfoNCEValues:
    def test_uniform_similarities_give_log_n(self):
        # every q_i.k_j identical -> softmax is uniform -> loss = ln N
        q = np.zeros((8, 4), dtype=np.float32)
        k = np.zeros((8, 4), dtype=np.float32)
        q[:, 0] = 1.0
        k[:, 1] = 1.0
        loss = info_nce(T.Tensor(q), T.Tensor(k), tau=0.37)
        assert loss.item() == pytest.approx(math.log(8), abs=1e-4)

    def test_orthonormal_positives_tau_1(self):
        eye = np.eye(8, dtype=np.float32)
        loss = info_nce(T.Tensor(eye), T.Tensor(eye), tau=1.0)
        assert loss.item() == pytest.approx(math.log(math.e + 7) - 1, abs=1e-4)

    def test_orthonormal_positives_tau_007(self):
        eye = np.eye(8, dtype=np.float32)
        loss = info_nce(T.Tensor(eye), T.Tensor(eye), tau=0.07)
        assert 0.0 < loss.item() < 1e-5

    def test_strictly_positive(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            q = T.Tensor(unit_rows(rng, 5, 8))
            k = T.Tensor(unit_rows(rng, 5, 8))
            assert info_nce(q, k, 0.2).item() > 0.0


class TestInfoNCEContracts:
    def test_insufficient_negatives(self):
        one = T.Tensor([[1.0, 0.0]])
        with pytest.raises(InsufficientNegativesError):
            info_nce(one, one, 0.07)

    def test_non_unit_rows_rejected(self):
        q = T.Tensor(np.full((4, 4), 0.9, dtype=np.float32))
        k = T.Tensor(np.eye(4, dtype=np.float32))
        with pytest.raises(NormalizationContractError):
            info_nce(q, k, 0.07)

    def test_non_positive_tau(self):
        eye = T.Tensor(np.eye(4, dtype=np.float32))
        with pytest.raises(ConfigError):
            info_nce(eye, eye, 0.0)

    def test_stable_at_low_temperature(self):
        rng = np.random.default_rng(5)
        q = T.Tensor(unit_rows(rng, 16, 32))
        k = T.Tensor(unit_rows(rng, 16, 32))
        loss = info_nce(q, k, 0.07)
        assert math.isfinite(loss.item())


class TestInfoNCEProperties:
    def test_monotone_in_positive_alignment(self):
        # keys are basis vectors; a spare dimension absorbs normalization so
        # raising s_ii leaves every other similarity untouched
        n = 4
        k = np.zeros((n, n + 1), dtype=np.float32)
        k[np.arange(n), np.arange(n)] = 1.0
        rng = np.random.default_rng(3)
        s = rng.uniform(-0.3, 0.3, size=(n, n)).astype(np.float32)

        def loss_for(s_mat):
            q = np.zeros((n, n + 1), dtype=np.float32)
            q[:, :n] = s_mat
            q[:, n] = np.sqrt(1.0 - np.sum(s_mat**2, axis=1))
            return info_nce(T.Tensor(q), T.Tensor(k), 0.3).item()

        losses = []
        for bump in (0.0, 0.1, 0.2, 0.3):
            s2 = s.copy()
            s2[np.arange(n), np.arange(n)] += bump
            losses.append(loss_for(s2))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        q = unit_rows(rng, 10, 12)
        k = unit_rows(rng, 10, 12)
        base = info_nce(T.Tensor(q), T.Tensor(k), 0.07).item()
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(10)
            permuted = info_nce(T.Tensor(q[perm]), T.Tensor(k[perm]), 0.07).item()
            assert permuted == pytest.approx(base, abs=1e-6)

    def test_shared_rotation_invariance(self):
        rng = np.random.default_rng(8)
        q = unit_rows(rng, 6, 10)
        k = unit_rows(rng, 6, 10)
        rot, _ = np.linalg.qr(rng.normal(size=(10, 10)))
        rot = rot.astype(np.float32)
        base = info_nce(T.Tensor(q), T.Tensor(k), 0.2).item()
        rotated = info_nce(T.Tensor(q @ rot), T.Tensor(k @ rot), 0.2).item()
        assert rotated == pytest.approx(base, abs=1e-5)

    @pytest.mark.parametrize("tau", [1.0, 0.07])
    def test_gradient_against_finite_differences(self, tau):
        with T.use_dtype(np.float64):
            q = T.uniform((4, 8), -1, 1, seed=11, requires_grad=True)
            k = T.uniform((4, 8), -1, 1, seed=12, requires_grad=True)

            def f():
                return info_nce(T.l2_normalize(q), T.l2_normalize(k), tau)

            err = T.grad_check(f, [q, k])
        assert err < 1e-5

    def test_stop_gradient_side_receives_none(self):
        rng = np.random.default_rng(9)
        q = T.Tensor(unit_rows(rng, 4, 8), requires_grad=True)
        k = T.Tensor(unit_rows(rng, 4, 8))  # key side: no grad path
        T.backward(info_nce(q, k, 0.07))
        assert q.grad is not None and k.grad is None


class TestCombinedLoss:
    def test_lambda_zero_is_exact_sum_of_intra(self):
        emb = random_embedding_set(0)
        total, bd = combined_loss(emb, LossWeights(tau=0.07, lambda_inter=0.0))
        assert bd.l_mm == bd.l_vv + bd.l_tt
        assert total.item() == pytest.approx(bd.l_mm, abs=1e-6)

    def test_equal_components_give_four_c(self):
        rng = np.random.default_rng(1)
        q = T.Tensor(unit_rows(rng, 6, 16))
        k = T.Tensor(unit_rows(rng, 6, 16))
        emb = EmbeddingSet(q, k, q, k, q, k, q, k)
        total, bd = combined_loss(emb, LossWeights(tau=0.07, lambda_inter=1.0))
        c = bd.l_vv
        assert bd.l_tt == c and bd.l_vt == c and bd.l_tv == c
        assert bd.l_mm == pytest.approx(4 * c, rel=1e-6)

    def test_uniform_closed_form_composition(self):
        # all four terms at ln(8), lambda 0.5 -> 3 ln 8
        q = np.zeros((8, 4), dtype=np.float32)
        k = np.zeros((8, 4), dtype=np.float32)
        q[:, 0] = 1.0
        k[:, 1] = 1.0
        emb = EmbeddingSet(*[T.Tensor(q if i % 2 == 0 else k) for i in range(8)])
        total, bd = combined_loss(emb, LossWeights(tau=0.07, lambda_inter=0.5))
        assert bd.l_mm == pytest.approx(3 * math.log(8), abs=1e-3)

    def test_breakdown_identity(self):
        for seed in range(6):
            lam = 0.25 * seed
            emb = random_embedding_set(seed)
            _, bd = combined_loss(emb, LossWeights(tau=0.07, lambda_inter=lam))
            assert bd.l_mm == pytest.approx(
                bd.l_vv + bd.l_tt + lam * (bd.l_vt + bd.l_tv), abs=1e-6)

    def test_gradient_against_finite_differences(self):
        with T.use_dtype(np.float64):
            raw = [T.uniform((4, 8), -1, 1, seed=20 + i, requires_grad=True)
                   for i in range(8)]
            w = LossWeights(tau=0.2, lambda_inter=0.7)

            def f():
                z = [T.l2_normalize(r) for r in raw]
                total, _ = combined_loss(EmbeddingSet(*z), w)
                return total

            err = T.grad_check(f, raw)
        assert err < 1e-5

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(tau=-0.1)
        with pytest.raises(ConfigError):
            LossWeights(lambda_inter=-1.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((4, 5), dtype=np.float32))
        loss = cross_entropy(logits, np.zeros(4, dtype=np.int64))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-5)

    def test_matches_manual_computation(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3)).astype(np.float32)
        labels = rng.integers(0, 3, size=6)
        loss = cross_entropy(T.Tensor(x), labels).item()
        probs = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        expected = -np.mean(np.log(probs[np.arange(6), labels]))
        assert loss == pytest.approx(float(expected), rel=1e-5)

    def test_gradient(self):
        with T.use_dtype(np.float64):
            x = T.uniform((5, 4), -2, 2, seed=31, requires_grad=True)
            labels = np.array([0, 1, 2, 3, 1])
            err = T.grad_check(lambda: cross_entropy(x, labels), [x])
        assert err < 1e-5

    def test_label_range_checked(self):
        with pytest.raises(ConfigError):
            cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))
