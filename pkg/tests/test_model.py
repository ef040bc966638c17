import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import random_chol
from vargp.errors import DimensionError
from vargp.gaussian import DiagGaussian, inverse_build_chol
from vargp.kernel import JITTER_STEPS, HyperParams
from vargp.model import (
    ContinualState,
    InducingBlock,
    active_blocks,
    predictive_marginals,
    prior_conditional,
    prior_factors,
    variational_joint,
)

K_CLASSES = 2


def T(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def np_kernel(log_ls, log_scale, X, Y):
    ls = np.exp(log_ls)
    d2 = (((X[:, None, :] - Y[None, :, :]) / ls) ** 2).sum(-1)
    return math.exp(log_scale) * np.exp(-0.5 * d2)


def jittered(K):
    return K + JITTER_STEPS[0] * np.mean(np.diag(K)) * np.eye(len(K))


def random_block(rng, M, D, frozen=True, spread=1.0):
    Z = rng.normal(scale=spread, size=(M, D))
    m = rng.normal(size=(M, K_CLASSES))
    L = random_chol(rng, M, scale=0.6, batch=(K_CLASSES,))
    return InducingBlock(T(Z), T(m), inverse_build_chol(T(L)), frozen)


def make_state(blocks, D, variant="vargp", log_ls=None, log_scale=0.0):
    log_ls = np.zeros(D) if log_ls is None else log_ls
    mean = T(np.append(log_ls, log_scale))
    hq = DiagGaussian(mean, torch.full((D + 1,), -2.0, dtype=torch.float64))
    hp = DiagGaussian(torch.zeros(D + 1, dtype=torch.float64), torch.zeros(D + 1, dtype=torch.float64))
    return ContinualState(blocks, hq, hp, K_CLASSES, D, variant)


def block_cov(block, k):
    L = block.chols[k].numpy()
    return L @ L.T


class TestPriorConditional:
    def test_scalar_schur_complement(self):
        # k(z_new, z_old) = exp(-d^2 / 2) = 0.5  ->  d^2 = 2 ln 2
        th = HyperParams(T([0.0]), T(0.0))
        d = math.sqrt(2 * math.log(2))
        A, C = prior_conditional(th, T([[d]]), T([[0.0]]))
        # the single jittered factorization shifts results at the 1e-8 level
        assert A.item() == pytest.approx(0.5, abs=1e-7)
        assert (C @ C.T).item() == pytest.approx(0.75, abs=1e-7)

    def test_duplicate_inputs(self):
        th = HyperParams(T([0.0]), T(0.0))
        Z = T([[0.0], [1.5]])
        A, C = prior_conditional(th, Z, Z)
        np.testing.assert_allclose(A.numpy(), np.eye(2), atol=1e-6)
        assert float((C @ C.T).abs().max()) < 1e-6

    def test_far_apart(self):
        th = HyperParams(T([0.0, 0.0]), T(0.3))
        Z_old, Z_new = T([[0.0, 0.0], [1.0, 0.0]]), T([[50.0, 50.0], [51.0, 50.0]])
        A, C = prior_conditional(th, Z_new, Z_old)
        assert float(A.abs().max()) < 1e-12
        K_new = np_kernel(np.zeros(2), 0.3, Z_new.numpy(), Z_new.numpy())
        np.testing.assert_allclose((C @ C.T).numpy(), K_new, atol=1e-7)

    def test_dimension_mismatch(self):
        th = HyperParams(T([0.0]), T(0.0))
        with pytest.raises(DimensionError):
            prior_conditional(th, T([[0.0, 1.0]]), T([[0.0]]))


class TestVariationalJoint:
    def test_single_block_is_its_marginal(self, rng):
        b = random_block(rng, 3, 2)
        q = variational_joint(make_state([b], 2), HyperParams(T([0.0, 0.0]), T(0.0)))
        assert torch.equal(q.mean, b.means) and torch.equal(q.chol, b.chols)

    def test_two_blocks_match_orthogonal_inducing_form(self, rng):
        D = 2
        b1, b2 = random_block(rng, 3, D), random_block(rng, 4, D, frozen=False)
        log_ls, log_scale = np.array([0.2, -0.1]), 0.3
        state = make_state([b1, b2], D, log_ls=log_ls, log_scale=log_scale)
        th = HyperParams(T(log_ls), T(log_scale))
        Z = np.concatenate([b1.Z.numpy(), b2.Z.numpy()])
        Kj = jittered(np_kernel(log_ls, log_scale, Z, Z))
        Kuu, Kvu = Kj[:3, :3], Kj[3:, :3]
        A = Kvu @ np.linalg.inv(Kuu)
        for k in range(K_CLASSES):
            q = variational_joint(state, th, class_k=k)
            Su, Sv = block_cov(b1, k), block_cov(b2, k)
            mu, mv = b1.means[k].numpy(), b2.means[k].numpy()
            mean_ref = np.concatenate([mu, A @ mu + mv])
            cov_ref = np.block([[Su, Su @ A.T], [A @ Su, Sv + A @ Su @ A.T]])
            assert np.abs(q.mean.numpy() - mean_ref).max() <= 1e-10
            assert np.abs(q.covariance.numpy() - cov_ref).max() <= 1e-10

    def test_three_scalar_blocks_match_ancestral_sampling(self):
        rng = np.random.default_rng(21)
        blocks = [random_block(rng, 1, 1) for _ in range(3)]
        blocks[-1] = InducingBlock(blocks[-1].Z, blocks[-1].m, blocks[-1].S_raw, False)
        # keep the inputs close so the coupling is strong
        for b, z in zip(blocks, (0.0, 0.6, 1.1)):
            b.Z = T([[z]])
        state = make_state(blocks, 1)
        th = HyperParams(T([0.0]), T(0.0))
        Z = np.array([[0.0], [0.6], [1.1]])
        Kj = jittered(np_kernel(np.zeros(1), 0.0, Z, Z))
        n = 1_000_000
        for k in range(K_CLASSES):
            m = [b.means[k].item() for b in blocks]
            s = [b.chols[k].item() for b in blocks]
            u1 = m[0] + s[0] * rng.normal(size=n)
            a2 = Kj[1, 0] / Kj[0, 0]
            u2 = a2 * u1 + m[1] + s[1] * rng.normal(size=n)
            a3 = Kj[2, :2] @ np.linalg.inv(Kj[:2, :2])
            u3 = a3[0] * u1 + a3[1] * u2 + m[2] + s[2] * rng.normal(size=n)
            U = np.stack([u1, u2, u3], 1)
            q = variational_joint(state, th, class_k=k)
            Sig = q.covariance.numpy()
            se_mean = np.sqrt(np.diag(Sig) / n)
            assert np.all(np.abs(U.mean(0) - q.mean.numpy()) < 3 * se_mean)
            se_cov = np.sqrt((np.outer(np.diag(Sig), np.diag(Sig)) + Sig**2) / n)
            assert np.all(np.abs(np.cov(U.T) - Sig) < 3 * se_cov)

    def test_block_diag_variant_has_zero_cross_covariance(self, rng):
        b1, b2 = random_block(rng, 3, 2), random_block(rng, 2, 2, frozen=False)
        for b in (b1, b2):
            b.Z = T(rng.normal(scale=0.3, size=b.Z.shape))
        q = variational_joint(make_state([b1, b2], 2, "block_diag"), HyperParams(T([0.0, 0.0]), T(0.0)))
        assert torch.all(q.covariance[:, 3:, :3] == 0)

    @given(st.integers(0, 2**32 - 1))
    def test_earlier_marginals_ignore_last_block(self, seed):
        rng = np.random.default_rng(seed)
        frozen = [random_block(rng, 2, 2), random_block(rng, 3, 2)]
        th = HyperParams(T([0.1, -0.2]), T(0.1))
        q1 = variational_joint(make_state(frozen + [random_block(rng, 2, 2, frozen=False)], 2), th)
        q2 = variational_joint(make_state(frozen + [random_block(rng, 2, 2, frozen=False)], 2), th)
        assert float((q1.mean[:, :5] - q2.mean[:, :5]).abs().max()) <= 1e-10
        assert float((q1.covariance[:, :5, :5] - q2.covariance[:, :5, :5]).abs().max()) <= 1e-10

    @given(st.integers(0, 2**32 - 1))
    def test_joint_is_positive_definite(self, seed):
        rng = np.random.default_rng(seed)
        blocks = [random_block(rng, 3, 2) for _ in range(3)]
        blocks[-1].frozen = False
        th = HyperParams(T(rng.normal(scale=0.5, size=2)), T(rng.normal(scale=0.5)))
        q = variational_joint(make_state(blocks, 2), th)
        assert bool((torch.linalg.eigvalsh(q.covariance) > 0).all())


class TestPredictive:
    def test_at_inducing_input_equals_joint_marginal(self, rng):
        blocks = [random_block(rng, 3, 2), random_block(rng, 3, 2, frozen=False)]
        th = HyperParams(T([0.0, 0.0]), T(0.0))
        state = make_state(blocks, 2)
        q = variational_joint(state, th)
        Z = torch.cat([b.Z for b in blocks])
        mean, var = predictive_marginals(state, th, Z)
        np.testing.assert_allclose(mean.numpy(), q.mean.numpy(), atol=1e-6)
        np.testing.assert_allclose(var.numpy(), torch.diagonal(q.covariance, dim1=-2, dim2=-1).numpy(),
                                   atol=1e-6)

    def test_far_from_inducing_inputs_reverts_to_prior(self, rng):
        blocks = [random_block(rng, 4, 2, frozen=False)]
        th = HyperParams(T([0.0, 0.0]), T(math.log(2.0)))
        mean, var = predictive_marginals(make_state(blocks, 2, log_scale=math.log(2.0)), th, T([[100.0, 100.0]]))
        assert float(mean.abs().max()) < 1e-12
        np.testing.assert_allclose(var.numpy(), 2.0, rtol=1e-12)

    def test_prior_posterior_gives_prior_variance(self, rng):
        Z = rng.normal(size=(5, 2))
        th = HyperParams(T([0.3, 0.1]), T(0.2))
        L = prior_factors(th, [InducingBlock.initial(T(Z), K_CLASSES)]).chol
        raw = inverse_build_chol(L.expand(K_CLASSES, 5, 5))
        block = InducingBlock(T(Z), torch.zeros(5, K_CLASSES, dtype=torch.float64), raw)
        Xs = rng.normal(size=(7, 2))
        _, var = predictive_marginals(make_state([block], 2, log_ls=[0.3, 0.1], log_scale=0.2), th, T(Xs))
        np.testing.assert_allclose(var.numpy(), math.exp(0.2), atol=1e-10)

    def test_block_order_invariance_for_block_diag(self, rng):
        b1, b2, b3 = random_block(rng, 2, 2), random_block(rng, 3, 2), random_block(rng, 2, 2)
        th = HyperParams(T([0.2, 0.0]), T(0.1))
        Xs = T(rng.normal(size=(6, 2)))
        base = make_state([b1, b2, b3], 2, "block_diag")
        swapped = make_state([b3, b1, b2], 2, "block_diag")
        for a, b in zip(predictive_marginals(base, th, Xs), predictive_marginals(swapped, th, Xs)):
            assert float((a - b).abs().max()) <= 1e-8

    @given(st.integers(0, 2**32 - 1))
    def test_within_block_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        blocks = [random_block(rng, 3, 2), random_block(rng, 3, 2, frozen=False)]
        th = HyperParams(T([0.2, 0.0]), T(0.1))
        Xs = T(rng.normal(size=(4, 2)))
        permuted = []
        for b in blocks:
            p = rng.permutation(3)
            cov = b.chols @ b.chols.transpose(-1, -2)
            cov = cov[:, p][:, :, p]
            permuted.append(InducingBlock(b.Z[p], b.m[p], inverse_build_chol(torch.linalg.cholesky(cov)),
                                          b.frozen))
        a = predictive_marginals(make_state(blocks, 2), th, Xs)
        b = predictive_marginals(make_state(permuted, 2), th, Xs)
        for x, y in zip(a, b):
            assert float((x - y).abs().max()) <= 1e-8

    def test_global_variant_uses_only_last_block(self, rng):
        b1, b2 = random_block(rng, 3, 2), random_block(rng, 3, 2, frozen=False)
        th = HyperParams(T([0.0, 0.0]), T(0.0))
        Xs = T(rng.normal(size=(4, 2)))
        glob = make_state([b1, b2], 2, "global")
        assert active_blocks(glob) == [b2]
        solo = make_state([InducingBlock(b2.Z, b2.m, b2.S_raw)], 2)
        for x, y in zip(predictive_marginals(glob, th, Xs), predictive_marginals(solo, th, Xs)):
            assert torch.equal(x, y)

    def test_empty_query(self, rng):
        state = make_state([random_block(rng, 2, 2, frozen=False)], 2)
        with pytest.raises(DimensionError):
            predictive_marginals(state, HyperParams(T([0.0, 0.0]), T(0.0)), torch.zeros(0, 2))


class TestState:
    def test_only_last_block_unfrozen(self, rng):
        with pytest.raises(ValueError):
            make_state([random_block(rng, 2, 2, frozen=False), random_block(rng, 2, 2)], 2)

    def test_unknown_variant(self, rng):
        with pytest.raises(ValueError):
            make_state([random_block(rng, 2, 2)], 2, "nope")

    def test_point_hypers_ignore_noise(self, rng):
        state = make_state([random_block(rng, 2, 2)], 2, "mle_hypers")
        th = state.theta_sample(torch.ones(3, dtype=torch.float64))
        assert torch.equal(th.to_vector(), state.hyper_q.mean)

    def test_theta_sample_reparameterized(self, rng):
        state = make_state([random_block(rng, 2, 2)], 2)
        eps = T([1.0, -1.0, 0.5])
        expected = state.hyper_q.mean + state.hyper_q.std * eps
        assert torch.equal(state.theta_sample(eps).to_vector(), expected)

    def test_freeze_detaches(self, rng):
        b = random_block(rng, 2, 2, frozen=False)
        b.m.requires_grad_(True)
        f = b.freeze()
        assert f.frozen and not f.m.requires_grad
        assert f.m.data_ptr() != b.m.data_ptr()
