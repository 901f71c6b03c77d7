import math

import numpy as np
import pytest

from mixerflow.errors import ContractError
from mixerflow.flows import (ElementwiseScale, FlowChain, Identity, Permute, StandardNormal,
                             bits_per_dim, log_likelihood, sample, verify_bijection)
from mixerflow.layers import AffineCoupling, LinearBlock
from mixerflow.tensor import Tensor, no_grad

from oracles import jacobian_columns, log_abs_det, std_normal_logpdf

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def test_empty_chain_at_origin():
    lp = log_likelihood(FlowChain([]), StandardNormal(1), Tensor([[0.0]]))
    assert abs(lp.data[0] + HALF_LOG_2PI) < 1e-15
    assert abs(lp.data[0] - (-0.918939)) < 1e-6


def test_scale_by_two_adds_log_two():
    lp = log_likelihood(FlowChain([ElementwiseScale([2.0])]), StandardNormal(1), Tensor([[0.0]]))
    assert abs(lp.data[0] - (-HALF_LOG_2PI + math.log(2))) < 1e-15


def _random_chain(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    lin = LinearBlock(8, "LU")
    for p in lin.parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    cp = AffineCoupling(8, 16, rng, use_norm=False)
    for p in cp.parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    return FlowChain([lin, cp])


def test_chain_likelihood_matches_jacobian_oracle():
    chain = _random_chain(0)
    x = np.random.default_rng(1).standard_normal((1, 8))

    def f(v):
        with no_grad():
            return chain.forward(Tensor(v.reshape(1, 8)))[0].data

    with no_grad():
        lp = log_likelihood(chain, StandardNormal(8), Tensor(x)).data[0]
    z = f(x)
    oracle = std_normal_logpdf(z)[0] + log_abs_det(jacobian_columns(f, x))
    assert abs(lp - oracle) < 1e-6


def test_bits_per_dim_anchors():
    assert bits_per_dim(0.0, 10, 256) == 8.0
    assert bits_per_dim(math.log(2), 1, 2) == 0.0
    nats = 0.01 * 3072 * math.log(2)
    assert abs(nats - 21.29) < 0.01
    delta = bits_per_dim(-nats, 3072) - bits_per_dim(0.0, 3072)
    assert abs(delta - 0.01) < 1e-12
    with pytest.raises(ContractError):
        bits_per_dim(0.0, 0)


def test_sample_empty_chain_returns_base_draws():
    out = sample(FlowChain([]), StandardNormal(5), 4, seed=7)
    ref = np.random.Generator(np.random.PCG64(7)).standard_normal((4, 5))
    assert np.array_equal(out, ref)
    assert np.array_equal(out, sample(FlowChain([]), StandardNormal(5), 4, seed=7))


def test_sample_through_permutations_keeps_unit_variance():
    rng = np.random.default_rng(0)
    chain = FlowChain([Permute(rng.permutation(6)), Permute(rng.permutation(6))])
    x = sample(chain, StandardNormal(6), 10_000, seed=3)
    var = x.var(axis=0)
    assert np.all((var > 0.9) & (var < 1.1))


def test_verify_identity_and_cancelling_scale():
    rep = verify_bijection(Identity(), (4,), 3)
    assert rep.passed and rep.round_trip == 0.0 and rep.log_det_error < 1e-10
    rep = verify_bijection(ElementwiseScale([2.0, 0.5]), (2,), 3)
    assert rep.passed
    with no_grad():
        _, ld = ElementwiseScale([2.0, 0.5]).forward(Tensor(np.ones((1, 2))))
    assert ld.data[0] == 0.0


def test_verify_random_coupling_d8():
    rng = np.random.Generator(np.random.PCG64(4))
    cp = AffineCoupling(8, 16, rng)
    for p in cp.parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    rep = verify_bijection(cp, (1, 8), 20, 1e-8, 1e-6)
    assert rep.passed, rep


def test_verify_catches_wrong_log_det():
    class Liar(ElementwiseScale):
        def forward(self, x):
            z, ld = super().forward(x)
            return z, ld + 0.1

    rep = verify_bijection(Liar([2.0, 3.0]), (2,), 5)
    assert not rep.passed
    assert abs(rep.log_det_error - 0.1) < 1e-6


def test_permute_rejects_non_permutation():
    with pytest.raises(ContractError):
        Permute([0, 0, 1])
