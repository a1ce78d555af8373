import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from pmmsynth.datamodel import ModalityMask
from pmmsynth.errors import ConstraintViolation, ShapeError, UntrainableSampleError
from pmmsynth.losses import (
    LossWeights,
    discriminator_loss,
    generator_loss,
    mask_input,
    sample_condition,
    valid_conditions,
)
from pmmsynth.network import DiscriminatorBank, NetworkConfig


def M(bits):
    return ModalityMask.from_string(bits)


def const_bank(value):
    return lambda i, img: torch.full((img.shape[0], 1, 2, 2), float(value), dtype=img.dtype) + 0 * img.mean()


def test_mask_input_examples():
    y = torch.rand(6, 4, 4)
    assert torch.equal(mask_input(y, ModalityMask.full()), y)
    assert torch.all(mask_input(y, ModalityMask.empty()) == 0)
    x = mask_input(y, M("100000"))
    assert torch.equal(x[0], y[0]) and torch.all(x[1:] == 0)
    xb = mask_input(y.numpy()[None].repeat(2, 0)[0], M("010000"))
    assert np.array_equal(xb[1], y.numpy()[1])


def test_mask_input_constraint():
    with pytest.raises(ConstraintViolation):
        mask_input(torch.rand(6, 2, 2), M("001000"), availability=M("110000"))


def test_generator_loss_zero_when_perfect():
    y = torch.rand(2, 6, 8, 8)
    d = {i: torch.ones(2, 1, 1, 1) for i in range(6)}
    rep = generator_loss(y.clone(), y, ModalityMask.full(), M("101010"), d)
    assert rep.floats() == {"total": 0.0, "syn": 0.0, "rec": 0.0, "adv": 0.0}


def test_generator_loss_hand_computed():
    y = torch.zeros(1, 6, 4, 4)
    y[:, 0] = 0.8
    y[:, 1] = 0.5
    y_hat = torch.zeros_like(y)
    y_hat[:, 0] = 0.7
    y_hat[:, 1] = 0.25
    rep = generator_loss(y_hat, y, M("110000"), M("100000"), {1: torch.zeros(1, 1, 1, 1)}, LossWeights(100, 30, 0))
    assert rep.syn.item() == pytest.approx(0.25)
    assert rep.rec.item() == pytest.approx(0.1)
    assert rep.total.item() == pytest.approx(100 * 0.25 + 30 * 0.1)


def test_unavailable_channel_is_ignored():
    y = torch.rand(1, 6, 4, 4) * torch.tensor([1, 1, 0, 0, 0, 0.0])[:, None, None]
    y_hat = y.clone()
    y_hat[:, 4] = 1e3  # garbage in a missing modality
    y_hat.requires_grad_(True)
    rep = generator_loss(y_hat, y, M("110000"), M("100000"), {1: torch.ones(1, 1, 1, 1)})
    assert rep.total.item() == 0.0
    rep.total.backward()
    assert torch.all(y_hat.grad[:, 2:] == 0)


def test_discriminator_loss_examples():
    y = torch.rand(1, 6, 4, 4)
    # perfect critic: 0 on fakes, 1 on reals
    y_hat = torch.rand(1, 6, 4, 4)
    reals = {i: y[:, i : i + 1] for i in range(6)}

    def critic(i, img):
        return torch.ones(1, 1, 2, 2) if torch.equal(img, reals[i]) else torch.zeros(1, 1, 2, 2)

    assert discriminator_loss(y_hat, y, ModalityMask.full(), M("100000"), critic).total.item() == 0.0
    # constant 0.5 on one gated modality: 0.25 + 0.25
    rep = discriminator_loss(y_hat, y, M("110000"), M("100000"), const_bank(0.5))
    assert rep.total.item() == pytest.approx(0.5)
    assert rep.per_modality == [0.0, 0.5, 0.0, 0.0, 0.0, 0.0]


def test_pure_reconstruction_gives_no_discriminator_signal():
    bank = DiscriminatorBank(NetworkConfig(n_datasets=1, disc_channels=4))
    y = torch.rand(1, 6, 16, 16)
    m = M("111000")
    rep = discriminator_loss(torch.rand(1, 6, 16, 16), y, m, m, lambda i, t: bank[i](t))
    assert rep.total.item() == 0.0
    assert not rep.total.requires_grad
    assert all(p.grad is None for p in bank.parameters())


def test_condition_must_be_dominated():
    y = torch.rand(1, 6, 4, 4)
    with pytest.raises(ConstraintViolation):
        generator_loss(y, y, M("110000"), M("001000"), {})
    with pytest.raises(ConstraintViolation):
        discriminator_loss(y, y, M("110000"), M("001000"), const_bank(0))


def test_shape_errors():
    with pytest.raises(ShapeError):
        generator_loss(torch.rand(1, 5, 4, 4), torch.rand(1, 5, 4, 4), M("110000"), M("100000"), {})
    with pytest.raises(ShapeError):
        generator_loss(torch.rand(1, 6, 4, 4), torch.rand(1, 6, 4, 5), M("110000"), M("100000"), {})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_total_is_weighted_sum(seed, k):
    g = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    m_bits = [1] * k + [0] * (6 - k)
    rng.shuffle(m_bits)
    m = ModalityMask(tuple(m_bits))
    sc = sample_condition(m, rng)
    y, y_hat = torch.rand(2, 6, 6, 6, generator=g), torch.rand(2, 6, 6, 6, generator=g)
    d = {i: torch.rand(2, 1, 2, 2, generator=g) for i in range(6)}
    w = LossWeights(*rng.uniform(0, 100, 3))
    rep = generator_loss(y_hat, y, m, sc, d, w)
    assert rep.total.item() == pytest.approx(w.syn * rep.syn.item() + w.rec * rep.rec.item() + w.adv * rep.adv.item(), abs=1e-6, rel=1e-6)
    assert rep.syn.item() == pytest.approx(sum(rep.per_modality["syn"]), abs=1e-6)


def test_constant_residual_closed_form():
    # every pixel off by r: syn = #targets * r, rec = #sources * r
    r = 0.125
    y = torch.full((1, 6, 4, 4), 0.5)
    m, sc = M("111101"), M("100100")
    d = {i: torch.ones(1, 1, 1, 1) for i in range(6)}
    rep = generator_loss(y + r, y, m, sc, d)
    assert rep.syn.item() == pytest.approx(3 * r)
    assert rep.rec.item() == pytest.approx(2 * r)


def test_swapping_modalities_consistently_preserves_loss():
    g = torch.Generator().manual_seed(0)
    y, y_hat = torch.rand(1, 6, 8, 8, generator=g), torch.rand(1, 6, 8, 8, generator=g)
    bank = DiscriminatorBank(NetworkConfig(n_datasets=1, disc_stages=2, disc_channels=4))
    m, sc = M("111010"), M("100010")
    perm = [1, 0, 2, 3, 4, 5]  # swap T1 and T2
    m_p = ModalityMask(tuple(m[perm[i]] for i in range(6)))
    sc_p = ModalityMask(tuple(sc[perm[i]] for i in range(6)))
    d = {i: bank[i](y_hat[:, i : i + 1]) for i in range(6)}
    d_p = {i: bank[perm[i]](y_hat[:, perm[i] : perm[i] + 1]) for i in range(6)}
    a = generator_loss(y_hat, y, m, sc, d).total
    b = generator_loss(y_hat[:, perm], y[:, perm], m_p, sc_p, d_p).total
    assert a.item() == pytest.approx(b.item(), rel=1e-6)
    da = discriminator_loss(y_hat, y, m, sc, lambda i, t: bank[i](t)).total
    db = discriminator_loss(y_hat[:, perm], y[:, perm], m_p, sc_p, lambda i, t: bank[perm[i]](t)).total
    assert da.item() == pytest.approx(db.item(), rel=1e-6)


def test_condition_enumeration_count():
    for k in range(2, 7):
        m = ModalityMask(tuple([1] * k + [0] * (6 - k)))
        conds = valid_conditions(m)
        assert len(conds) == 2**k - 2 == len(set(conds))
        assert all(c.dominated_by(m) and 0 < c.count < k for c in conds)


def test_two_bit_mask_is_a_fair_coin():
    m = M("010001")
    rng = np.random.default_rng(0)
    draws = [sample_condition(m, rng) for _ in range(10_000)]
    freq = sum(d == M("010000") for d in draws) / 10_000
    assert set(draws) == set(valid_conditions(m))
    assert abs(freq - 0.5) <= 0.05


@pytest.mark.parametrize("bits", ["111000", "101101"])
def test_condition_sampler_uniform(bits):
    m = M(bits)
    rng = np.random.default_rng(1)
    conds = valid_conditions(m)
    counts = {c: 0 for c in conds}
    for _ in range(10_000):
        sc = sample_condition(m, rng)
        assert sc.dominated_by(m)
        counts[sc] += 1
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_untrainable_mask():
    with pytest.raises(UntrainableSampleError):
        sample_condition(M("000100"), np.random.default_rng(0))
