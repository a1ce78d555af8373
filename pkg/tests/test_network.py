import itertools

import numpy as np
import pytest
import torch

from pmmsynth.datamodel import ModalityMask
from pmmsynth.errors import ConditioningError, ConfigError, InvalidTaskError, ResumeError, ShapeError
from pmmsynth.network import (
    DatasetEncoder,
    DiscriminatorBank,
    FusionLevel,
    Generator,
    NetworkConfig,
    PFMBlock,
    discriminate,
    encode_dataset_id,
    forward_generator,
    fuse_features,
    load_checkpoint,
    pfm_modulate,
    save_checkpoint,
    sinusoidal_code,
)

from conftest import make_registry

SMALL = dict(depth=2, base_channels=4, id_dim=16, pfm_hidden=8, disc_channels=4)


def M(bits):
    return ModalityMask.from_string(bits)


def small_gen(**kw):
    args = {"n_datasets": 3, **SMALL, **kw}
    return Generator(NetworkConfig(**args))


def masked_input(src: ModalityMask, seed=0, batch=2, size=16):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, 6, size, size, generator=g)
    return x * torch.tensor(src.bits, dtype=torch.float32)[:, None, None]


def test_code_of_zero():
    code = sinusoidal_code(0, 64)[0]
    assert torch.all(code[0::2] == 0)
    assert torch.all(code[1::2] == 1)


def test_codes_of_one_and_two_differ_in_sin_slots():
    c1, c2 = sinusoidal_code([1, 2], 64)
    # low-frequency sin slots: w_j n < pi/2 so sin is strictly increasing in n
    w = np.exp(-np.log(10000.0) * 2 * np.arange(32) / 64)
    low = np.where(2 * w < np.pi / 2)[0]
    assert len(low) > 20
    assert torch.all(c1[0::2][low] != c2[0::2][low])
    np.testing.assert_allclose(c1[0::2].numpy(), np.sin(w), rtol=1e-6)


def test_embedding_deterministic_and_distinct():
    torch.manual_seed(0)
    enc = DatasetEncoder(4, 64)
    a = encode_dataset_id(1, 64, enc)
    assert torch.equal(a, encode_dataset_id(1, 64, enc))
    embs = [encode_dataset_id(n, 64, enc) for n in range(4)]
    for i, j in itertools.combinations(range(4), 2):
        assert not torch.allclose(embs[i], embs[j])


def test_embedding_refuses_out_of_range():
    enc = DatasetEncoder(2, 16)
    with pytest.raises(ConditioningError):
        enc(2)
    with pytest.raises(ConditioningError):
        enc(-1)


def test_modulation_identity_and_probe():
    f = torch.randn(3, 4, 4)
    assert torch.equal(pfm_modulate(f, torch.zeros(3), torch.zeros(3)), f)
    out = pfm_modulate(torch.full((1, 1, 1), 2.0), torch.tensor([0.5]), torch.tensor([0.1]))
    assert out.item() == pytest.approx(3.1)


def test_modulation_matches_loop_oracle():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(2, 5, 3, 4))
    gamma = rng.normal(size=(2, 5))
    beta = rng.normal(size=(2, 5))
    expected = np.empty_like(f)
    for b in range(2):
        for c in range(5):
            for y in range(3):
                for x in range(4):
                    expected[b, c, y, x] = f[b, c, y, x] * (gamma[b, c] + 1) + beta[b, c]
    got = pfm_modulate(torch.tensor(f), torch.tensor(gamma), torch.tensor(beta)).numpy()
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_modulation_channel_mismatch():
    with pytest.raises(ShapeError):
        pfm_modulate(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4), torch.zeros(1, 4))


def test_pfm_block_shapes_and_zero_init():
    blk = PFMBlock(channels=6, id_dim=16, hidden=8)
    assert blk.mlp[-1].out_features == 12
    gamma, beta = blk.params(torch.randn(2, 16))
    assert gamma.shape == beta.shape == (2, 6)
    assert torch.all(gamma == 0) and torch.all(beta == 0)


def test_forward_shape_and_errors():
    g = small_gen()
    src = M("101000")
    for size in (8, 16, 24):
        x = masked_input(src, size=size)
        assert g(x, src, 1).shape == (2, 6, size, size)
    assert forward_generator(x[0], src, 0, g).shape == (6, 24, 24)
    with pytest.raises(InvalidTaskError):
        g(x, M("000000"), 0)
    with pytest.raises(ConditioningError):
        g(x, src, 3)


def test_zero_init_pfm_makes_identifier_inert():
    g = small_gen().eval()
    x = masked_input(M("110000"))
    assert torch.equal(g(x, M("110000"), 0), g(x, M("110000"), 1))


def test_pfm_disabled_has_no_pfm_parameters():
    g = small_gen(pfm_enabled=False)
    assert not any("pfm" in k or k.startswith("embed") for k in g.state_dict())
    assert any("pfm" in k for k in small_gen().state_dict())


def test_pfm_disabled_matches_fresh_full_model():
    full, plain = small_gen().eval(), small_gen(pfm_enabled=False).eval()
    src = M("011100")
    x = masked_input(src, seed=3)
    for n in range(3):
        assert (full(x, src, n) - plain(x, src, 0)).abs().max() < 1e-6


def test_adding_unused_stream_leaves_existing_tasks_unchanged():
    without = small_gen(coverage=(1, 1, 1, 1, 0, 0)).eval()
    with_dwi = small_gen(coverage=(1, 1, 1, 1, 1, 0)).eval()
    src = M("110000")
    x = masked_input(src)
    a, b = without(x, src, 2), with_dwi(x, src, 2)
    torch.testing.assert_close(a[:, :4], b[:, :4], rtol=0, atol=0)


def test_zeroing_unused_encoder_stream_is_harmless():
    g = small_gen().eval()
    src = M("100100")
    x = masked_input(src)
    before = g(x, src, 0)
    with torch.no_grad():
        for p in g.encoders["DWI"].parameters():
            p.zero_()
    assert torch.equal(before, g(x, src, 0))


def test_forward_rejects_sources_outside_coverage():
    g = small_gen(coverage=(1, 1, 0, 0, 0, 0))
    with pytest.raises(InvalidTaskError):
        g(masked_input(M("001000")), M("001000"), 0)


def test_output_channels_outside_coverage_are_zero():
    g = small_gen(coverage=(1, 1, 1, 0, 0, 0))
    y = g(masked_input(M("100000")), M("100000"), 0)
    assert torch.all(y[:, 3:] == 0)
    assert torch.all(y[:, :3] > 0)


def _streams(n, seed=0, c=4):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(2, 2 * c, 5, 5, generator=g) for _ in range(n)]


def test_fusion_single_source_is_transform():
    fl = FusionLevel(4)
    (z,) = _streams(1)
    torch.testing.assert_close(fuse_features({2: z}, M("001000"), fl), fl.transform(z))


def test_fusion_permutation_invariant():
    fl = FusionLevel(4)
    zs = _streams(3, seed=1)
    ref = fl(zs)
    for perm in itertools.permutations(range(3)):
        torch.testing.assert_close(fl([zs[i] for i in perm]), ref, rtol=0, atol=1e-6)


def test_fusion_duplicate_maps_reduce_to_single():
    fl = FusionLevel(4)
    (z,) = _streams(1, seed=2)
    torch.testing.assert_close(fl([z, z]), fl([z]), rtol=0, atol=1e-6)


def test_fusion_rejects_mismatched_streams():
    fl = FusionLevel(4)
    with pytest.raises(InvalidTaskError):
        fuse_features({0: _streams(1)[0]}, M("010000"), fl)
    with pytest.raises(InvalidTaskError):
        fuse_features({}, M("000000"), fl)


def test_discriminator_map_size_and_determinism():
    bank = DiscriminatorBank(NetworkConfig(n_datasets=1, disc_stages=3, disc_channels=4)).eval()
    img = torch.rand(32, 32)
    out = discriminate("T2", img, bank)
    assert out.shape == (4, 4)
    assert torch.equal(out, discriminate("T2", img, bank))


def test_discriminator_outside_coverage():
    bank = DiscriminatorBank(NetworkConfig(n_datasets=1, coverage=(1, 1, 0, 0, 0, 0)))
    with pytest.raises(ConfigError):
        discriminate("ADC", torch.rand(16, 16), bank)


def test_discriminator_gradients_stay_in_modality():
    bank = DiscriminatorBank(NetworkConfig(n_datasets=1, disc_channels=4))
    loss = (discriminate("T1C", torch.rand(1, 1, 16, 16), bank) - 1).pow(2).mean()
    loss.backward()
    for name, net in bank.nets.items():
        grads = [p.grad for p in net.parameters()]
        if name == "T1C":
            assert all(g is not None and g.abs().sum() > 0 for g in grads)
        else:
            assert all(g is None or g.abs().sum() == 0 for g in grads)


def test_checkpoint_roundtrip(tmp_path):
    reg = make_registry("111100", "110011")
    cfg = NetworkConfig.for_registry(reg, **SMALL, init_seed=4)
    g, bank = Generator(cfg), DiscriminatorBank(cfg)
    with torch.no_grad():
        for p in g.parameters():
            p.add_(0.01)
    save_checkpoint(tmp_path / "c.pt", g, bank, reg, epoch=3)
    g2, bank2, reg2, payload = load_checkpoint(tmp_path / "c.pt", expected_registry_hash=reg.digest())
    assert reg2 == reg and payload["epoch"] == 3 and payload["dataset_ids"] == {"ds0": 0, "ds1": 1}
    x = masked_input(M("110000"))
    assert torch.equal(g.eval()(x, M("110000"), 1), g2(x, M("110000"), 1))
    with pytest.raises(ResumeError):
        load_checkpoint(tmp_path / "c.pt", expected_registry_hash=make_registry("111111").digest())
