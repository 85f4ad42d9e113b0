import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fvp.encoders import EncoderConfig, PointEncoder, batched_fps, count_parameters, encode, init_encoder


def _history(rng, k=1, n=32):
    return [rng.uniform(-1, 1, size=(n, 3)).astype(np.float32) for _ in range(k)]


@pytest.mark.parametrize("kind", ["mlp_pool", "hierarchical"])
@pytest.mark.parametrize("z_mode", ["split", "global"])
def test_shape_and_determinism(rng, kind, z_mode):
    enc = init_encoder(EncoderConfig(encoder_kind=kind, z_mode=z_mode, history_frames=2), 0)
    hist = _history(rng, k=2)
    z = encode(enc, hist)
    assert z.shape == (32, 64)
    assert torch.equal(z, encode(enc, hist))


def test_split_layout_leads_with_raw_coordinates(rng):
    enc = init_encoder(EncoderConfig(), 0)
    hist = _history(rng)
    z = encode(enc, hist)
    np.testing.assert_array_equal(z[:, :3].detach().numpy(), hist[-1])
    pooled = z[:, enc.config.local_channels:]
    assert torch.equal(pooled, pooled[:1].expand_as(pooled))


def test_documented_parameter_count():
    # trunk 3*64+64 + 64*128+128, local 131*29+29, pooled 128*32+32
    assert count_parameters(init_encoder(EncoderConfig(), 0)) == 256 + 8320 + 3828 + 4128


def test_parameter_count_depends_on_config_only():
    cfg = EncoderConfig(history_frames=3, use_actions=True)
    assert count_parameters(init_encoder(cfg, 0)) == count_parameters(init_encoder(cfg, 9))
    # pooled proj grows by 2 * 128 frames and the 16-wide action embedding
    base = count_parameters(init_encoder(EncoderConfig(), 0))
    assert count_parameters(init_encoder(cfg, 0)) - base == 2 * 128 * 32 + 16 * 32 + (9 * 16 + 16)


def test_seeding():
    a, b, c = (init_encoder(EncoderConfig(), s) for s in (1, 1, 2))
    for pa, pb, pc in zip(a.parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_seeding_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    init_encoder(EncoderConfig(), 5)
    assert torch.equal(torch.rand(1), expected)


class TestErrors:
    def test_mismatched_frames(self, rng):
        enc = init_encoder(EncoderConfig(history_frames=2), 0)
        with pytest.raises(ValueError, match="disagree"):
            encode(enc, [_history(rng, n=10)[0], _history(rng, n=11)[0]])

    def test_wrong_history_length(self, rng):
        with pytest.raises(ValueError, match="history frames"):
            encode(init_encoder(EncoderConfig(history_frames=2), 0), _history(rng, k=3))

    def test_action_length_mismatch(self, rng):
        enc = init_encoder(EncoderConfig(history_frames=2, use_actions=True), 0)
        with pytest.raises(ValueError):
            encode(enc, _history(rng, k=2), [np.zeros(3)])

    def test_missing_actions(self, rng):
        enc = init_encoder(EncoderConfig(use_actions=True), 0)
        with pytest.raises(ValueError, match="use_actions"):
            encode(enc, _history(rng))

    @pytest.mark.parametrize("bad", [{"channels": 0}, {"history_frames": 0}, {"channels": 4},
                                     {"use_actions": True, "action_dim": 0}, {"bogus": 1}])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            EncoderConfig(**bad)


def test_actions_change_pooled_context(rng):
    enc = init_encoder(EncoderConfig(use_actions=True), 0)
    hist = _history(rng)
    a = encode(enc, hist, [np.array([0.1, 0.0, 0.0])])
    b = encode(enc, hist, [np.array([0.0, 0.1, 0.0])])
    lc = enc.config.local_channels
    assert torch.equal(a[:, :lc], b[:, :lc])
    assert not torch.equal(a[:, lc:], b[:, lc:])


@pytest.mark.parametrize("kind", ["mlp_pool", "hierarchical"])
def test_permutation(kind):
    enc = init_encoder(EncoderConfig(encoder_kind=kind, history_frames=2), 3)
    g = torch.Generator().manual_seed(0)
    hist = torch.rand(1, 2, 48, 3, generator=g) * 2 - 1
    z = enc(hist)
    pooled = enc.pooled(hist)
    for _ in range(50):
        perm = torch.randperm(48, generator=g)
        hp = hist[:, :, perm]
        assert (enc.pooled(hp) - pooled).abs().max() <= 1e-5
        assert (enc(hp) - z[:, perm]).abs().max() <= 1e-5


def test_batched_fps_is_order_independent():
    g = torch.Generator().manual_seed(1)
    pts = torch.rand(2, 40, 3, generator=g)
    perm = torch.randperm(40, generator=g)
    a = pts[torch.arange(2)[:, None], batched_fps(pts, 8)]
    b = pts[:, perm][torch.arange(2)[:, None], batched_fps(pts[:, perm], 8)]
    assert torch.equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["mlp_pool", "hierarchical"]))
def test_finite_on_box(seed, kind):
    g = np.random.default_rng(seed)
    enc = init_encoder(EncoderConfig(encoder_kind=kind), 0)
    z = encode(enc, [g.uniform(-10, 10, size=(int(g.integers(1, 40)), 3))])
    assert torch.isfinite(z).all()


def test_module_is_plain_torch():
    assert isinstance(init_encoder(EncoderConfig(), 0), PointEncoder)
