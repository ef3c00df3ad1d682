import pytest
import torch

from genimg.foundation import (
    ContextDimMismatch,
    DimMismatch,
    DivisibilityError,
    IncompatibleCheckpoint,
    InputTooSmall,
    NotOneHot,
    SequenceTooLong,
    ShapeMismatch,
    TokenOutOfVocab,
)
from genimg.networks import (
    VQVAE,
    AutoencoderKL,
    ControlNet,
    DecoderOnlyTransformer,
    DiffusionModelEncoder,
    DiffusionModelUNet,
    MultiScalePatchDiscriminator,
    PatchDiscriminator,
    SPADENorm,
    VectorQuantizer,
    combined_forward,
    load_network,
    save_network,
)
from genimg.networks.checkpoint import load_checkpoint, save_checkpoint

SMALL = dict(channels=(8, 16), attention_levels=(False, True), head_channels=(0, 8), norm_groups=4)


def _snapshot(net):
    return {k: v.clone() for k, v in net.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_unet_shapes_and_context():
    torch.manual_seed(0)
    net = DiffusionModelUNet(**SMALL).eval()
    before = _snapshot(net)
    assert net(torch.randn(1, 1, 32, 32), 1).shape == (1, 1, 32, 32)
    assert _same(before, net.state_dict())
    cond = DiffusionModelUNet(**SMALL, cross_attention_dim=1024).eval()
    assert cond(torch.randn(1, 1, 16, 16), 5, torch.randn(1, 77, 1024)).shape == (1, 1, 16, 16)
    with pytest.raises(ContextDimMismatch):
        cond(torch.randn(1, 1, 16, 16), 5, torch.randn(1, 77, 512))
    net3 = DiffusionModelUNet(**SMALL, spatial_rank=3).eval()
    assert net3(torch.randn(1, 1, 16, 16, 16), 3).shape == (1, 1, 16, 16, 16)
    with pytest.raises(ShapeMismatch):
        net(torch.randn(1, 2, 16, 16), 1)


def test_diffusion_encoder():
    torch.manual_seed(0)
    enc = DiffusionModelEncoder(latent_dim=6, **SMALL).eval()
    x = torch.randn(2, 1, 32, 32)
    out = enc(x, 10)
    assert out.shape == (2, 6)
    assert torch.equal(out, enc(x, 10))
    assert not torch.equal(out, enc(x, 900))


def test_autoencoder_factor_eight():
    torch.manual_seed(0)
    ae = AutoencoderKL(channels=(4, 4, 4, 4), latent_channels=4, norm_groups=2).eval()
    with torch.no_grad():
        mu, log_var = ae.encode(torch.zeros(1, 1, 512, 512))
    assert mu.shape == (1, 4, 64, 64) and log_var.shape == mu.shape
    small = AutoencoderKL(channels=(8, 8, 8), norm_groups=4).eval()
    with torch.no_grad():
        assert small.decode(small.encode(torch.zeros(1, 1, 64, 64))[0]).shape == (1, 1, 64, 64)
    with pytest.raises(DivisibilityError):
        small.encode(torch.zeros(1, 1, 30, 30))


def _codebook(values):
    vq = VectorQuantizer(len(values), 1).eval()
    with torch.no_grad():
        vq.embedding.copy_(torch.tensor(values, dtype=torch.float32)[:, None])
    return vq


def test_vq_hand_cases():
    vq = _codebook([0.0, 1.0])
    z_q, idx, _ = vq(torch.tensor([[[[0.4]]]]))
    assert idx.item() == 0 and z_q.item() == 0.0
    _, idx, _ = vq(torch.tensor([[[[0.5]]]]))
    assert idx.item() == 0
    _, _, loss = vq(torch.tensor([[[[1.0]]]]))
    assert loss.item() == 0.0
    with pytest.raises(DimMismatch):
        vq(torch.zeros(1, 2, 1, 1))


def test_vq_outputs_are_codebook_members():
    torch.manual_seed(1)
    vq = VectorQuantizer(16, 3).eval()
    z_q, idx, _ = vq(torch.randn(2, 3, 5, 5))
    flat = z_q.permute(0, 2, 3, 1).reshape(-1, 3)
    assert torch.equal(flat, vq.embedding.detach()[idx.reshape(-1)])
    net = VQVAE(channels=(8, 8), norm_groups=4, num_embeddings=16).eval()
    idx = net.index_quantize(torch.rand(1, 1, 8, 8))
    assert idx.shape == (1, 4, 4) and idx.max() < 16


def test_zero_init_controlnet_is_identity():
    torch.manual_seed(0)
    unet = DiffusionModelUNet(**SMALL, cross_attention_dim=4).eval()
    ctrl = ControlNet.from_unet(unet, conditioning_embedding_channels=(4, 8)).eval()
    x, c, ctx = torch.randn(2, 1, 8, 8), torch.rand(2, 1, 16, 16), torch.randn(2, 3, 4)
    with torch.no_grad():
        base = unet(x, 7, ctx)
        out = combined_forward(unet, ctrl, x, 7, c, ctx)
        assert out.shape == x.shape
        assert torch.equal(out, base)
        # nudging one adapter projection moves only the combined path
        ctrl.mid_zero_conv.weight[0, 0].fill_(0.5)
        assert not torch.equal(combined_forward(unet, ctrl, x, 7, c, ctx), base)
        assert torch.equal(unet(x, 7, ctx), base)
    with pytest.raises(ShapeMismatch):
        combined_forward(unet, ctrl, x, 7, torch.rand(2, 1, 8, 8), ctx)


def test_spade():
    torch.manual_seed(0)
    x = torch.randn(1, 8, 16, 16)
    seg = torch.zeros(1, 3, 16, 16)
    seg[:, 0, :8] = 1
    seg[:, 1, 8:] = 1
    zero = SPADENorm(8, 3, zero_init=True)
    assert torch.equal(zero(x, seg), torch.nn.functional.instance_norm(x))
    spade = SPADENorm(8, 3)
    other = torch.zeros_like(seg)
    other[:, 2] = 1
    assert spade(x, seg).shape == (1, 8, 16, 16)
    assert not torch.equal(spade(x, seg), spade(x, other))
    with pytest.raises(NotOneHot):
        spade(x, seg * 0.5)


def test_patch_discriminators():
    torch.manual_seed(0)
    d = PatchDiscriminator(channels=64, num_layers=3, norm="none").eval()
    out = d(torch.randn(1, 1, 64, 64))
    assert out.shape == (1, 1, 6, 6) == (1, 1, d.output_size(64), d.output_size(64))
    small = PatchDiscriminator(channels=8, num_layers=3, norm="none").eval()
    const = small(torch.full((1, 1, 256, 256), 0.3))
    interior = const[0, 0, 10:-10, 10:-10]  # receptive field 70 px, stride 8
    assert torch.allclose(interior, interior[0, 0].expand_as(interior), atol=1e-6)
    ms = MultiScalePatchDiscriminator(2, channels=8, num_layers=2)
    maps = ms(torch.randn(1, 1, 32, 32))
    assert len(maps) == 2 and maps[1].shape[-1] < maps[0].shape[-1]
    with pytest.raises(InputTooSmall):
        d(torch.randn(1, 1, 4, 4))


def test_transformer_contracts():
    torch.manual_seed(0)
    big = DecoderOnlyTransformer(513, 4096, dim=64, depth=1, heads=8).eval()
    assert big(torch.randint(0, 513, (1, 10))).shape == (1, 10, 513)
    net = DecoderOnlyTransformer(17, 32, dim=16, depth=2, heads=4).eval()
    tokens = torch.randint(0, 17, (1, 20))
    with torch.no_grad():
        ref = net(tokens)
        for j in (0, 7, 19):
            changed = tokens.clone()
            changed[0, j] = (changed[0, j] + 1) % 17
            out = net(changed)
            assert torch.equal(out[:, :j], ref[:, :j])
            assert not torch.equal(out[:, j:], ref[:, j:])
    with pytest.raises(SequenceTooLong):
        net(torch.zeros(1, 33, dtype=torch.long))
    with pytest.raises(TokenOutOfVocab):
        net(torch.full((1, 3), 17))


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    nets = {"unet": DiffusionModelUNet(**SMALL), "vq": VQVAE(channels=(8, 8), norm_groups=4),
            "kl": AutoencoderKL(channels=(8, 8), norm_groups=4), "tr": DecoderOnlyTransformer(9, 16, 16, 1, 2),
            "d": PatchDiscriminator(channels=8, num_layers=2)}
    save_checkpoint(tmp_path / "c.pt", nets, {"seed": 3})
    loaded, meta = load_checkpoint(tmp_path / "c.pt")
    assert meta == {"seed": 3}
    for k, net in nets.items():
        assert _same(net.state_dict(), loaded[k].state_dict())
    unet = nets["unet"].eval()
    save_network(tmp_path / "u.pt", unet)
    x = torch.randn(1, 1, 8, 8)
    with torch.no_grad():
        assert torch.equal(load_network(tmp_path / "u.pt")(x, 4), unet(x, 4))
    payload = torch.load(tmp_path / "u.pt", weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(IncompatibleCheckpoint):
        load_network(tmp_path / "bad.pt")


def test_vq_straight_through_gradient():
    vq = VectorQuantizer(4, 2).eval()
    z = torch.randn(1, 2, 3, 3, requires_grad=True)
    z_q, _, _ = vq(z)
    w = torch.randn_like(z_q)
    (z_q * w).sum().backward()
    assert torch.equal(z.grad, w)
