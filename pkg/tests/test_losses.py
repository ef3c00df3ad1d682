import math

import numpy as np
import pytest
import torch

from genimg.foundation import ExtractorMissing, ModeMismatch, RangeError, ShapeMismatch, UnknownCriterion
from genimg.losses import (
    PerceptualConfig,
    adversarial_loss,
    diffusion_training_loss,
    get_extractor,
    kl_loss,
    perceptual_loss,
    sample_slices,
    spectral_loss,
)
from genimg.networks import DiffusionModelUNet, VectorQuantizer
from genimg.schedulers import add_noise, build_schedule, training_target

from helpers import finite_difference_check


def test_spectral_loss_cases():
    g = torch.Generator().manual_seed(0)
    x, y = torch.rand(2, 1, 8, 8, generator=g), torch.rand(2, 1, 8, 8, generator=g)
    assert spectral_loss(x, x) == 0
    assert spectral_loss(x, y) == spectral_loss(y, x)
    delta = torch.zeros(1, 1, 8, 8)
    delta[0, 0, 3, 5] = 1.0
    assert math.isclose(spectral_loss(torch.zeros_like(delta), delta).item(), 1.0, rel_tol=1e-6)
    with pytest.raises(ShapeMismatch):
        spectral_loss(x, y[:, :, :4])


def test_adversarial_cases():
    ones, zeros = torch.ones(2, 1, 3, 3), torch.zeros(2, 1, 3, 3)
    assert adversarial_loss(ones, True, True, "least_squares") == 0
    assert adversarial_loss(zeros, True, True, "least_squares") == 1
    assert adversarial_loss(2 * ones, True, True, "hinge") == 0
    assert adversarial_loss(-2 * ones, False, True, "hinge") == 0
    assert adversarial_loss(2 * ones, True, False, "hinge") == -2
    assert math.isclose(adversarial_loss(zeros, True, True, "bce").item(), math.log(2), rel_tol=1e-6)
    assert adversarial_loss([ones, zeros], True, True, "least_squares") == 0.5
    with pytest.raises(UnknownCriterion):
        adversarial_loss(ones, True, True, "wasserstein")


def test_perceptual_identity_and_modes():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 1, 16, 16, generator=g)
    v = torch.rand(1, 1, 16, 16, 16, generator=g)
    assert perceptual_loss(x, x) == 0
    assert perceptual_loss(v, v, PerceptualConfig(mode="slice_2p5d"), rng=0) == 0
    assert perceptual_loss(x, torch.rand(2, 1, 16, 16, generator=g)) > 0
    with pytest.raises(ModeMismatch):
        perceptual_loss(v, v)
    with pytest.raises(ModeMismatch):
        perceptual_loss(x, x, PerceptualConfig(mode="slice_2p5d"))
    with pytest.raises(ExtractorMissing):
        perceptual_loss(x, x, PerceptualConfig(extractor_id="radimagenet"))
    with pytest.raises(RangeError):
        PerceptualConfig(slice_fraction=0.0)


def test_slice_count_quarter_of_sixteen():
    idx = sample_slices(16, 0.25, np.random.default_rng(0))
    assert len(idx) == 4 and len(set(idx)) == 4
    assert len(sample_slices(10, 0.25, np.random.default_rng(0))) == 3


def test_full_fraction_on_constant_volume_equals_2d_loss():
    g = torch.Generator().manual_seed(2)
    a, b = torch.rand(1, 1, 12, 12, generator=g), torch.rand(1, 1, 12, 12, generator=g)
    # every slice along every axis is the same image when all three axes carry it
    va = a[:, :, :, :, None].expand(1, 1, 12, 12, 12)
    vb = b[:, :, :, :, None].expand(1, 1, 12, 12, 12)
    cfg = PerceptualConfig(mode="slice_2p5d", slice_fraction=1.0)
    net = get_extractor()
    axis0 = torch.stack([perceptual_loss(va.select(4, i), vb.select(4, i)) for i in range(12)]).mean()
    assert torch.allclose(axis0, perceptual_loss(a, b))
    # a fully constant-per-slice volume: identical slices in every orientation
    ca, cb = torch.full((1, 1, 8, 8, 8), 0.3), torch.full((1, 1, 8, 8, 8), 0.7)
    full = perceptual_loss(ca, cb, cfg, rng=0, extractor=net)
    flat = perceptual_loss(ca[..., 0], cb[..., 0], extractor=net)
    assert torch.allclose(full, flat, rtol=1e-6)


def test_perceptual_invariant_to_slice_order():
    g = torch.Generator().manual_seed(3)
    a, b = torch.rand(1, 1, 8, 8, 8, generator=g), torch.rand(1, 1, 8, 8, 8, generator=g)
    cfg = PerceptualConfig(mode="slice_2p5d", slice_fraction=1.0)
    ref = perceptual_loss(a, b, cfg, rng=0)
    assert torch.allclose(ref, perceptual_loss(a, b, cfg, rng=5), rtol=1e-6)


def test_kl_cases():
    assert kl_loss(torch.zeros(3, 4), torch.zeros(3, 4)) == 0
    assert kl_loss(torch.ones(1, 1), torch.zeros(1, 1)) == 0.5
    g = torch.Generator().manual_seed(0)
    assert kl_loss(torch.randn(5, 7, generator=g), torch.randn(5, 7, generator=g)) >= 0


def test_v_target_scalar_case():
    sched = build_schedule("linear", 1, 0.75, 0.75)  # alpha_bar_1 = 0.25
    v = training_target(torch.ones(1), torch.zeros(1), torch.tensor([1]), sched)
    # computed in float32 from the float64 schedule
    assert math.isclose(v.item(), -math.sqrt(0.75), rel_tol=1e-6)


def test_diffusion_loss_perfect_prediction_is_zero():
    sched = build_schedule("scaled_linear", 50)
    x0 = torch.randn(4, 2, 4, 4, generator=torch.Generator().manual_seed(0))
    for pred in ("epsilon", "sample", "v_prediction"):
        s = build_schedule("scaled_linear", 50, prediction_type=pred)

        def oracle(x_t, t, context):
            # recover the noise from x_t and x0, then form the requested target
            ab = torch.tensor(np.concatenate([[1.0], s.alpha_bars]))[t].view(-1, 1, 1, 1)
            eps = ((x_t - ab.sqrt() * x0) / (1 - ab).sqrt()).float()
            return training_target(x0, eps, t, s)

        assert diffusion_training_loss(oracle, x0, s, rng=3).item() < 1e-10
    assert sched.T == 50


def test_condition_dropout_blocks_context():
    sched = build_schedule("scaled_linear", 20)
    seen = []

    def probe(x_t, t, context):
        seen.append(context.clone())
        return torch.zeros_like(x_t) + context.sum()

    ctx = torch.ones(6, 3, 5)
    diffusion_training_loss(probe, torch.zeros(6, 1, 2, 2), sched, rng=0, context=ctx, cond_dropout_prob=1.0)
    assert torch.count_nonzero(seen[-1]) == 0
    diffusion_training_loss(probe, torch.zeros(6, 1, 2, 2), sched, rng=0, context=ctx, cond_dropout_prob=0.0)
    assert torch.equal(seen[-1], ctx)
    with pytest.raises(RangeError):
        diffusion_training_loss(probe, torch.zeros(1, 1, 2, 2), sched, cond_dropout_prob=1.5)


def _leaf(shape, seed, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


GRAD_TOL = 1e-3


def test_gradient_spectral():
    x, y = _leaf((2, 1, 6, 6), 0), _leaf((2, 1, 6, 6), 1)
    assert finite_difference_check(lambda: spectral_loss(x, y), [x, y]) <= GRAD_TOL


@pytest.mark.parametrize("criterion", ["least_squares", "hinge", "bce"])
def test_gradient_adversarial(criterion):
    a, b = _leaf((2, 1, 5, 5), 2), _leaf((2, 1, 3, 3), 3)
    fn = lambda: adversarial_loss([a, b], True, True, criterion) + adversarial_loss(a, False, False, criterion)
    assert finite_difference_check(fn, [a, b]) <= GRAD_TOL


def test_gradient_perceptual():
    net = get_extractor()
    x, y = _leaf((1, 1, 12, 12), 4), _leaf((1, 1, 12, 12), 5)
    assert finite_difference_check(lambda: perceptual_loss(x, y, extractor=net), [x, y]) <= GRAD_TOL
    v, w = _leaf((1, 1, 8, 8, 8), 6), _leaf((1, 1, 8, 8, 8), 7)
    cfg = PerceptualConfig(mode="slice_2p5d")
    assert finite_difference_check(lambda: perceptual_loss(v, w, cfg, rng=0, extractor=net), [v, w]) <= GRAD_TOL


def test_gradient_kl():
    mu, lv = _leaf((3, 4, 2, 2), 8), _leaf((3, 4, 2, 2), 9, 0.5)
    assert finite_difference_check(lambda: kl_loss(mu, lv), [mu, lv]) <= GRAD_TOL


def test_gradient_vq():
    # stop-gradients make each parameter see one term only; check each branch on its own
    torch.manual_seed(0)
    commit = VectorQuantizer(8, 3, commitment_beta=0.25, ema_decay=0.99).double().eval()
    z = _leaf((2, 3, 4, 4), 10, 0.2)
    assert finite_difference_check(lambda: commit(z)[2], [z]) <= GRAD_TOL
    codebook = VectorQuantizer(8, 3, commitment_beta=0.0).double()
    zf = z.detach()
    assert finite_difference_check(lambda: codebook(zf)[2], [codebook.embedding], seed=1) <= GRAD_TOL


def test_gradient_diffusion():
    torch.manual_seed(0)
    net = DiffusionModelUNet(channels=(8, 16), attention_levels=(False, True), head_channels=(0, 8),
                             norm_groups=4, cross_attention_dim=4).double()
    sched = build_schedule("scaled_linear", 100)
    x0 = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    ctx = torch.randn(2, 3, 4, dtype=torch.float64)
    fn = lambda: diffusion_training_loss(net, x0, sched, rng=1, context=ctx, cond_dropout_prob=0.5)
    assert finite_difference_check(fn, list(net.parameters())) <= GRAD_TOL
