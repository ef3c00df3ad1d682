"""Scikit-learn style estimators wrapping the networks and training loops.

Each estimator follows the ``fit`` / ``transform`` / ``predict`` / ``sample``
conventions, exposes ``get_params`` through :class:`~sklearn.base.BaseEstimator`
and serialises to a single checkpoint file with ``save`` / ``load``.
"""
from __future__ import annotations

import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .foundation import (
    ConfigError,
    IncompatibleCheckpoint,
    RandomSource,
    RangeError,
    ShapeMismatch,
    check_images,
    to_numpy,
)
from .inferers import (
    GuidanceConfig,
    TileSpec,
    UpscalerConditioning,
    augment_low_res,
    compute_scale_factor,
    controlnet_model_fn,
    default_aug_schedule,
    sample,
    transformer_log_likelihood,
    upscale,
)
from .losses import (
    PerceptualConfig,
    adversarial_loss,
    diffusion_training_loss,
    kl_loss,
    perceptual_loss,
)
from .metrics import ms_ssim
from .networks import (
    AutoencoderConfig,
    AutoencoderKL,
    ControlNet,
    DecoderOnlyTransformer,
    DiffusionModelUNet,
    PatchDiscriminator,
    UNetConfig,
    VQVAE,
)
from .networks.checkpoint import load_checkpoint, save_checkpoint
from .ordering import apply as apply_ordering, build_ordering, invert
from .schedulers import NoiseSchedule, add_noise, build_schedule, training_target
from .text import HashTextEmbedder

log = logging.getLogger(__name__)


def _check_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _optimizer(kind: str, params, lr: float, weight_decay: float = 0.0):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r}")


def _batch_indices(n: int, batch_size: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(0, n, (min(batch_size, n),), generator=gen)


class _EMA:
    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = copy.deepcopy(model).eval().requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module):
        for s, p in zip(self.shadow.parameters(), model.parameters()):
            s.mul_(self.decay).add_(p.detach(), alpha=1 - self.decay)


def _serialisable_params(est: BaseEstimator) -> dict:
    out = {}
    for k, v in est.get_params(deep=False).items():
        if isinstance(v, BaseEstimator):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


class CompressionModel(BaseEstimator, TransformerMixin):
    """KL autoencoder (``kind='kl'``) or VQ-VAE (``kind='vq'``) with optional patch-adversarial training.

    Objective: L1 reconstruction + perceptual + KL (or VQ) + adversarial terms.
    ``transform`` returns the latent used by downstream generative models
    (posterior mean, or quantised latent), already multiplied by
    ``scale_factor_``.
    """

    def __init__(self, kind="kl", spatial_rank=2, in_channels=1, channels=(32, 64, 64), latent_channels=4,
                 num_res_blocks=1, norm_groups=8, num_embeddings=64, commitment_beta=0.25, ema_decay=None,
                 kl_weight=1e-8, perceptual_weight=0.002, adversarial_weight=0.005, adversarial_start=0,
                 disc_channels=16, disc_layers=2, optimizer="adam", lr=1e-3, disc_lr=2e-3, n_steps=1000, batch_size=32, seed=0):
        self.kind = kind
        self.spatial_rank = spatial_rank
        self.in_channels = in_channels
        self.channels = channels
        self.latent_channels = latent_channels
        self.num_res_blocks = num_res_blocks
        self.norm_groups = norm_groups
        self.num_embeddings = num_embeddings
        self.commitment_beta = commitment_beta
        self.ema_decay = ema_decay
        self.kl_weight = kl_weight
        self.perceptual_weight = perceptual_weight
        self.adversarial_weight = adversarial_weight
        self.adversarial_start = adversarial_start
        self.disc_channels = disc_channels
        self.disc_layers = disc_layers
        self.optimizer = optimizer
        self.lr = lr
        self.disc_lr = disc_lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.seed = seed

    def _build(self):
        if self.kind not in ("kl", "vq"):
            raise ConfigError(f"kind must be 'kl' or 'vq', got {self.kind!r}")
        cfg = AutoencoderConfig(self.spatial_rank, self.in_channels, self.in_channels, tuple(self.channels),
                                self.latent_channels, self.num_res_blocks, self.norm_groups, self.num_embeddings,
                                self.commitment_beta, self.ema_decay)
        return AutoencoderKL(cfg) if self.kind == "kl" else VQVAE(cfg)

    @property
    def compression_factor(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def _perceptual(self, x, y, gen_np):
        if self.perceptual_weight == 0:
            return x.new_zeros(())
        mode = "full_2d" if self.spatial_rank == 2 else "slice_2p5d"
        seed = int(gen_np.integers(2**31))
        return perceptual_loss(x, y, PerceptualConfig(mode=mode), rng=seed)

    def fit(self, X, y=None):
        x = check_images(X, spatial_dims=self.spatial_rank)
        torch.manual_seed(self.seed)
        self.model_ = self._build()
        gen = RandomSource(self.seed, 1).torch()
        gen_np = RandomSource(self.seed, 2).numpy()
        opt = _optimizer(self.optimizer, [p for p in self.model_.parameters() if p.requires_grad], self.lr)
        disc = None
        if self.adversarial_weight > 0:
            disc = PatchDiscriminator(self.spatial_rank, self.in_channels, self.disc_channels, self.disc_layers,
                                      norm="instance")
            d_opt = _optimizer(self.optimizer, disc.parameters(), self.disc_lr)
        self.loss_history_: List[Tuple[int, str, float]] = []
        self.model_.train()
        for step in range(self.n_steps):
            batch = x[_batch_indices(len(x), self.batch_size, gen)]
            if self.kind == "kl":
                recon, mu, log_var = self.model_(batch, gen)
                reg = self.kl_weight * kl_loss(mu, log_var)
            else:
                recon, vq = self.model_(batch)
                reg = vq
            rec = F.l1_loss(recon, batch)
            loss = rec + reg + self.perceptual_weight * self._perceptual(recon, batch, gen_np)
            use_adv = disc is not None and step >= self.adversarial_start
            if use_adv:
                loss = loss + self.adversarial_weight * adversarial_loss(disc(recon), True, False)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if use_adv:
                d_loss = 0.5 * (adversarial_loss(disc(recon.detach()), False, True)
                                + adversarial_loss(disc(batch), True, True))
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
                self.loss_history_.append((step, "discriminator", d_loss.item()))
            self.loss_history_.append((step, "reconstruction", rec.item()))
            self.loss_history_.append((step, "total", loss.item()))
        self.model_.eval()
        self.scale_factor_ = compute_scale_factor(self._raw_latent, x[: min(len(x), 256)])
        return self

    @torch.no_grad()
    def _raw_latent(self, x):
        return self.model_.encode_latent(x)

    @torch.no_grad()
    def transform(self, X):
        _check_fitted(self, "model_")
        x = check_images(X, spatial_dims=self.spatial_rank)
        return self._raw_latent(x) * self.scale_factor_

    @torch.no_grad()
    def inverse_transform(self, Z):
        _check_fitted(self, "model_")
        z = torch.as_tensor(to_numpy(Z), dtype=torch.float32) / self.scale_factor_
        if self.kind == "vq":
            z = self.model_.quantize(z)[0]
        return self.model_.decode(z)

    def decode(self, z_scaled):
        """Decode a scaled latent without re-quantising."""
        with torch.no_grad():
            return self.model_.decode(z_scaled / self.scale_factor_)

    @torch.no_grad()
    def reconstruct(self, X):
        _check_fitted(self, "model_")
        x = check_images(X, spatial_dims=self.spatial_rank)
        if self.kind == "kl":
            return self.model_.decode(self.model_.encode(x)[0])
        return self.model_(x)[0]

    @torch.no_grad()
    def index_quantize(self, X):
        if self.kind != "vq":
            raise ConfigError("token indices need a VQ compression model")
        return self.model_.index_quantize(check_images(X, spatial_dims=self.spatial_rank))

    def score(self, X, y=None):
        """Mean reconstruction MS-SSIM on [0, 1] images."""
        x = check_images(X, spatial_dims=self.spatial_rank)
        return ms_ssim(self.reconstruct(x).clamp(0, 1), x)

    # persistence
    def _networks(self, prefix=""):
        return {prefix + "autoencoder": self.model_}

    def _metadata(self):
        return {"estimator": "compression", "params": _serialisable_params(self),
                "scale_factor": self.scale_factor_}

    def save(self, path, metadata: Optional[dict] = None):
        _check_fitted(self, "model_")
        save_checkpoint(path, self._networks(), {**self._metadata(), **(metadata or {})})

    @classmethod
    def _from_parts(cls, networks, meta, prefix=""):
        est = cls(**meta["params"])
        est.model_ = networks[prefix + "autoencoder"]
        est.scale_factor_ = float(meta["scale_factor"])
        return est

    @classmethod
    def load(cls, path):
        networks, meta = load_checkpoint(path)
        if meta.get("estimator") != "compression":
            raise IncompatibleCheckpoint("checkpoint does not hold a compression model")
        return cls._from_parts(networks, meta)


def _encode_all(compression: Optional[CompressionModel], x: torch.Tensor, chunk: int = 128) -> torch.Tensor:
    if compression is None:
        return x
    return torch.cat([compression.transform(x[i:i + chunk]) for i in range(0, len(x), chunk)])


class LatentDiffusion(BaseEstimator):
    """Diffusion model in the latent space of a fitted compression model.

    With ``compression=None`` the diffusion runs in pixel space. Captions passed
    as ``y`` to ``fit`` are embedded with a frozen hash embedder and injected by
    cross-attention; each caption is replaced by the null (all-zeros) context
    with probability ``cond_dropout_prob``.
    """

    def __init__(self, compression=None, channels=(32, 64), attention_levels=(False, True),
                 head_channels=(0, 32), num_res_blocks=1, norm_groups=8, cross_attention_dim=None,
                 context_tokens=8, profile="scaled_linear", T=1000, beta_start=0.0015, beta_end=0.0205,
                 prediction_type="v_prediction", cond_dropout_prob=0.1, optimizer="adamw", lr=1e-3, weight_decay=0.0,
                 n_steps=2000, batch_size=32, ema_decay=None, seed=0):
        self.compression = compression
        self.channels = channels
        self.attention_levels = attention_levels
        self.head_channels = head_channels
        self.num_res_blocks = num_res_blocks
        self.norm_groups = norm_groups
        self.cross_attention_dim = cross_attention_dim
        self.context_tokens = context_tokens
        self.profile = profile
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.prediction_type = prediction_type
        self.cond_dropout_prob = cond_dropout_prob
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.ema_decay = ema_decay
        self.seed = seed

    @property
    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.profile, self.T, self.beta_start, self.beta_end, self.prediction_type)

    @property
    def text_embedder(self) -> Optional[HashTextEmbedder]:
        if not self.cross_attention_dim:
            return None
        return HashTextEmbedder(self.cross_attention_dim, self.context_tokens)

    def _unet_config(self, in_channels, out_channels, num_class_embeds=None) -> UNetConfig:
        return UNetConfig(self.compression.spatial_rank if self.compression else 2, in_channels, out_channels,
                          tuple(self.channels), tuple(self.attention_levels), tuple(self.head_channels),
                          self.num_res_blocks, self.norm_groups, self.cross_attention_dim, num_class_embeds)

    def _init_unet(self, latents: torch.Tensor, extra_in: int = 0, num_class_embeds=None):
        c = latents.shape[1]
        cfg = self._unet_config(c + extra_in, c, num_class_embeds)
        if self.compression is None:
            cfg.spatial_rank = latents.ndim - 2
        torch.manual_seed(self.seed)
        return DiffusionModelUNet(cfg)

    def _train(self, unet, latents, contexts=None, step_kwargs=None):
        schedule = self.schedule
        gen = RandomSource(self.seed, 1).torch()
        opt = _optimizer(self.optimizer, unet.parameters(), self.lr, self.weight_decay)
        ema = _EMA(unet, self.ema_decay) if self.ema_decay else None
        history = []
        unet.train()
        for step in range(self.n_steps):
            idx = _batch_indices(len(latents), self.batch_size, gen)
            ctx = contexts[idx] if contexts is not None else None
            kwargs = step_kwargs(idx, gen) if step_kwargs else {}
            loss = diffusion_training_loss(unet, latents[idx], schedule, gen, ctx, self.cond_dropout_prob, **kwargs)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema:
                ema.update(unet)
            history.append((step, "diffusion", loss.item()))
        unet.eval()
        final = ema.shadow if ema else unet
        return final, history

    def fit(self, X, y=None):
        x = check_images(X)
        latents = _encode_all(self.compression, x)
        contexts = None
        if self.cross_attention_dim:
            captions = [""] * len(x) if y is None else list(y)
            contexts = self.text_embedder.embed(captions)
        self.latent_shape_ = tuple(latents.shape[1:])
        self.unet_, self.loss_history_ = self._train(self._init_unet(latents), latents, contexts)
        return self

    def _context(self, n: int, prompts):
        emb = self.text_embedder
        if emb is None:
            return None
        if prompts is None:
            prompts = [""] * n
        elif isinstance(prompts, str):
            prompts = [prompts] * n
        return emb.embed(list(prompts))

    def sample_latents(self, n: int, prompts=None, guidance_scale: float = 1.0, num_inference_steps: int = 50,
                       scheduler: str = "ddim", seed: int = 0, eta: float = 0.0, unet=None) -> torch.Tensor:
        _check_fitted(self, "unet_")
        net = unet or self.unet_
        ctx = self._context(n, prompts)
        return sample(net, scheduler, self.schedule, (n, *self.latent_shape_), RandomSource(seed), ctx,
                      GuidanceConfig(guidance_scale), num_inference_steps, eta)

    def decode(self, z):
        return self.compression.decode(z) if self.compression is not None else z

    def sample(self, n: int, prompts=None, guidance_scale: float = 1.0, num_inference_steps: int = 50,
               scheduler: str = "ddim", seed: int = 0, eta: float = 0.0, untrained: bool = False) -> torch.Tensor:
        """Draw ``n`` images. ``untrained=True`` samples from a freshly initialised UNet (baseline)."""
        net = None
        if untrained:
            net = self._init_unet(torch.zeros(1, *self.latent_shape_)).eval()
        z = self.sample_latents(n, prompts, guidance_scale, num_inference_steps, scheduler, seed, eta, net)
        with torch.no_grad():
            return self.decode(z)

    def save(self, path, metadata: Optional[dict] = None):
        _check_fitted(self, "unet_")
        nets = {"unet": self.unet_}
        meta = {"estimator": "latent_diffusion", "params": _serialisable_params(self),
                "latent_shape": list(self.latent_shape_), "schedule": self.schedule.metadata()}
        if self.compression is not None:
            nets.update(self.compression._networks("compression."))
            meta["compression"] = self.compression._metadata()
        save_checkpoint(path, nets, {**meta, **(metadata or {})})

    @classmethod
    def load(cls, path):
        networks, meta = load_checkpoint(path)
        if meta.get("estimator") != "latent_diffusion":
            raise IncompatibleCheckpoint("checkpoint does not hold a latent diffusion model")
        comp = None
        if "compression" in meta:
            comp = CompressionModel._from_parts(networks, meta["compression"], "compression.")
        est = cls(compression=comp, **meta["params"])
        est.unet_ = networks["unet"]
        est.latent_shape_ = tuple(meta["latent_shape"])
        return est


class LatentTransformer(BaseEstimator):
    """Autoregressive transformer over a VQ-VAE's codebook indices.

    The sequence is the index grid flattened by ``ordering`` with a BOS token
    (index ``num_embeddings``) prepended.
    """

    def __init__(self, compression=None, ordering="raster", ordering_seed=0, dim=64, depth=4, heads=4,
                 optimizer="adamw", lr=1e-3, weight_decay=0.0, n_steps=2000, batch_size=32, seed=0):
        self.compression = compression
        self.ordering = ordering
        self.ordering_seed = ordering_seed
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.seed = seed

    def _validate(self):
        if self.compression is None or self.compression.kind != "vq":
            raise ConfigError("LatentTransformer needs a fitted VQ compression model")

    def fit(self, X, y=None):
        self._validate()
        x = check_images(X)
        grids = torch.cat([self.compression.index_quantize(x[i:i + 128]) for i in range(0, len(x), 128)])
        self.grid_shape_ = tuple(grids.shape[1:])
        self.ordering_ = build_ordering(self.ordering, self.grid_shape_, self.ordering_seed)
        k = self.compression.num_embeddings
        seq = apply_ordering(self.ordering_, grids)
        torch.manual_seed(self.seed)
        self.transformer_ = DecoderOnlyTransformer(k + 1, seq.shape[1] + 1, self.dim, self.depth, self.heads)
        gen = RandomSource(self.seed, 1).torch()
        opt = _optimizer(self.optimizer, self.transformer_.parameters(), self.lr, self.weight_decay)
        bos = torch.full((1, 1), k, dtype=torch.long)
        self.loss_history_ = []
        self.transformer_.train()
        for step in range(self.n_steps):
            batch = seq[_batch_indices(len(seq), self.batch_size, gen)]
            inputs = torch.cat([bos.expand(len(batch), 1), batch[:, :-1]], dim=1)
            logits = self.transformer_(inputs)[..., :k]
            loss = F.cross_entropy(logits.reshape(-1, k), batch.reshape(-1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.loss_history_.append((step, "cross_entropy", loss.item()))
        self.transformer_.eval()
        return self

    def score_samples(self, X) -> np.ndarray:
        """Per-image natural-log likelihood (higher = more typical)."""
        _check_fitted(self, "transformer_")
        x = check_images(X)
        ll = transformer_log_likelihood(self.compression.model_, self.transformer_, self.ordering_, x)
        return ll.numpy()

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X)

    @torch.no_grad()
    def sample(self, n: int, seed: int = 0, temperature: float = 1.0, untrained: bool = False) -> torch.Tensor:
        _check_fitted(self, "transformer_")
        net = self.transformer_
        k = self.compression.num_embeddings
        if untrained:
            torch.manual_seed(self.seed)
            net = DecoderOnlyTransformer(**self.transformer_.config).eval()
        gen = RandomSource(seed).torch()
        length = int(np.prod(self.grid_shape_))
        seq = torch.full((n, 1), k, dtype=torch.long)
        for _ in range(length):
            logits = net(seq)[:, -1, :k] / temperature
            nxt = torch.multinomial(logits.softmax(-1), 1, generator=gen)
            seq = torch.cat([seq, nxt], dim=1)
        grids = invert(self.ordering_, seq[:, 1:])
        return self.compression.model_.decode_indices(grids)

    def save(self, path, metadata: Optional[dict] = None):
        _check_fitted(self, "transformer_")
        nets = {"transformer": self.transformer_, **self.compression._networks("compression.")}
        meta = {"estimator": "latent_transformer", "params": _serialisable_params(self),
                "grid_shape": list(self.grid_shape_), "ordering": self.ordering_.metadata(),
                "compression": self.compression._metadata()}
        save_checkpoint(path, nets, {**meta, **(metadata or {})})

    @classmethod
    def load(cls, path):
        from .ordering import Ordering

        networks, meta = load_checkpoint(path)
        if meta.get("estimator") != "latent_transformer":
            raise IncompatibleCheckpoint("checkpoint does not hold a latent transformer")
        comp = CompressionModel._from_parts(networks, meta["compression"], "compression.")
        est = cls(compression=comp, **meta["params"])
        est.transformer_ = networks["transformer"]
        est.grid_shape_ = tuple(meta["grid_shape"])
        est.ordering_ = Ordering.from_metadata(meta["ordering"])
        return est


class ControlNetTranslator(BaseEstimator):
    """Image-to-image translation with a ControlNet on a frozen diffusion model.

    ``fit(C, X)`` trains only the adapter; the UNet of ``diffusion`` is left
    untouched. ``predict(C)`` samples targets for conditioning images ``C``.
    """

    def __init__(self, diffusion=None, conditioning_embedding_channels=(16, 32, 32), optimizer="adamw", lr=1e-3, n_steps=1000,
                 batch_size=32, seed=0):
        self.diffusion = diffusion
        self.conditioning_embedding_channels = conditioning_embedding_channels
        self.optimizer = optimizer
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.seed = seed

    def _new_controlnet(self, in_channels: int) -> ControlNet:
        torch.manual_seed(self.seed)
        return ControlNet.from_unet(self.diffusion.unet_, in_channels, tuple(self.conditioning_embedding_channels))

    def fit(self, C, X):
        _check_fitted(self.diffusion, "unet_")
        c = check_images(C)
        x = check_images(X)
        if len(c) != len(x):
            raise ShapeMismatch("conditioning and target counts differ")
        latents = _encode_all(self.diffusion.compression, x)
        unet = self.diffusion.unet_
        unet.requires_grad_(False)
        ctrl = self._new_controlnet(c.shape[1])
        schedule = self.diffusion.schedule
        gen = RandomSource(self.seed, 1).torch()
        opt = _optimizer(self.optimizer, ctrl.parameters(), self.lr)
        self.loss_history_ = []
        ctrl.train()
        for step in range(self.n_steps):
            idx = _batch_indices(len(latents), self.batch_size, gen)
            fn = controlnet_model_fn(unet, ctrl, c[idx])
            loss = diffusion_training_loss(fn, latents[idx], schedule, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.loss_history_.append((step, "diffusion", loss.item()))
        ctrl.eval()
        self.controlnet_ = ctrl
        return self

    @torch.no_grad()
    def predict(self, C, seed: int = 0, num_inference_steps: int = 50, scheduler: str = "ddim",
                untrained: bool = False):
        c = check_images(C)
        ctrl = self._new_controlnet(c.shape[1]).eval() if untrained else self.controlnet_
        d = self.diffusion
        fn = controlnet_model_fn(d.unet_, ctrl, c)
        ctx = d._context(len(c), None)
        z = sample(fn, scheduler, d.schedule, (len(c), *d.latent_shape_), RandomSource(seed), ctx,
                   GuidanceConfig(1.0), num_inference_steps)
        return d.decode(z)

    def save(self, path, metadata: Optional[dict] = None):
        _check_fitted(self, "controlnet_")
        d = self.diffusion
        nets = {"controlnet": self.controlnet_, "unet": d.unet_}
        meta = {"estimator": "controlnet", "params": _serialisable_params(self),
                "diffusion_params": _serialisable_params(d), "latent_shape": list(d.latent_shape_)}
        if d.compression is not None:
            nets.update(d.compression._networks("compression."))
            meta["compression"] = d.compression._metadata()
        save_checkpoint(path, nets, {**meta, **(metadata or {})})

    @classmethod
    def load(cls, path):
        networks, meta = load_checkpoint(path)
        if meta.get("estimator") != "controlnet":
            raise IncompatibleCheckpoint("checkpoint does not hold a ControlNet translator")
        comp = None
        if "compression" in meta:
            comp = CompressionModel._from_parts(networks, meta["compression"], "compression.")
        d = LatentDiffusion(compression=comp, **meta["diffusion_params"])
        d.unet_ = networks["unet"]
        d.latent_shape_ = tuple(meta["latent_shape"])
        est = cls(diffusion=d, **meta["params"])
        est.controlnet_ = networks["controlnet"]
        return est


class DiffusionUpscaler(BaseEstimator):
    """Noise-augmented latent diffusion super-resolution.

    The compression model's factor equals the upscaling factor, so the
    low-resolution image lives at latent resolution and is concatenated to the
    diffusion state. The UNet is conditioned on the augmentation noise level
    through a class embedding over ``0..aug_T``.
    """

    def __init__(self, compression=None, factor=2, channels=(32, 64), attention_levels=(False, True),
                 head_channels=(0, 32), num_res_blocks=1, norm_groups=8, profile="scaled_linear", T=1000,
                 beta_start=0.0015, beta_end=0.0205, prediction_type="v_prediction", aug_T=350,
                 aug_beta_start=1e-4, aug_beta_end=0.02, max_train_noise_level=None, optimizer="adamw", lr=1e-3, n_steps=2000,
                 batch_size=32, ema_decay=None, seed=0):
        self.compression = compression
        self.factor = factor
        self.channels = channels
        self.attention_levels = attention_levels
        self.head_channels = head_channels
        self.num_res_blocks = num_res_blocks
        self.norm_groups = norm_groups
        self.profile = profile
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.prediction_type = prediction_type
        self.aug_T = aug_T
        self.aug_beta_start = aug_beta_start
        self.aug_beta_end = aug_beta_end
        self.max_train_noise_level = max_train_noise_level
        self.optimizer = optimizer
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.ema_decay = ema_decay
        self.seed = seed

    @property
    def schedule(self):
        return build_schedule(self.profile, self.T, self.beta_start, self.beta_end, self.prediction_type)

    @property
    def aug_schedule(self):
        return build_schedule("linear", self.aug_T, self.aug_beta_start, self.aug_beta_end, "epsilon")

    def downsample(self, X) -> torch.Tensor:
        x = check_images(X)
        pool = F.avg_pool2d if x.ndim == 4 else F.avg_pool3d
        return pool(x, self.factor)

    def _diffusion(self) -> LatentDiffusion:
        return LatentDiffusion(None, self.channels, self.attention_levels, self.head_channels, self.num_res_blocks,
                               self.norm_groups, None, 8, self.profile, self.T, self.beta_start, self.beta_end,
                               self.prediction_type, 0.0, self.optimizer, self.lr, 0.0, self.n_steps,
                               self.batch_size, self.ema_decay, self.seed)

    def fit(self, X, y=None):
        x = check_images(X)
        if self.compression is None or self.compression.compression_factor != self.factor:
            raise ConfigError("upscaler needs a fitted compression model whose factor equals the upscale factor")
        low = self.downsample(x)
        latents = _encode_all(self.compression, x)
        if tuple(latents.shape[2:]) != tuple(low.shape[2:]):
            raise ShapeMismatch("latent grid must match the low-resolution grid")
        aug = self.aug_schedule
        max_level = self.aug_T if self.max_train_noise_level is None else int(self.max_train_noise_level)

        def step_kwargs(idx, gen):
            levels = torch.randint(0, max_level + 1, (len(idx),), generator=gen)
            lr_batch = low[idx]
            noise = torch.randn(lr_batch.shape, generator=gen)
            noisy = add_noise(lr_batch, noise, levels.clamp(min=1), aug)
            keep = (levels == 0).view(-1, *([1] * (lr_batch.ndim - 1)))
            cond = torch.where(keep, lr_batch, noisy)
            return {"class_labels": levels, "concat": cond}

        trainer = self._diffusion()
        unet = trainer._init_unet(latents, extra_in=low.shape[1], num_class_embeds=self.aug_T + 1)
        self.unet_, self.loss_history_ = trainer._train(_ConcatUNet(unet), latents, None, step_kwargs)
        self.unet_ = self.unet_.unet
        self.latent_channels_ = latents.shape[1]
        return self

    @torch.no_grad()
    def predict(self, X_low, noise_level: int = 1, tiles: Optional[TileSpec] = None, seed: int = 0,
                num_inference_steps: int = 50, scheduler: str = "ddim"):
        _check_fitted(self, "unet_")
        low = check_images(X_low)
        cond = UpscalerConditioning(low, noise_level, self.aug_schedule)
        return upscale(self.unet_, self.compression.decode, self.schedule, cond, tiles, RandomSource(seed),
                       latent_channels=self.latent_channels_, latent_ratio=1, output_factor=self.factor,
                       scheduler_kind=scheduler, num_inference_steps=num_inference_steps)

    def save(self, path, metadata: Optional[dict] = None):
        _check_fitted(self, "unet_")
        nets = {"unet": self.unet_, **self.compression._networks("compression.")}
        meta = {"estimator": "upscaler", "params": _serialisable_params(self),
                "latent_channels": int(self.latent_channels_), "compression": self.compression._metadata()}
        save_checkpoint(path, nets, {**meta, **(metadata or {})})

    @classmethod
    def load(cls, path):
        networks, meta = load_checkpoint(path)
        if meta.get("estimator") != "upscaler":
            raise IncompatibleCheckpoint("checkpoint does not hold an upscaler")
        comp = CompressionModel._from_parts(networks, meta["compression"], "compression.")
        est = cls(compression=comp, **meta["params"])
        est.unet_ = networks["unet"]
        est.latent_channels_ = int(meta["latent_channels"])
        return est


class _ConcatUNet(nn.Module):
    """Training-time adapter: concatenates the conditioning tensor to the state."""

    def __init__(self, unet: DiffusionModelUNet):
        super().__init__()
        self.unet = unet

    def forward(self, x, t, context=None, concat=None, class_labels=None):
        return self.unet(torch.cat([x, concat], dim=1), t, context, class_labels=class_labels)
