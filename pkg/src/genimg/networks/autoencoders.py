"""Compression models: KL-regularised autoencoder and VQ-VAE."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..foundation import DimMismatch, DivisibilityError, RangeError, ShapeMismatch
from .blocks import Downsample, ResBlock, Upsample, conv_nd, norm

LOG_VAR_MIN, LOG_VAR_MAX = -18.420680743952367, 18.420680743952367  # log(1e-8), log(1e8)


@dataclass
class AutoencoderConfig:
    spatial_rank: int = 2
    in_channels: int = 1
    out_channels: int = 1
    channels: Sequence[int] = (32, 64, 64)
    latent_channels: int = 4
    num_res_blocks: int = 1
    norm_groups: int = 8
    # VQ-only fields
    num_embeddings: int = 64
    commitment_beta: float = 0.25
    ema_decay: Optional[float] = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.spatial_rank not in (2, 3):
            raise RangeError("spatial_rank must be 2 or 3")
        if self.num_embeddings < 2:
            raise RangeError("codebook needs at least 2 entries")

    @property
    def compression_factor(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(d["channels"])
        return d


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig, out_channels: int):
        super().__init__()
        r, g, ch = cfg.spatial_rank, cfg.norm_groups, cfg.channels
        layers = [conv_nd(r, cfg.in_channels, ch[0], 3, padding=1)]
        prev = ch[0]
        for level, c in enumerate(ch):
            for _ in range(cfg.num_res_blocks):
                layers.append(ResBlock(r, prev, c, g))
                prev = c
            if level < len(ch) - 1:
                layers.append(Downsample(r, c))
        layers += [ResBlock(r, prev, prev, g), norm(prev, g), nn.SiLU(), conv_nd(r, prev, out_channels, 3, padding=1)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig, in_channels: int):
        super().__init__()
        r, g, ch = cfg.spatial_rank, cfg.norm_groups, tuple(reversed(cfg.channels))
        layers = [conv_nd(r, in_channels, ch[0], 3, padding=1), ResBlock(r, ch[0], ch[0], g)]
        prev = ch[0]
        for level, c in enumerate(ch):
            for _ in range(cfg.num_res_blocks):
                layers.append(ResBlock(r, prev, c, g))
                prev = c
            if level < len(ch) - 1:
                layers.append(Upsample(r, c))
        layers += [norm(prev, g), nn.SiLU(), conv_nd(r, prev, cfg.out_channels, 3, padding=1)]
        self.layers = nn.Sequential(*layers)

    def forward(self, z):
        return self.layers(z)


def _check_divisible(x: torch.Tensor, cfg: AutoencoderConfig):
    if x.ndim != cfg.spatial_rank + 2:
        raise ShapeMismatch(f"expected rank-{cfg.spatial_rank} input, got {tuple(x.shape)}")
    f = cfg.compression_factor
    if any(d % f for d in x.shape[2:]):
        raise DivisibilityError(f"spatial dims {tuple(x.shape[2:])} not divisible by compression factor {f}")


class AutoencoderKL(nn.Module):
    architecture_id = "autoencoder_kl"

    def __init__(self, config: Optional[AutoencoderConfig] = None, **kwargs):
        super().__init__()
        cfg = config or AutoencoderConfig(**kwargs)
        self.config = cfg
        self.encoder = Encoder(cfg, 2 * cfg.latent_channels)
        self.decoder = Decoder(cfg, cfg.latent_channels)

    def encode(self, x) -> Tuple[torch.Tensor, torch.Tensor]:
        _check_divisible(x, self.config)
        mu, log_var = self.encoder(x).chunk(2, dim=1)
        return mu, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @staticmethod
    def sample(mu, log_var, generator: Optional[torch.Generator] = None):
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * log_var) * eps

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x, generator=None):
        mu, log_var = self.encode(x)
        z = self.sample(mu, log_var, generator)
        return self.decode(z), mu, log_var

    def encode_latent(self, x):
        """Deterministic latent (posterior mean) used for diffusion."""
        return self.encode(x)[0]


kl_encode = AutoencoderKL.encode
kl_sample = AutoencoderKL.sample
kl_decode = AutoencoderKL.decode


class _StraightThrough(torch.autograd.Function):
    # forward returns the codebook vectors bitwise; gradient passes to the encoder output
    @staticmethod
    def forward(ctx, flat, e):
        return e.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook lookup with straight-through gradients.

    Ties resolve to the lowest index. With ``ema_decay`` set, codebook entries
    are updated by exponential moving averages during training and the loss
    keeps only the commitment term.
    """

    def __init__(self, num_embeddings: int, dim: int, commitment_beta: float = 0.25,
                 ema_decay: Optional[float] = None):
        super().__init__()
        self.num_embeddings, self.dim = num_embeddings, dim
        self.commitment_beta = commitment_beta
        self.ema_decay = ema_decay
        self.embedding = nn.Parameter(torch.empty(num_embeddings, dim).uniform_(-1 / num_embeddings, 1 / num_embeddings))
        self.register_buffer("usage_counts", torch.zeros(num_embeddings))
        if ema_decay is not None:
            self.embedding.requires_grad_(False)
            self.register_buffer("ema_size", torch.ones(num_embeddings))
            self.register_buffer("ema_sum", self.embedding.detach().clone())

    def nearest(self, flat: torch.Tensor) -> torch.Tensor:
        dist = ((flat[:, None, :] - self.embedding[None, :, :]) ** 2).sum(-1)
        return dist.argmin(dim=1)

    def forward(self, z: torch.Tensor):
        if z.shape[1] != self.dim:
            raise DimMismatch(f"latent has {z.shape[1]} channels, codebook dim is {self.dim}")
        perm = (0, *range(2, z.ndim), 1)
        z_last = z.permute(*perm)
        flat = z_last.reshape(-1, self.dim)
        with torch.no_grad():
            idx = self.nearest(flat)
        e = self.embedding[idx]
        if self.training:
            with torch.no_grad():
                counts = torch.bincount(idx, minlength=self.num_embeddings).to(self.usage_counts)
                self.usage_counts += counts
                if self.ema_decay is not None:
                    d = self.ema_decay
                    onehot = F.one_hot(idx, self.num_embeddings).to(flat)
                    self.ema_size.mul_(d).add_(counts, alpha=1 - d)
                    self.ema_sum.mul_(d).add_(onehot.t() @ flat.detach(), alpha=1 - d)
                    n = self.ema_size.sum()
                    size = (self.ema_size + 1e-5) / (n + self.num_embeddings * 1e-5) * n
                    self.embedding.data.copy_(self.ema_sum / size[:, None])
        commitment = F.mse_loss(flat, e.detach())
        if self.ema_decay is None:
            loss = F.mse_loss(e, flat.detach()) + self.commitment_beta * commitment
        else:
            loss = self.commitment_beta * commitment
        q = _StraightThrough.apply(flat, e.detach())
        inv = (0, z.ndim - 1, *range(1, z.ndim - 1))
        z_q = q.view(*z_last.shape).permute(*inv).contiguous()
        indices = idx.view(*z_last.shape[:-1])
        return z_q, indices, loss

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        e = self.embedding[indices.long()]
        return e.permute(0, e.ndim - 1, *range(1, e.ndim - 1)).contiguous()


class VQVAE(nn.Module):
    architecture_id = "vqvae"

    def __init__(self, config: Optional[AutoencoderConfig] = None, **kwargs):
        super().__init__()
        cfg = config or AutoencoderConfig(**kwargs)
        self.config = cfg
        self.encoder = Encoder(cfg, cfg.latent_channels)
        self.quantizer = VectorQuantizer(cfg.num_embeddings, cfg.latent_channels, cfg.commitment_beta, cfg.ema_decay)
        self.decoder = Decoder(cfg, cfg.latent_channels)

    def encode(self, x):
        _check_divisible(x, self.config)
        return self.encoder(x)

    def quantize(self, z):
        return self.quantizer(z)

    def decode(self, z_q):
        return self.decoder(z_q)

    def forward(self, x):
        z_q, _, loss = self.quantize(self.encode(x))
        return self.decode(z_q), loss

    def index_quantize(self, x) -> torch.Tensor:
        return self.quantize(self.encode(x))[1]

    def decode_indices(self, indices) -> torch.Tensor:
        return self.decode(self.quantizer.lookup(indices))

    def encode_latent(self, x):
        """Quantised latent used as the diffusion space."""
        return self.quantize(self.encode(x))[0]


def vq_encode(net: VQVAE, x):
    return net.encode(x)


def vq_quantize(z, codebook: VectorQuantizer):
    return codebook(z)


def vq_decode(net: VQVAE, z_q):
    return net.decode(z_q)
