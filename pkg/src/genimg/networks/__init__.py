from .adversarial import (
    MultiScalePatchDiscriminator,
    PatchDiscriminator,
    SPADENorm,
    multiscale_forward,
    patch_discriminator_forward,
    spade_norm,
)
from .autoencoders import (
    AutoencoderConfig,
    AutoencoderKL,
    VectorQuantizer,
    VQVAE,
    vq_decode,
    vq_encode,
    vq_quantize,
)
from .checkpoint import build_network, load_network, save_network
from .transformer import DecoderOnlyTransformer, sequence_log_likelihood, transformer_forward
from .unet import (
    ControlNet,
    DiffusionModelEncoder,
    DiffusionModelUNet,
    UNetConfig,
    combined_forward,
    controlnet_forward,
    diffusion_encoder_forward,
    unet_forward,
)

__all__ = [
    "AutoencoderConfig",
    "AutoencoderKL",
    "ControlNet",
    "DecoderOnlyTransformer",
    "DiffusionModelEncoder",
    "DiffusionModelUNet",
    "MultiScalePatchDiscriminator",
    "PatchDiscriminator",
    "SPADENorm",
    "UNetConfig",
    "VQVAE",
    "VectorQuantizer",
    "build_network",
    "combined_forward",
    "controlnet_forward",
    "diffusion_encoder_forward",
    "load_network",
    "multiscale_forward",
    "patch_discriminator_forward",
    "save_network",
    "sequence_log_likelihood",
    "spade_norm",
    "transformer_forward",
    "unet_forward",
    "vq_decode",
    "vq_encode",
    "vq_quantize",
]
