"""Single-file checkpoint container for one or more networks.

Layout (a ``torch.save`` dict, loaded with ``weights_only=True``)::

    {"format_version": 1,
     "networks": {name: {"architecture_id": str, "config": dict,
                         "parameters": {param_name: tensor}}},
     "metadata": dict}
"""
from __future__ import annotations

from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from ..foundation import IncompatibleCheckpoint
from .adversarial import MultiScalePatchDiscriminator, PatchDiscriminator
from .autoencoders import AutoencoderConfig, AutoencoderKL, VQVAE
from .transformer import DecoderOnlyTransformer
from .unet import ControlNet, DiffusionModelEncoder, DiffusionModelUNet, UNetConfig

FORMAT_VERSION = 1


def network_config(net: nn.Module) -> dict:
    if isinstance(net, ControlNet):
        return {"unet": net.config.to_dict(), "conditioning_channels": net.conditioning_channels,
                "conditioning_embedding_channels": list(net.conditioning_embedding_channels)}
    if isinstance(net, DiffusionModelEncoder):
        return {"unet": net.config.to_dict(), "latent_dim": net.latent_dim}
    if isinstance(net, (DiffusionModelUNet, AutoencoderKL, VQVAE)):
        return net.config.to_dict()
    if isinstance(net, (PatchDiscriminator, MultiScalePatchDiscriminator, DecoderOnlyTransformer)):
        return dict(net.config)
    raise TypeError(f"unsupported network type {type(net).__name__}")


def build_network(architecture_id: str, config: dict) -> nn.Module:
    if architecture_id == DiffusionModelUNet.architecture_id:
        return DiffusionModelUNet(UNetConfig(**config))
    if architecture_id == ControlNet.architecture_id:
        return ControlNet(UNetConfig(**config["unet"]), config["conditioning_channels"],
                          config["conditioning_embedding_channels"])
    if architecture_id == DiffusionModelEncoder.architecture_id:
        return DiffusionModelEncoder(UNetConfig(**config["unet"]), config["latent_dim"])
    if architecture_id == AutoencoderKL.architecture_id:
        return AutoencoderKL(AutoencoderConfig(**config))
    if architecture_id == VQVAE.architecture_id:
        return VQVAE(AutoencoderConfig(**config))
    if architecture_id == PatchDiscriminator.architecture_id:
        return PatchDiscriminator(**config)
    if architecture_id == MultiScalePatchDiscriminator.architecture_id:
        return MultiScalePatchDiscriminator(**config)
    if architecture_id == DecoderOnlyTransformer.architecture_id:
        return DecoderOnlyTransformer(**config)
    raise IncompatibleCheckpoint(f"unknown architecture {architecture_id!r}")


def save_checkpoint(path, networks: Dict[str, nn.Module], metadata: Optional[dict] = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "networks": {
            name: {
                "architecture_id": net.architecture_id,
                "config": network_config(net),
                "parameters": {k: v.detach().clone() for k, v in net.state_dict().items()},
            }
            for name, net in networks.items()
        },
        "metadata": metadata or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Tuple[Dict[str, nn.Module], dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint format {payload.get('format_version')!r}")
    networks = {}
    for name, entry in payload["networks"].items():
        net = build_network(entry["architecture_id"], entry["config"])
        expected = net.state_dict()
        params = entry["parameters"]
        if set(expected) != set(params):
            raise IncompatibleCheckpoint(f"{name}: parameter names do not match the config")
        for k, v in params.items():
            if tuple(v.shape) != tuple(expected[k].shape):
                raise IncompatibleCheckpoint(f"{name}.{k}: shape {tuple(v.shape)} != {tuple(expected[k].shape)}")
        net.load_state_dict(params)
        net.eval()
        networks[name] = net
    return networks, payload.get("metadata", {})


def save_network(path, net: nn.Module, metadata: Optional[dict] = None) -> None:
    save_checkpoint(path, {"model": net}, metadata)


def load_network(path) -> nn.Module:
    networks, _ = load_checkpoint(path)
    return networks["model"]
