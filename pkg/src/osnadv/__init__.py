"""Adversarial examples that survive lossy social-network image channels.

The package bundles a differentiable JPEG layer, a learned channel surrogate
(SIO), mock upload channels, robust attack variants and an evaluation harness.
"""

from osnadv.attacks import AttackConfig, run_attack
from osnadv.channel import CHANNELS, ChannelSpec, get_channel, transmit
from osnadv.jpeg_codec import estimate_qf, extract_quant_table, jpeg_layer
from osnadv.sio_net import SIOConfig, SIOModel, load_sio, save_sio

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "run_attack",
    "CHANNELS",
    "ChannelSpec",
    "get_channel",
    "transmit",
    "estimate_qf",
    "extract_quant_table",
    "jpeg_layer",
    "SIOConfig",
    "SIOModel",
    "load_sio",
    "save_sio",
]
