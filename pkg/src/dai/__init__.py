"""Partial decryption of keystream-reusing video streams and QoE inference from the recovered QoS."""

__version__ = "0.1.0"
