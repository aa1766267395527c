"""Deterministic simulation of a heterogeneous trusted execution environment.

A security controller owns the management port of a software-defined PCIe
fabric, moves accelerators between the host's (insecure) world and its own
(secure) world, and runs offloaded work from an encrypted, sequenced task
queue. Everything runs on a virtual clock so runs are reproducible.
"""

__version__ = "0.1.0"
