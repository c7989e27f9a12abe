"""Deterministic simulator for LTE-carrying UAV networks.

Covers ground-truth propagation, UE localization, per-UAV RAN placement,
mesh-backhaul planning and the distributed edge-EPC agents, tied together
by a seeded discrete-event engine.
"""

__version__ = "0.1.0"
