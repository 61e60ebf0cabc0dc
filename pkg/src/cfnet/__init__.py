"""Controlled Forgetting Networks: event-driven spiking layers with dopaminergic plasticity."""

__version__ = "0.1.0"
