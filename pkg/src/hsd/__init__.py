"""Hybrid step-wise distillation for event-based recognition with IF spiking networks."""

__version__ = "0.1.0"
